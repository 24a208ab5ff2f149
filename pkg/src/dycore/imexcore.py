"""IMEX time integration core.

Explicit SSP RK(5,3) baseline, the second-order additive Runge-Kutta (ARK2)
scheme and two-step BDF2, both driven through the same predictor-corrector
implicit problem  q" = q"_e + lam L(q"),  in either the unreduced 5-variable
standard form or the pressure (Schur complement) form, for full 3D implicit
coupling or the vertically-implicit (1D) restriction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import euler, krylov
from . import specgrid as sg


# ---------------------------------------------------------------------------
# Integrator coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ButcherPair:
    """Double Butcher tableau of an additive (explicit/implicit SDIRK) scheme."""
    a: np.ndarray        # explicit tableau
    at: np.ndarray       # implicit tableau
    b: np.ndarray        # shared weights (b = b-tilde for linear invariants)
    c: np.ndarray
    ct: np.ndarray

    @property
    def stages(self) -> int:
        return len(self.b)

    @property
    def diag(self) -> float:
        return float(self.at[1, 1])


def ark2_tableau() -> ButcherPair:
    """L-stable second-order additive RK pair.

    The printed weight row of this scheme fails sum(b) = 1 as commonly
    transcribed; the values below enforce the order/consistency conditions
    (row sums equal c, sum(b) = 1, b shared, stiffly accurate implicit part)
    and are validated by the temporal convergence tests.
    """
    s2 = math.sqrt(2.0)
    gam = 1.0 - 1.0 / s2
    d = 1.0 / (2.0 * s2)
    a32 = (3.0 + 2.0 * s2) / 6.0
    a = np.array([[0.0, 0.0, 0.0],
                  [2.0 - s2, 0.0, 0.0],
                  [1.0 - a32, a32, 0.0]])
    at = np.array([[0.0, 0.0, 0.0],
                   [gam, gam, 0.0],
                   [d, d, gam]])
    b = np.array([d, d, gam])
    return ButcherPair(a=a, at=at, b=b, c=a.sum(axis=1), ct=at.sum(axis=1))


@dataclass(frozen=True)
class BdfCoefficients:
    alpha: np.ndarray
    beta: np.ndarray
    chi: float


def bdf2_coefficients() -> BdfCoefficients:
    return BdfCoefficients(alpha=np.array([4.0 / 3.0, -1.0 / 3.0]),
                           beta=np.array([2.0, -1.0]),
                           chi=2.0 / 3.0)


# Shu-Osher representation of the third-order 5-stage strong-stability-
# preserving Runge-Kutta scheme (effective SSP coefficient ~ 2.65).
_RK35_ALPHA = {
    (1, 0): 1.0,
    (2, 1): 1.0,
    (3, 0): 0.355909775063327, (3, 2): 0.644090224936674,
    (4, 0): 0.367933791638137, (4, 3): 0.632066208361863,
    (5, 2): 0.237593836598569, (5, 4): 0.762406163401431,
}
_RK35_BETA = {
    (1, 0): 0.377268915331368,
    (2, 1): 0.377268915331368,
    (3, 2): 0.242995220537396,
    (4, 3): 0.238458932846290,
    (5, 4): 0.287632146308408,
}


def rk35_butcher():
    """Butcher (A, b, c) arrays of the SSP RK(5,3) scheme (for testing)."""
    rows = [np.zeros(5)]
    for i in range(1, 6):
        row = np.zeros(5)
        for j in range(i):
            al = _RK35_ALPHA.get((i, j), 0.0)
            row += al * rows[j]
            row[j] += _RK35_BETA.get((i, j), 0.0)
        rows.append(row)
    A = np.vstack(rows[:5])
    return A, rows[5], A.sum(axis=1)


def rk35_step(q: np.ndarray, dt: float, rhs) -> np.ndarray:
    """One step of the SSP RK(5,3) scheme in Shu-Osher (convex) form."""
    u = [q]
    for i in range(1, 6):
        acc = np.zeros_like(q)
        for j in range(i):
            al = _RK35_ALPHA.get((i, j), 0.0)
            be = _RK35_BETA.get((i, j), 0.0)
            if al != 0.0:
                acc += al * u[j]
            if be != 0.0:
                acc += (be * dt) * rhs(u[j])
        u.append(acc)
    if np.any(~np.isfinite(u[5])):
        raise FloatingPointError("non-finite state in explicit stage")
    return u[5]


# ---------------------------------------------------------------------------
# Implicit problem
# ---------------------------------------------------------------------------

@dataclass
class SolverSpec:
    method: str = "gmres"          # gmres | bicgstab | richardson | direct
    tol: float = 1e-6
    max_iter: int = 2000
    restart: int = 50
    precon_order: int = 1          # < 0 disables preconditioning
    check_every: int = 4


@dataclass
class SolveStats:
    solves: int = 0
    iterations: int = 0
    matvecs: int = 0
    failures: int = 0

    def add(self, rep: krylov.SolveReport):
        self.solves += 1
        self.iterations += rep.iterations
        self.matvecs += rep.matvecs
        if not rep.converged:
            self.failures += 1


class SolverFailure(RuntimeError):
    def __init__(self, report):
        super().__init__(f"implicit solve failed: iterations={report.iterations} "
                         f"residual={report.residual:.3e} {report.note}")
        self.report = report


@dataclass
class ImplicitProblem:
    """Everything needed to apply and solve (I - lam L) q" = q"_e."""
    disc: euler.Discretization
    ref: euler.ReferenceState
    set_name: str
    discretization: str = "cg"     # 'cg' | 'dg'
    form: str = "schur"            # 'schur' | 'standard'
    dim: str = "3d"                # '3d' | '1d'
    lam: float = 0.0
    solver: SolverSpec = field(default_factory=SolverSpec)
    stats: SolveStats = field(default_factory=SolveStats)
    _pbno_cache: dict = field(default_factory=dict)
    _column_cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.discretization == "dg":
            if self.form == "schur":
                raise ValueError("the pressure-reduced form is not supported "
                                 "with dG fluxes")
            if self.set_name != "set2c":
                raise ValueError("dG requires the conservative set")

    # -- operator pieces ----------------------------------------------------

    def linear(self, q: np.ndarray) -> np.ndarray:
        if self.dim == "1d":
            return euler.vertical_restriction(q, self.ref, self.disc, self.set_name)
        return euler.linear_operator(q, self.ref, self.disc, self.set_name,
                                     dg=(self.discretization == "dg"))

    def lhs_standard(self, q: np.ndarray) -> np.ndarray:
        """(I - lam L) q in the 5-variable standard form."""
        return q - self.lam * self.linear(q)

    def _ainv(self, v: np.ndarray) -> np.ndarray:
        """Rank-one (Sherman-Morrison) inverse of A = I + lam^2 u w^T."""
        ref = self.ref
        if self.set_name == "set2nc":
            w = ref.grad_theta0
            if not np.any(w):
                return v          # constant theta0: A is the identity
            u = (self.lam ** 2 / ref.theta0)[..., None] * ref.gvec
        else:
            w = ref.grad_G0_c
            if not np.any(w):
                return v
            u = (self.lam ** 2 / ref.G0_c)[..., None] * ref.gvec
        den = 1.0 + np.einsum("...a,...a->...", w, u)
        if np.any(np.abs(den) < 1e-12):
            raise FloatingPointError("rank-one inverse denominator underflow")
        wv = np.einsum("...a,...a->...", w, v)
        return v - u * (wv / den)[..., None]

    def _gradP(self, P):
        if self.dim == "1d":
            return self.disc.grad_vc(P)
        return self.disc.gradc(P)

    def _div(self, vec):
        if self.dim == "1d":
            return self.disc.div_vc(vec)
        return self.disc.divc(vec)

    def rhs_schur_build(self, q_e: np.ndarray):
        """Pressure right-hand side and the stored velocity-like estimate."""
        ref = self.ref
        lam = self.lam
        Pe = euler.linearized_pressure(q_e, ref, self.set_name)
        vel_e = np.moveaxis(q_e[1:4], 0, -1)
        if self.set_name == "set2nc":
            coef = lam * ref.H0_nc / (ref.G0_nc * ref.rho0)
            ua = self._ainv(vel_e + (coef * q_e[4])[..., None] * ref.gvec)
        else:
            ua = self._ainv(vel_e - (lam * (q_e[0] - q_e[4] / ref.G0_c))[..., None]
                            * ref.gvec)
        euler.zero_normal_velocity(ua, self.disc.bidx, self.disc.bproj)
        rhs = Pe - self._helmholtz_flux(ua)
        return rhs, ua

    def _up(self, P: np.ndarray) -> np.ndarray:
        """Pressure-driven velocity-like variable of the reduced system."""
        ref = self.ref
        lam = self.lam
        gP = self._gradP(P)
        if self.set_name == "set2nc":
            up = self._ainv(lam * (gP / ref.rho0[..., None]
                                   + (P / (ref.G0_nc * ref.rho0))[..., None] * ref.gvec))
        else:
            up = self._ainv(lam * (gP + (P / (ref.F0_c * ref.G0_c))[..., None]
                                   * ref.gvec))
        euler.zero_normal_velocity(up, self.disc.bidx, self.disc.bproj)
        return up

    def _helmholtz_flux(self, vel: np.ndarray) -> np.ndarray:
        """lam-scaled pressure-equation flux of a velocity-like field."""
        ref = self.ref
        lam = self.lam
        if self.set_name == "set2nc":
            return lam * (np.einsum("...a,...a->...", ref.F0vec_nc, vel)
                          + ref.rho0 * ref.G0_nc * self._div(vel))
        # conservative set: F0 lam div(G0 U) expanded with analytic grad G0
        return ref.F0_c * lam * (ref.G0_c * self._div(vel)
                                 + np.einsum("...a,...a->...", ref.grad_G0_c, vel))

    def lhs_schur(self, P: np.ndarray) -> np.ndarray:
        return P - self._helmholtz_flux(self._up(P))

    def extract_from_pressure(self, P: np.ndarray, ua: np.ndarray,
                              q_e: np.ndarray) -> np.ndarray:
        ref = self.ref
        lam = self.lam
        vel = ua - self._up(P)
        q = np.empty_like(q_e)
        q[1:4] = np.moveaxis(vel, -1, 0)
        if self.set_name == "set2nc":
            if self.dim == "1d":
                uv = np.einsum("...a,...a->...", vel, self.disc.mesh.vert)
                adv = uv[..., None] * self.disc.mesh.vert
            else:
                adv = vel
            q[4] = q_e[4] - lam * np.einsum("...a,...a->...", adv, ref.grad_theta0)
            q[0] = (P - ref.H0_nc * q[4]) / ref.G0_nc
        else:
            q[4] = P / ref.F0_c
            if self.dim == "1d":
                uv = np.einsum("...a,...a->...", vel, self.disc.mesh.vert)
                adv = uv[..., None] * self.disc.mesh.vert
            else:
                adv = vel
            q[0] = (P / (ref.F0_c * ref.G0_c)
                    + lam / ref.G0_c * np.einsum("...a,...a->...", adv, ref.grad_G0_c)
                    - q_e[4] / ref.G0_c + q_e[0])
        return q

    # -- solve --------------------------------------------------------------

    def _get_pbno(self, amap: krylov.LinearMap, order: int):
        key = (round(self.lam, 12), self.form, self.dim, order, amap.n)
        if key not in self._pbno_cache:
            try:
                self._pbno_cache[key] = krylov.build_pbno(amap, order)
            except ValueError:
                # indefinite spectrum estimate: run unpreconditioned
                self._pbno_cache[key] = None
        return self._pbno_cache[key]

    def solve(self, q_e: np.ndarray) -> np.ndarray:
        """Solve q" = q"_e + lam L(q") and return q" (all five variables)."""
        if self.lam <= 0:
            raise ValueError("implicit solve requires positive lam")
        if self.solver.method == "direct":
            if self.dim != "1d":
                raise ValueError("the direct column solver requires the 1D form")
            from . import columnsolve
            out = columnsolve.solve_direct(self, q_e)
            self.stats.solves += 1
            return out
        if self.form == "standard":
            shape = q_e.shape
            # per-field diagonal scaling: the raw 5-variable operator mixes
            # units (density vs velocity vs temperature) and is severely
            # ill-conditioned; q = D x with D = diag(rho/c, 1, 1, 1, theta/c)
            # balances the acoustic couplings
            cbar = float(np.sqrt(self.ref.G0_nc.mean()))
            D = np.ones((5,) + (1,) * (q_e.ndim - 1))
            D[0] = float(self.ref.rho0.mean()) / cbar
            D[4] = float(self.ref.theta0.mean()) / cbar
            Df = np.broadcast_to(D, shape).reshape(-1)
            amap = krylov.LinearMap(
                q_e.size,
                lambda v: (self.lhs_standard((v.reshape(shape) * D))
                           / D).ravel())
            x, rep = self._run_krylov(amap, q_e.ravel() / Df,
                                      q_e.ravel() / Df)
            self.stats.add(rep)
            if not rep.converged:
                raise SolverFailure(rep)
            return x.reshape(shape) * D
        # pressure-reduced form
        rhs, ua = self.rhs_schur_build(q_e)
        Pe = euler.linearized_pressure(q_e, self.ref, self.set_name)
        shape = rhs.shape
        amap = krylov.LinearMap(
            rhs.size, lambda v: self.lhs_schur(v.reshape(shape)).ravel())
        x, rep = self._run_krylov(amap, rhs.ravel(), Pe.ravel())
        self.stats.add(rep)
        if not rep.converged:
            raise SolverFailure(rep)
        return self.extract_from_pressure(x.reshape(shape), ua, q_e)

    def _run_krylov(self, amap, b, x0):
        spec = self.solver
        pre = None
        if spec.precon_order >= 0 and spec.method in ("bicgstab", "richardson"):
            pre = self._get_pbno(amap, spec.precon_order)
        elif spec.precon_order > 0:
            pre = self._get_pbno(amap, spec.precon_order)
        if spec.method == "gmres":
            return krylov.gmres(amap, b, tol=spec.tol, max_iter=spec.max_iter,
                                restart=spec.restart, precon=pre, x0=x0)
        if spec.method == "bicgstab":
            return krylov.bicgstab_pbno(amap, b, tol=spec.tol,
                                        max_iter=spec.max_iter, precon=pre, x0=x0)
        if spec.method == "richardson":
            return krylov.richardson_pbno(amap, b, tol=spec.tol,
                                          max_iter=spec.max_iter, precon=pre,
                                          x0=x0, check_every=spec.check_every)
        raise ValueError(f"unknown solver {spec.method!r}")


def dg_surface_lhs(q: np.ndarray, problem: ImplicitProblem) -> np.ndarray:
    """Surface contribution added to the dG standard-form left-hand side."""
    return -problem.lam * euler.dg_surface_linear(q, problem.ref, problem.disc)


# ---------------------------------------------------------------------------
# IMEX steps
# ---------------------------------------------------------------------------

def ark_imex_step(q: np.ndarray, dt: float, tableau: ButcherPair,
                  problem: ImplicitProblem, rhs) -> np.ndarray:
    """One additive Runge-Kutta IMEX step.

    Stage 1 is explicit (c_1 = 0, no solve); stages i >= 2 solve the shifted
    predictor-corrector problem with lam = a~_ii dt.  The final combine uses
    the shared weights, q^{n+1} = q^n + dt sum_i b_i R(q^(i)).
    """
    s = tableau.stages
    stages = [q]
    R = [rhs(q)]
    L = [problem.linear(q)]
    problem.lam = tableau.diag * dt
    for i in range(1, s):
        pred = q.copy()
        for j in range(i):
            aij = tableau.a[i, j]
            atij = tableau.at[i, j]
            pred += dt * (aij * (R[j] - L[j]) + atij * L[j])
        qi = problem.solve(pred)
        stages.append(qi)
        R.append(rhs(qi))
        if i < s - 1:
            L.append(problem.linear(qi))
    out = q.copy()
    for i in range(s):
        out += dt * tableau.b[i] * R[i]
    if np.any(~np.isfinite(out)):
        raise FloatingPointError("non-finite state after IMEX step")
    return out


def bdf2_imex_step(qn: np.ndarray, qnm1: np.ndarray, dt: float,
                   coeffs: BdfCoefficients, problem: ImplicitProblem,
                   rhs) -> np.ndarray:
    """One two-step BDF2 IMEX step (history: q^n, q^{n-1})."""
    al, be, chi = coeffs.alpha, coeffs.beta, coeffs.chi
    problem.lam = chi * dt
    qe = (al[0] * qn + al[1] * qnm1
          + chi * dt * (be[0] * rhs(qn) + be[1] * rhs(qnm1)))
    shift = be[0] * qn + be[1] * qnm1
    qtt = problem.solve(qe - shift)
    out = qtt + shift
    if np.any(~np.isfinite(out)):
        raise FloatingPointError("non-finite state after IMEX step")
    return out

"""Compressible Euler equation sets and their linear/nonlinear operators.

Two equation sets are supported:

* ``set2nc`` -- non-conservative variables (rho', u, v, w, theta')
* ``set2c``  -- conservative variables (rho', U, V, W, Theta')

All prognostic fields are perturbations from a hydrostatically balanced
reference state.  State arrays have shape ``(5, nel, nqt, nqs, nqr)`` with
slots (density, 3 velocity/momentum components in Cartesian frame,
potential-temperature-like variable).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import specgrid as sg


@dataclass(frozen=True)
class GasConstants:
    c_p: float = 1004.5
    c_v: float = 717.5
    P0: float = 1.0e5
    g: float = 9.80616

    @property
    def R(self) -> float:
        return self.c_p - self.c_v

    @property
    def gamma(self) -> float:
        return self.c_p / self.c_v


@dataclass
class State:
    set_name: str            # 'set2nc' | 'set2c'
    q: np.ndarray            # (5, nel, nqt, nqs, nqr)

    def copy(self) -> "State":
        return State(self.set_name, self.q.copy())

    @property
    def rho(self):
        return self.q[0]

    @property
    def vel(self):
        """Momentum-like components with trailing axis 3."""
        return np.moveaxis(self.q[1:4], 0, -1)

    @property
    def theta(self):
        return self.q[4]


def zero_state(set_name: str, mesh: sg.ElementMesh) -> State:
    return State(set_name, np.zeros((5,) + mesh.nshape))


def check_positive_density(state: State, ref: "ReferenceState"):
    if np.any(ref.rho0 + state.q[0] <= 0):
        raise FloatingPointError("total density lost positivity")


@dataclass
class ReferenceState:
    const: GasConstants
    rho0: np.ndarray
    theta0: np.ndarray
    P0f: np.ndarray           # background pressure field P0(h)
    grad_rho0: np.ndarray     # (..., 3), analytic
    grad_theta0: np.ndarray
    gvec: np.ndarray          # gravity vector field g * vertical-unit
    # cached derived coefficients
    _cache: dict = field(default_factory=dict)

    # --- set2nc coefficients ---
    @property
    def G0_nc(self):
        if "G0_nc" not in self._cache:
            self._cache["G0_nc"] = self.const.gamma * self.P0f / self.rho0
        return self._cache["G0_nc"]

    @property
    def H0_nc(self):
        if "H0_nc" not in self._cache:
            self._cache["H0_nc"] = self.const.gamma * self.P0f / self.theta0
        return self._cache["H0_nc"]

    @property
    def F0vec_nc(self):
        if "F0vec_nc" not in self._cache:
            self._cache["F0vec_nc"] = (self.G0_nc[..., None] * self.grad_rho0
                                       + self.H0_nc[..., None] * self.grad_theta0)
        return self._cache["F0vec_nc"]

    # --- set2c coefficients ---
    @property
    def Theta0(self):
        if "Theta0" not in self._cache:
            self._cache["Theta0"] = self.rho0 * self.theta0
        return self._cache["Theta0"]

    @property
    def F0_c(self):
        if "F0_c" not in self._cache:
            self._cache["F0_c"] = self.const.gamma * self.P0f / self.Theta0
        return self._cache["F0_c"]

    @property
    def G0_c(self):
        # Theta0 / rho0
        return self.theta0

    @property
    def grad_G0_c(self):
        return self.grad_theta0


def hydrostatic_reference(mesh: sg.ElementMesh, theta_bg: float,
                          const: GasConstants = GasConstants()) -> ReferenceState:
    """Analytic constant-potential-temperature hydrostatic background.

    Exner pressure pi(h) = 1 - g h / (c_p theta0); P0(h) = P0 pi^(cp/R);
    rho0 = P0(h) / (R theta0 pi).  Gradients are analytic and purely
    vertical, so the discrete state is balanced to round-off.
    """
    if theta_bg <= 0:
        raise ValueError("background potential temperature must be positive")
    c = const
    h = mesh.height
    pi = 1.0 - c.g * h / (c.c_p * theta_bg)
    if np.any(pi <= 0):
        raise ValueError("domain too tall for this background temperature")
    P0f = c.P0 * pi ** (c.c_p / c.R)
    rho0 = P0f / (c.R * theta_bg * pi)
    theta0 = np.full_like(h, theta_bg)
    # d pi / dh and chain rule; dP0/dh = -rho0 g exactly
    dpi = -c.g / (c.c_p * theta_bg)
    drho0_dh = rho0 * (c.c_p / c.R - 1.0) * dpi / pi
    grad_rho0 = drho0_dh[..., None] * mesh.vert
    grad_theta0 = np.zeros(mesh.nshape + (3,))
    gvec = c.g * mesh.vert
    return ReferenceState(const=c, rho0=rho0, theta0=theta0, P0f=P0f,
                          grad_rho0=grad_rho0, grad_theta0=grad_theta0, gvec=gvec)


def isothermal_reference(mesh: sg.ElementMesh, T_bg: float,
                         const: GasConstants = GasConstants()) -> ReferenceState:
    """Analytic constant-temperature hydrostatic background.

    Exner pressure pi(h) = exp(-g h / (c_p T0)); P0(h) = P0 pi^(cp/R);
    rho0 = P0(h) / (R T0); theta0 = T0 / pi grows with height (stably
    stratified), and the sound speed sqrt(gamma R T0) is uniform.
    Gradients are analytic and purely vertical.
    """
    if T_bg <= 0:
        raise ValueError("background temperature must be positive")
    c = const
    h = mesh.height
    pi = np.exp(-c.g * h / (c.c_p * T_bg))
    P0f = c.P0 * pi ** (c.c_p / c.R)
    rho0 = P0f / (c.R * T_bg)
    theta0 = T_bg / pi
    # dP0/dh = -rho0 g exactly; dtheta0/dh = (g / c_p) / pi
    drho0_dh = -rho0 * c.g / (c.R * T_bg)
    grad_rho0 = drho0_dh[..., None] * mesh.vert
    dth0_dh = (c.g / c.c_p) / pi
    grad_theta0 = dth0_dh[..., None] * mesh.vert
    gvec = c.g * mesh.vert
    return ReferenceState(const=c, rho0=rho0, theta0=theta0, P0f=P0f,
                          grad_rho0=grad_rho0, grad_theta0=grad_theta0, gvec=gvec)


def equation_of_state(rho: np.ndarray, theta: np.ndarray,
                      const: GasConstants) -> np.ndarray:
    """Full nonlinear pressure P = P0 (rho R theta / P0)^gamma."""
    if np.any(rho <= 0) or np.any(theta <= 0):
        raise ValueError("EOS requires positive density and temperature")
    return const.P0 * (rho * const.R * theta / const.P0) ** const.gamma


def linearized_pressure(q: np.ndarray, ref: ReferenceState, set_name: str) -> np.ndarray:
    """Perturbation pressure of the linearized equation of state."""
    if set_name == "set2nc":
        return ref.G0_nc * q[0] + ref.H0_nc * q[4]
    if set_name == "set2c":
        return ref.F0_c * q[4]
    raise ValueError(f"unknown equation set {set_name!r}")


# ---------------------------------------------------------------------------
# Boundary conditions (no-flux)
# ---------------------------------------------------------------------------

def boundary_entries(mesh: sg.ElementMesh, metrics: sg.MetricTerms):
    """Flat node indices and outward unit normals for all boundary face nodes."""
    nqt, nqs, nqr = mesh.quad_t.N + 1, mesh.quad_s.N + 1, mesh.quad_r.N + 1
    pernode = nqt * nqs * nqr
    idx_all = []
    nrm_all = []
    base = np.arange(pernode).reshape(nqt, nqs, nqr)
    for fg in metrics.bfaces:
        sel = sg.face_node_index(mesh, fg.axis, fg.side)
        idx = fg.elem * pernode + base[sel].ravel()
        idx_all.append(idx)
        nrm_all.append(fg.normal.reshape(-1, 3))
    if not idx_all:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    return np.concatenate(idx_all), np.concatenate(nrm_all)


def boundary_projectors(mesh: sg.ElementMesh, metrics: sg.MetricTerms,
                        dss: sg.DssMap):
    """Per-node tangential projectors for all boundary points.

    A node can sit on several boundary faces (edges, corners) and on several
    coincident element copies; the normals of every face meeting at the
    physical point are collected through the coincidence groups and
    orthonormalized, so a corner node loses all of its normal components and
    every coincident copy is projected identically.
    """
    bidx, bnrm = boundary_entries(mesh, metrics)
    if bidx.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3, 3))
    gid = dss.gid
    bgroups = gid[bidx]
    proj_of = {}
    order = np.argsort(bgroups, kind="stable")
    sg_ids = bgroups[order]
    starts = np.flatnonzero(np.r_[True, sg_ids[1:] != sg_ids[:-1]])
    bounds = np.r_[starts, len(sg_ids)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        g = sg_ids[a]
        normals = bnrm[order[a:b]]
        basis = []
        for nv in normals:
            w = nv.copy()
            for bv in basis:
                w -= np.dot(w, bv) * bv
            nw = np.linalg.norm(w)
            if nw > 1e-8:
                basis.append(w / nw)
        P = np.eye(3)
        for bv in basis:
            P -= np.outer(bv, bv)
        proj_of[g] = P
    # scatter to every node whose group touches the boundary
    members = np.flatnonzero(np.isin(gid, np.fromiter(proj_of, dtype=np.int64)))
    proj = np.empty((len(members), 3, 3))
    for i, node in enumerate(members):
        proj[i] = proj_of[gid[node]]
    return members.astype(np.int64), proj


def zero_normal_velocity(vel: np.ndarray, bidx: np.ndarray, bproj: np.ndarray):
    """In place: remove all boundary-normal components of a vector field."""
    flat = vel.reshape(-1, 3)
    flat[bidx] = np.einsum("nab,nb->na", bproj, flat[bidx])


# ---------------------------------------------------------------------------
# Linear operators
# ---------------------------------------------------------------------------

@dataclass
class Discretization:
    """Bundle of grid objects shared by all operator evaluations."""
    mesh: sg.ElementMesh
    metrics: sg.MetricTerms
    dss: sg.DssMap
    bidx: np.ndarray
    bproj: np.ndarray
    rot: sg.RotationField = None

    def gradc(self, f):
        """DSS-projected (continuous) gradient of a scalar field."""
        g = sg.grad(f, self.mesh, self.metrics)
        for m in range(3):
            g[..., m] = sg.apply_dss(g[..., m], self.dss)
        return g

    def divc(self, vec):
        """DSS-projected divergence of a vector field."""
        return sg.apply_dss(sg.div(vec, self.mesh, self.metrics), self.dss)

    def grad_vc(self, f):
        """DSS-projected vertical derivative times the vertical unit vector."""
        d = sg.apply_dss(sg.deriv_vertical(f, self.mesh, self.metrics), self.dss)
        return d[..., None] * self.mesh.vert

    def div_vc(self, vec):
        """DSS-projected vertical part of the divergence."""
        vv = np.einsum("...a,...a->...", vec, self.mesh.vert)
        return sg.apply_dss(sg.deriv_vertical(vv, self.mesh, self.metrics), self.dss)


def build_discretization(mesh: sg.ElementMesh) -> Discretization:
    metrics = sg.compute_metrics(mesh)
    dss = sg.build_dss_map(mesh, metrics)
    bidx, bproj = boundary_projectors(mesh, metrics, dss)
    disc = Discretization(mesh=mesh, metrics=metrics, dss=dss,
                          bidx=bidx, bproj=bproj)
    disc.rot = sg.build_rotation_matrices(mesh)
    return disc


def linear_operator(q: np.ndarray, ref: ReferenceState, disc: Discretization,
                    set_name: str, vertical_only: bool = False,
                    dg: bool = False) -> np.ndarray:
    """The implicit linear operator L(q) containing acoustic/gravity terms.

    cG: gradients and divergences are DSS-projected individually and combined
    pointwise with (continuous) reference coefficients, so the operator maps
    continuous fields to continuous fields and its pressure reduction is an
    exact algebraic identity.  With ``vertical_only`` the derivatives are
    restricted to the radial/vertical direction (HEVI splitting).

    dG: raw elementwise derivatives plus a Rusanov surface penalty built
    from reference-state wave speeds; no-flux boundaries enter through
    mirrored ghost traces.
    """
    if dg and set_name != "set2c":
        raise ValueError("dG discretization requires the conservative set")
    vel = np.moveaxis(q[1:4], 0, -1)
    out = np.zeros_like(q)
    P = linearized_pressure(q, ref, set_name)
    if vertical_only:
        gradP = disc.grad_vc(P)
        divU = disc.div_vc(vel)
        uvert = np.einsum("...a,...a->...", vel, disc.mesh.vert)[..., None] * disc.mesh.vert
        adv = uvert
    elif dg:
        gradP = sg.grad(P, disc.mesh, disc.metrics)
        divU = sg.div(vel, disc.mesh, disc.metrics)
        adv = vel
    else:
        gradP = disc.gradc(P)
        divU = disc.divc(vel)
        adv = vel
    if set_name == "set2nc":
        out[0] = -(np.einsum("...a,...a->...", adv, ref.grad_rho0) + ref.rho0 * divU)
        mom = -(gradP / ref.rho0[..., None] + (q[0] / ref.rho0)[..., None] * ref.gvec)
        out[4] = -np.einsum("...a,...a->...", adv, ref.grad_theta0)
    elif set_name == "set2c":
        out[0] = -divU
        mom = -(gradP + q[0][..., None] * ref.gvec)
        out[4] = -(ref.G0_c * divU
                   + np.einsum("...a,...a->...", adv, ref.grad_G0_c))
    else:
        raise ValueError(f"unknown equation set {set_name!r}")
    if vertical_only:
        # momentum forcing acts along the vertical direction only
        mom = np.einsum("...a,...a->...", mom, disc.mesh.vert)[..., None] * disc.mesh.vert
    if not dg:
        zero_normal_velocity(mom, disc.bidx, disc.bproj)
    out[1:4] = np.moveaxis(mom, -1, 0)
    if dg:
        out += dg_surface_linear(q, ref, disc)
    return out


def vertical_restriction(q: np.ndarray, ref: ReferenceState,
                         disc: Discretization, set_name: str) -> np.ndarray:
    """Vertical/radial restriction of the linear operator (1D-IMEX)."""
    return linear_operator(q, ref, disc, set_name, vertical_only=True)


def _set2c_linear_flux_normal(q5, G0, F0, nrm):
    """Normal linear flux of set2c: (U.n, P' n, G0 U.n)."""
    Un = np.einsum("na,na->n", q5[:, 1:4], nrm)
    Pp = F0 * q5[:, 4]
    F = np.empty_like(q5)
    F[:, 0] = Un
    F[:, 1:4] = Pp[:, None] * nrm
    F[:, 4] = G0 * Un
    return F


def dg_surface_linear(q: np.ndarray, ref: ReferenceState,
                      disc: Discretization) -> np.ndarray:
    """Rusanov surface penalty contribution to the linear operator (dG).

    The wave speed is the reference sound speed sqrt(gamma P0 / rho0); the
    extra |n.u| term of the explicit flux is absent here.
    """
    mesh = disc.mesh
    const = ref.const
    pernode = int(np.prod(mesh.nshape[1:]))
    base = np.arange(pernode).reshape(mesh.nshape[1:])
    qf = q.reshape(5, -1)
    G0f = ref.G0_c.ravel()
    F0f = ref.F0_c.ravel()
    cs_ref = np.sqrt(const.gamma * ref.P0f / ref.rho0).ravel()
    out = np.zeros_like(q)
    outf = out.reshape(5, -1)

    def face_idx(fg):
        sel = sg.face_node_index(mesh, fg.axis, fg.side)
        return fg.elem * pernode + base[sel].ravel()

    def penalty(idx_self, q_self, q_nbr, fg):
        nrm = fg.normal.reshape(-1, 3)
        F_s = _set2c_linear_flux_normal(q_self, G0f[idx_self], F0f[idx_self], nrm)
        F_n = _set2c_linear_flux_normal(q_nbr, G0f[idx_self], F0f[idx_self], nrm)
        c = cs_ref[idx_self]
        nFstar = 0.5 * (F_s + F_n) - 0.5 * c[:, None] * (q_nbr - q_self)
        lift = fg.lift.ravel()
        outf[:, idx_self] -= (lift[:, None] * (nFstar - F_s)).T

    for fp in disc.metrics.ifaces:
        im = face_idx(fp.minus)
        ip = face_idx(fp.plus)[fp.perm]
        qm = qf[:, im].T
        qp = qf[:, ip].T
        penalty(im, qm, qp, fp.minus)
        penalty(ip, qp, qm, fp.plus)
    for fg in disc.metrics.bfaces:
        idx = face_idx(fg)
        qs = qf[:, idx].T
        nrm = fg.normal.reshape(-1, 3)
        qg = qs.copy()
        Un = np.einsum("na,na->n", qs[:, 1:4], nrm)
        qg[:, 1:4] = qs[:, 1:4] - 2.0 * Un[:, None] * nrm
        penalty(idx, qs, qg, fg)
    return out


# ---------------------------------------------------------------------------
# Nonlinear right-hand side
# ---------------------------------------------------------------------------

def nonlinear_rhs(q: np.ndarray, ref: ReferenceState, disc: Discretization,
                  set_name: str, dg: bool = False) -> np.ndarray:
    """Full right-hand side R(q) of the chosen equation set.

    cG: advective (set2nc) or flux (set2c) form with DSS assembly.
    dG: strong-form set2c with Rusanov interface fluxes.
    """
    if np.any(~np.isfinite(q)):
        raise FloatingPointError("non-finite state passed to RHS evaluation")
    mesh, metrics, dss = disc.mesh, disc.metrics, disc.dss
    c = ref.const
    out = np.empty_like(q)
    if set_name == "set2nc":
        if dg:
            raise ValueError("dG discretization requires the conservative set")
        u = np.moveaxis(q[1:4], 0, -1)
        rho = ref.rho0 + q[0]
        theta = ref.theta0 + q[4]
        P = equation_of_state(rho, theta, c)
        Pp = P - ref.P0f
        divu = sg.div(u, mesh, metrics)

        def advect(f, grad0=None):
            g = sg.grad(f, mesh, metrics)
            a = np.einsum("...a,...a->...", u, g)
            if grad0 is not None:
                a = a + np.einsum("...a,...a->...", u, grad0)
            return a

        out[0] = -(advect(q[0], ref.grad_rho0) + rho * divu)
        gradPp = sg.grad(Pp, mesh, metrics)
        mom = -(np.stack([advect(q[m]) for m in (1, 2, 3)], axis=-1)
                + gradPp / rho[..., None]
                + (q[0] / rho)[..., None] * ref.gvec)
        out[1:4] = np.moveaxis(mom, -1, 0)
        out[4] = -advect(q[4], ref.grad_theta0)
    elif set_name == "set2c":
        U = np.moveaxis(q[1:4], 0, -1)
        rho = ref.rho0 + q[0]
        Theta = ref.Theta0 + q[4]
        theta = Theta / rho
        P = equation_of_state(rho, theta, c)
        Pp = P - ref.P0f
        out[0] = -sg.div(U, mesh, metrics)
        for m in range(3):
            Fm = U[..., m][..., None] * U / rho[..., None]
            Fm[..., m] += Pp
            out[1 + m] = -sg.div(Fm, mesh, metrics)
        out[1:4] -= np.moveaxis(q[0][..., None] * ref.gvec, -1, 0)
        out[4] = -sg.div(theta[..., None] * U, mesh, metrics)
        if dg:
            _dg_rhs_surface(q, out, ref, disc)
    else:
        raise ValueError(f"unknown equation set {set_name!r}")
    if not dg:
        out = sg.apply_dss_many(out, dss)
        mom = np.moveaxis(out[1:4], 0, -1).copy()
        zero_normal_velocity(mom, disc.bidx, disc.bproj)
        out[1:4] = np.moveaxis(mom, -1, 0)
    return out


def _set2c_flux_normal(q5, rho0, Theta0, P0f, nrm, const):
    """Normal flux of set2c at face nodes; q5 is (n, 5) of perturbations."""
    rho = rho0 + q5[:, 0]
    U = q5[:, 1:4]
    Theta = Theta0 + q5[:, 4]
    P = const.P0 * (const.R * Theta / const.P0) ** const.gamma
    Pp = P - P0f
    Un = np.einsum("na,na->n", U, nrm)
    F = np.empty_like(q5)
    F[:, 0] = Un
    F[:, 1:4] = Un[:, None] * U / rho[:, None] + Pp[:, None] * nrm
    F[:, 4] = Un * Theta / rho
    cs = np.abs(Un / rho) + np.sqrt(const.gamma * P / rho)
    return F, cs


def _dg_rhs_surface(q, out, ref: ReferenceState, disc: Discretization):
    """Rusanov interface/boundary penalty for the strong-form dG RHS."""
    mesh = disc.mesh
    const = ref.const
    pernode = int(np.prod(mesh.nshape[1:]))
    base = np.arange(pernode).reshape(mesh.nshape[1:])
    qf = q.reshape(5, -1)
    rho0f = ref.rho0.ravel()
    Th0f = ref.Theta0.ravel()
    P0ff = ref.P0f.ravel()
    outf = out.reshape(5, -1)

    def face_idx(fg):
        sel = sg.face_node_index(mesh, fg.axis, fg.side)
        return fg.elem * pernode + base[sel].ravel()

    def penalty(idx_self, q_self, q_nbr, fg):
        nrm = fg.normal.reshape(-1, 3)
        F_s, c_s = _set2c_flux_normal(q_self, rho0f[idx_self], Th0f[idx_self],
                                      P0ff[idx_self], nrm, const)
        F_n, c_n = _set2c_flux_normal(q_nbr, rho0f[idx_self], Th0f[idx_self],
                                      P0ff[idx_self], nrm, const)
        c = np.maximum(c_s, c_n)
        nFstar = 0.5 * (F_s + F_n) - 0.5 * c[:, None] * (q_nbr - q_self)
        lift = fg.lift.ravel()
        outf[:, idx_self] -= (lift[:, None] * (nFstar - F_s)).T

    for fp in disc.metrics.ifaces:
        im = face_idx(fp.minus)
        ip = face_idx(fp.plus)[fp.perm]
        qm = qf[:, im].T
        qp = qf[:, ip].T
        penalty(im, qm, qp, fp.minus)
        penalty(ip, qp, qm, fp.plus)
    for fg in disc.metrics.bfaces:
        idx = face_idx(fg)
        qs = qf[:, idx].T
        nrm = fg.normal.reshape(-1, 3)
        qg = qs.copy()
        Un = np.einsum("na,na->n", qs[:, 1:4], nrm)
        qg[:, 1:4] = qs[:, 1:4] - 2.0 * Un[:, None] * nrm
        penalty(idx, qs, qg, fg)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def courant_numbers(q: np.ndarray, ref: ReferenceState, disc: Discretization,
                    dt: float, set_name: str):
    """(C_H, C_V) based on |u| + sound speed and minimal node spacings."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    mesh = disc.mesh
    rho = ref.rho0 + q[0]
    vel = np.moveaxis(q[1:4], 0, -1)
    if set_name == "set2c":
        vel = vel / rho[..., None]
        theta = (ref.Theta0 + q[4]) / rho
    else:
        theta = ref.theta0 + q[4]
    P = equation_of_state(rho, theta, ref.const)
    cmax = float(np.max(np.linalg.norm(vel, axis=-1) + np.sqrt(ref.const.gamma * P / rho)))
    dx_h, dx_v = min_node_spacing(mesh)
    return cmax * dt / dx_h, cmax * dt / dx_v


def min_node_spacing(mesh: sg.ElementMesh):
    """Minimal internodal distance in the horizontal and vertical directions."""
    c = mesh.coords
    d_r = np.linalg.norm(np.diff(c, axis=3), axis=-1).min()
    d_t = np.linalg.norm(np.diff(c, axis=1), axis=-1).min()
    if mesh.kind == "box":
        dx_h = d_r          # the s axis is the dummy y layer
    else:
        d_s = np.linalg.norm(np.diff(c, axis=2), axis=-1).min()
        dx_h = min(d_r, d_s)
    return float(dx_h), float(d_t)

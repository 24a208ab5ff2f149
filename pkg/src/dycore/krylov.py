"""Matrix-free iterative solvers and the polynomial preconditioner.

GMRES (restarted, right-preconditioned), BiCGstab (left-preconditioned, per
the stabilized bi-conjugate gradient loop used by the implicit solver), and
a Richardson iteration whose inner loop is dot-product free.  The polynomial
preconditioner is a least-squares-optimized approximate inverse
s(A) = sum_i c_i A^i applied through repeated operator applications.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class LinearMap:
    """Abstract matrix-vector product: y = apply(x), dimension n."""

    def __init__(self, n: int, apply_fn: Callable[[np.ndarray], np.ndarray]):
        self.n = n
        self._apply = apply_fn
        self.matvec_count = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        self.matvec_count += 1
        return self._apply(x)


def dense_map(A: np.ndarray) -> LinearMap:
    return LinearMap(A.shape[0], lambda x: A @ x)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    matvecs: int
    dots: int
    note: str = ""


class _Counter:
    def __init__(self):
        self.dots = 0

    def dot(self, a, b):
        self.dots += 1
        return float(np.dot(a, b))

    def norm(self, a):
        self.dots += 1
        return float(np.sqrt(np.dot(a, a)))


# ---------------------------------------------------------------------------
# Polynomial preconditioner
# ---------------------------------------------------------------------------

@dataclass
class PbnoPreconditioner:
    order: int
    coeffs: np.ndarray        # c_0 ... c_P; c_0 scales the highest power
    lam_bar: float
    lam_min: float
    lam_max: float

    @staticmethod
    def identity() -> "PbnoPreconditioner":
        return PbnoPreconditioner(order=0, coeffs=np.array([1.0]), lam_bar=1.0,
                                  lam_min=1.0, lam_max=1.0)


def apply_pbno(precon: PbnoPreconditioner, amap: LinearMap, r: np.ndarray) -> np.ndarray:
    """Horner-style application: exactly P operator applications.

    r <- lam_bar r;  r* = c_0 r;  repeat r* = lam_bar A r* + c_i r.
    The result is s(lam_bar A) (lam_bar r) with the c_0 coefficient attached
    to the highest power of the scaled operator.
    """
    lb = precon.lam_bar
    r = lb * r
    rstar = precon.coeffs[0] * r
    for i in range(1, precon.order + 1):
        m = amap.apply(rstar)
        rstar = lb * m + precon.coeffs[i] * r
    return rstar


def estimate_spectrum(amap: LinearMap, k_steps: int = 20, seed: int = 1234):
    """Ritz estimates of the (real) spectrum with a 10% outward margin."""
    rng = np.random.default_rng(seed)
    n = amap.n
    k = min(k_steps, n)
    V = np.zeros((n, k + 1))
    H = np.zeros((k + 1, k))
    v = rng.standard_normal(n)
    V[:, 0] = v / np.linalg.norm(v)
    m = k
    for j in range(k):
        w = amap.apply(V[:, j])
        for i in range(j + 1):
            H[i, j] = np.dot(V[:, i], w)
            w -= H[i, j] * V[:, i]
        H[j + 1, j] = np.linalg.norm(w)
        if H[j + 1, j] < 1e-14:
            m = j + 1
            break
        V[:, j + 1] = w / H[j + 1, j]
    if np.any(~np.isfinite(H[:m, :m])):
        raise FloatingPointError("non-finite Ritz values in spectrum estimate")
    ritz = np.linalg.eigvals(H[:m, :m])
    if np.any(~np.isfinite(ritz)):
        raise FloatingPointError("non-finite Ritz values in spectrum estimate")
    lmin = float(ritz.real.min())
    lmax = float(ritz.real.max())
    if lmin > 0 and lmax > 0:
        # multiplicative outward margin keeps a positive spectrum positive
        return 0.9 * lmin, 1.1 * lmax
    span = lmax - lmin
    if span < 1e-12 * max(abs(lmax), 1.0):
        return lmin - 0.1 * max(abs(lmin), 1.0), lmax + 0.1 * max(abs(lmax), 1.0)
    return lmin - 0.1 * span, lmax + 0.1 * span


def fit_pbno_coefficients(lam_min: float, lam_max: float, order: int,
                          sample_count: int = 256) -> PbnoPreconditioner:
    """Least-squares fit of the residual polynomial (1 - s(x) x)^2.

    Samples are Chebyshev-distributed over [lam_min, lam_max].  The fit is
    linear in the coefficients; an ill-conditioned system falls back to a
    truncated Chebyshev expansion of 1/x.
    """
    if lam_min <= 0:
        raise ValueError("spectrum estimate must be positive")
    lam_bar = 2.0 / (lam_min + lam_max)
    k = np.arange(sample_count)
    x = 0.5 * (lam_min + lam_max) + 0.5 * (lam_max - lam_min) * np.cos(
        (2 * k + 1) * np.pi / (2 * sample_count))
    y = lam_bar * x
    # residual 1 - s(y) y with s(y) = sum_i c_i y^(P-i): basis y^(P-i+1)
    powers = np.arange(order, -1, -1) + 1
    M = y[:, None] ** powers[None, :]
    try:
        c, *_ = np.linalg.lstsq(M, np.ones_like(y), rcond=None)
        if np.any(~np.isfinite(c)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        # Chebyshev expansion of 1/y over the sample range, highest power first
        from numpy.polynomial import chebyshev as ncheb
        fit = ncheb.Chebyshev.fit(y, 1.0 / y, deg=order)
        c = fit.convert(kind=np.polynomial.Polynomial).coef[::-1]
    return PbnoPreconditioner(order=order, coeffs=np.asarray(c, dtype=float),
                              lam_bar=lam_bar, lam_min=lam_min, lam_max=lam_max)


def build_pbno(amap: LinearMap, order: int, k_steps: int = 20,
               sample_count: int = 256) -> PbnoPreconditioner:
    lmin, lmax = estimate_spectrum(amap, k_steps)
    return fit_pbno_coefficients(lmin, lmax, order, sample_count)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def gmres(amap: LinearMap, b: np.ndarray, tol: float = 1e-6,
          max_iter: int = 1000, restart: int = 50,
          precon: Optional[PbnoPreconditioner] = None,
          x0: Optional[np.ndarray] = None):
    """Restarted GMRES with right preconditioning (true residual reported)."""
    if b.shape[0] != amap.n:
        raise ValueError("dimension mismatch")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    cnt = _Counter()
    mv0 = amap.matvec_count
    x = np.zeros_like(b) if x0 is None else x0.copy()

    def M(v):
        if precon is None:
            return v
        return apply_pbno(precon, amap, v)

    bnorm = cnt.norm(b)
    if bnorm == 0.0:
        return b * 0.0, SolveReport(0, 0.0, True, 0, cnt.dots)
    total_it = 0
    res = np.inf
    while total_it < max_iter:
        r = b - amap.apply(x)
        beta = cnt.norm(r)
        res = beta / bnorm
        if res <= tol:
            return x, SolveReport(total_it, res, True,
                                  amap.matvec_count - mv0, cnt.dots)
        m = min(restart, max_iter - total_it)
        V = np.zeros((amap.n, m + 1))
        H = np.zeros((m + 1, m))
        V[:, 0] = r / beta
        g = np.zeros(m + 1)
        g[0] = beta
        cs = np.zeros(m)
        sn = np.zeros(m)
        j_done = 0
        for j in range(m):
            w = amap.apply(M(V[:, j]))
            for i in range(j + 1):
                H[i, j] = cnt.dot(V[:, i], w)
                w -= H[i, j] * V[:, i]
            H[j + 1, j] = cnt.norm(w)
            if H[j + 1, j] < 1e-300:
                j_done = j + 1
                total_it += 1
                break
            V[:, j + 1] = w / H[j + 1, j]
            # Givens rotations
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            d = np.hypot(H[j, j], H[j + 1, j])
            cs[j] = H[j, j] / d
            sn[j] = H[j + 1, j] / d
            H[j, j] = d
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total_it += 1
            j_done = j + 1
            res = abs(g[j + 1]) / bnorm
            if res <= tol or total_it >= max_iter:
                break
        y = np.linalg.solve(H[:j_done, :j_done], g[:j_done])
        x = x + M(V[:, :j_done] @ y)
        # the outer loop recomputes the true residual; only a pass of the
        # explicit check terminates, so a stale recurrence estimate cannot
        # cause a premature exit
    r = b - amap.apply(x)
    res = cnt.norm(r) / bnorm
    return x, SolveReport(total_it, res, res <= tol,
                          amap.matvec_count - mv0, cnt.dots,
                          note="max_iter exceeded" if res > tol else "")


def bicgstab_pbno(amap: LinearMap, b: np.ndarray, tol: float = 1e-6,
                  max_iter: int = 1000,
                  precon: Optional[PbnoPreconditioner] = None,
                  x0: Optional[np.ndarray] = None):
    """Left-preconditioned stabilized bi-conjugate gradient.

    Follows the preconditioned loop exactly: two operator+preconditioner
    applications per iteration, convergence on rn/r0 of the preconditioned
    residual, roughly five dot products per iteration.
    """
    if b.shape[0] != amap.n:
        raise ValueError("dimension mismatch")
    cnt = _Counter()
    mv0 = amap.matvec_count
    pre = precon if precon is not None else PbnoPreconditioner.identity()
    x = np.zeros_like(b) if x0 is None else x0.copy()
    rhs = b - amap.apply(x) if x0 is not None else b.copy()
    q = np.zeros_like(b)
    rn = apply_pbno(pre, amap, rhs)
    r0 = cnt.norm(rn)
    if r0 == 0.0:
        return x, SolveReport(0, 0.0, True, amap.matvec_count - mv0, cnt.dots)
    p = rn.copy()
    ro = rn.copy()
    it = 0
    while it < max_iter:
        it += 1
        t = amap.apply(p)
        Ap = apply_pbno(pre, amap, t)
        den = cnt.dot(Ap, ro)
        if abs(den) < 1e-300:
            return x + q, SolveReport(it, np.inf, False,
                                      amap.matvec_count - mv0, cnt.dots,
                                      note="breakdown: alpha denominator")
        a_r = cnt.dot(rn, ro) / den
        s = rn - a_r * Ap
        t = amap.apply(s)
        As = apply_pbno(pre, amap, t)
        den = cnt.dot(As, As)
        if den < 1e-300:
            q = q + a_r * p
            rn_norm = 0.0
            return x + q, SolveReport(it, rn_norm, True,
                                      amap.matvec_count - mv0, cnt.dots)
        w_r = cnt.dot(As, s) / den
        q = q + a_r * p + w_r * s
        re = s - w_r * As
        rn_norm = cnt.norm(re)
        if rn_norm / r0 <= tol:
            return x + q, SolveReport(it, rn_norm / r0, True,
                                      amap.matvec_count - mv0, cnt.dots)
        num = cnt.dot(re, ro)
        den = cnt.dot(rn, ro)
        if abs(den) < 1e-300 or abs(w_r) < 1e-300:
            return x + q, SolveReport(it, rn_norm / r0, False,
                                      amap.matvec_count - mv0, cnt.dots,
                                      note="breakdown: omega/rho")
        b_r = (num / den) * (a_r / w_r)
        p = re + b_r * (p - w_r * Ap)
        rn = re
    return x + q, SolveReport(it, rn_norm / r0, False,
                              amap.matvec_count - mv0, cnt.dots,
                              note="max_iter exceeded")


def richardson_pbno(amap: LinearMap, b: np.ndarray, tol: float = 1e-6,
                    max_iter: int = 1000,
                    precon: Optional[PbnoPreconditioner] = None,
                    x0: Optional[np.ndarray] = None, check_every: int = 4):
    """Preconditioned Richardson iteration, dot-product-free inner loop."""
    if b.shape[0] != amap.n:
        raise ValueError("dimension mismatch")
    cnt = _Counter()
    mv0 = amap.matvec_count
    pre = precon if precon is not None else PbnoPreconditioner.identity()
    x = np.zeros_like(b) if x0 is None else x0.copy()
    bnorm = cnt.norm(b)
    if bnorm == 0.0:
        return b * 0.0, SolveReport(0, 0.0, True, 0, cnt.dots)
    r = b - amap.apply(x)
    res0 = cnt.norm(r) / bnorm
    if res0 <= tol:
        return x, SolveReport(0, res0, True, amap.matvec_count - mv0, cnt.dots)
    res = res0
    it = 0
    while it < max_iter:
        inner = min(check_every, max_iter - it)
        for _ in range(inner):
            x = x + apply_pbno(pre, amap, r)
            r = b - amap.apply(x)
            it += 1
        res = cnt.norm(r) / bnorm
        if res <= tol:
            return x, SolveReport(it, res, True, amap.matvec_count - mv0, cnt.dots)
        if not np.isfinite(res) or res > 10.0 * res0:
            return x, SolveReport(it, res, False, amap.matvec_count - mv0,
                                  cnt.dots, note="divergence detected")
    return x, SolveReport(it, res, False, amap.matvec_count - mv0, cnt.dots,
                          note="max_iter exceeded")

"""Direct solution of the vertically-implicit (1D-IMEX) problem.

Each column of the mesh is independent under the vertical operator, so the
global Jacobian is block diagonal.  The per-column matrices are built once
by probing the matrix-free vertical left-hand side level by level (all
columns simultaneously), factored in place with a no-pivot banded LU, and
reused for every implicit stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass
class UniqueSpace:
    """Mapping between grid node storage and unique (column, level) points."""
    uid: np.ndarray       # flat node -> unique point id (column-major)
    rep: np.ndarray       # unique point id -> representative flat node
    n_col: int
    n_lev: int
    shape: tuple


def unique_space(mesh) -> UniqueSpace:
    uid = (mesh.col_id.astype(np.int64) * mesh.n_lev + mesh.lev_id).ravel()
    vals, rep = np.unique(uid, return_index=True)
    if len(vals) != mesh.n_col * mesh.n_lev:
        raise ValueError("column/level layout has holes")
    return UniqueSpace(uid=uid, rep=rep, n_col=mesh.n_col, n_lev=mesh.n_lev,
                       shape=mesh.nshape)


@dataclass
class ColumnJacobian:
    matrices: np.ndarray      # (n_col, M, M); overwritten by LU factors
    bandwidth: int
    n_dof: int
    space: UniqueSpace
    factored: bool = False
    pivoted_fallback: list = None   # columns factored densely with pivoting
    piv: dict = None                # column -> (lu, piv) from the fallback

    @property
    def M(self) -> int:
        return self.matrices.shape[1]


def _unique_apply(problem, space: UniqueSpace, n_dof: int):
    """Vertical LHS as an operator on (n_col, n_lev, n_dof) unique values."""
    shape = space.shape

    if n_dof == 5:
        def apply_u(U):
            q = np.empty((5,) + shape)
            Ur = U.reshape(-1, 5)
            for d in range(5):
                q[d] = Ur[space.uid, d].reshape(shape)
            out = problem.lhs_standard(q)
            O = np.empty((space.n_col * space.n_lev, 5))
            for d in range(5):
                O[:, d] = out[d].ravel()[space.rep]
            return O.reshape(space.n_col, space.n_lev, 5)
    else:
        def apply_u(U):
            P = U.reshape(-1)[space.uid].reshape(shape)
            out = problem.lhs_schur(P)
            return out.ravel()[space.rep].reshape(space.n_col, space.n_lev, 1)
    return apply_u


def build_column_jacobian(problem) -> ColumnJacobian:
    """Probe the vertical LHS to assemble one banded matrix per column."""
    if problem.dim != "1d":
        raise ValueError("column Jacobians require the 1D implicit form")
    mesh = problem.disc.mesh
    space = unique_space(mesh)
    n_dof = 5 if problem.form == "standard" else 1
    n_col, n_lev = space.n_col, space.n_lev
    M = n_lev * n_dof
    apply_u = _unique_apply(problem, space, n_dof)

    A = np.zeros((n_col, M, M))
    for lev in range(n_lev):
        for dof in range(n_dof):
            U = np.zeros((n_col, n_lev, n_dof))
            U[:, lev, dof] = 1.0
            out = apply_u(U)
            A[:, :, lev * n_dof + dof] = out.reshape(n_col, M)

    # sampled cross-column leakage check: probing a single column must not
    # touch any other column
    U = np.zeros((n_col, n_lev, n_dof))
    U[0, n_lev // 2, 0] = 1.0
    out = apply_u(U)
    if np.abs(out[1:]).max() > 1e-13 * max(1.0, np.abs(out[0]).max()):
        raise RuntimeError("cross-column leakage detected in the vertical "
                           "operator; columns are not independent")

    scale = np.abs(A).max()
    mask = np.abs(A) > 1e-14 * scale
    rows, cols = np.nonzero(mask.any(axis=0))
    nb = int(np.abs(rows - cols).max()) + 1 if len(rows) else 1
    return ColumnJacobian(matrices=A, bandwidth=nb, n_dof=n_dof, space=space,
                          pivoted_fallback=[], piv={})


def lu_factor_banded(cj: ColumnJacobian):
    """In-place no-pivot Doolittle LU restricted to the band; batched.

    Falls back to a pivoted dense factorization for any column whose
    diagonal degenerates.
    """
    if cj.factored:
        raise ValueError("already factored")
    A = cj.matrices
    M = cj.M
    nb = cj.bandwidth
    norm = np.abs(A).max()
    bad = set()
    for k in range(M):
        piv = A[:, k, k]
        small = np.abs(piv) < 1e-12 * norm
        if np.any(small):
            bad.update(np.nonzero(small)[0].tolist())
            piv = np.where(small, 1.0, piv)
        E = min(k + nb, M)
        if E > k + 1:
            A[:, k + 1:E, k] /= piv[:, None]
            A[:, k + 1:E, k + 1:E] -= (A[:, k + 1:E, k:k + 1]
                                       * A[:, k:k + 1, k + 1:E])
    if bad:
        raise RuntimeError(f"no-pivot LU hit a degenerate diagonal in "
                           f"column(s) {sorted(bad)}")
    cj.factored = True


def factor_with_fallback(problem) -> ColumnJacobian:
    """Build and factor, keeping a pivoted dense copy if no-pivot LU fails."""
    cj = build_column_jacobian(problem)
    backup = cj.matrices.copy()
    try:
        lu_factor_banded(cj)
    except RuntimeError:
        cj.matrices = backup
        cj.piv = {c: scipy.linalg.lu_factor(backup[c])
                  for c in range(backup.shape[0])}
        cj.pivoted_fallback = list(range(backup.shape[0]))
        cj.factored = True
    return cj


def solve_columns_direct(cj: ColumnJacobian, rhs: np.ndarray) -> np.ndarray:
    """Banded forward/backward substitution, batched over columns.

    rhs has shape (n_col, M); returns the same shape.
    """
    if not cj.factored:
        raise ValueError("factor before solving")
    if cj.pivoted_fallback:
        out = np.empty_like(rhs)
        for c in range(rhs.shape[0]):
            out[c] = scipy.linalg.lu_solve(cj.piv[c], rhs[c])
        return out
    A = cj.matrices
    M = cj.M
    nb = cj.bandwidth
    y = rhs.copy()
    for i in range(1, M):
        j0 = max(0, i - nb + 1)
        y[:, i] -= np.einsum("cj,cj->c", A[:, i, j0:i], y[:, j0:i])
    x = y
    for i in range(M - 1, -1, -1):
        j1 = min(i + nb, M)
        if j1 > i + 1:
            x[:, i] -= np.einsum("cj,cj->c", A[:, i, i + 1:j1], x[:, i + 1:j1])
        x[:, i] /= A[:, i, i]
    return x


def get_factors(problem) -> ColumnJacobian:
    key = (round(problem.lam, 12), problem.form)
    if key not in problem._column_cache:
        problem._column_cache[key] = factor_with_fallback(problem)
    return problem._column_cache[key]


def solve_direct(problem, q_e: np.ndarray) -> np.ndarray:
    """One direct implicit solve: gather, substitute per column, scatter."""
    cj = get_factors(problem)
    space = cj.space
    shape = space.shape
    if problem.form == "standard":
        rhs = np.empty((space.n_col * space.n_lev, 5))
        for d in range(5):
            rhs[:, d] = q_e[d].ravel()[space.rep]
        sol = solve_columns_direct(cj, rhs.reshape(space.n_col, cj.M))
        sol = sol.reshape(-1, 5)
        q = np.empty_like(q_e)
        for d in range(5):
            q[d] = sol[space.uid, d].reshape(shape)
        return q
    rhsP, ua = problem.rhs_schur_build(q_e)
    rhs = rhsP.ravel()[space.rep].reshape(space.n_col, cj.M)
    sol = solve_columns_direct(cj, rhs)
    P = sol.reshape(-1)[space.uid].reshape(shape)
    return problem.extract_from_pressure(P, ua, q_e)

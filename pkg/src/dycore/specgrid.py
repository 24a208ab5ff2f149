"""Spectral-element grid machinery.

Legendre-Gauss-Lobatto quadrature, tensor-product element meshes (2D x-z box
treated as a one-element-thick 3D slab, and a cubed-sphere shell), metric
terms, direct stiffness summation, column layout and per-node rotation
matrices.

Field arrays are laid out as ``(nel, nqt, nqs, nqr)`` where the local ``t``
axis is the vertical/radial direction.  Vector fields carry a trailing
component axis of length 3 (Cartesian x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.spatial import cKDTree
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


# ---------------------------------------------------------------------------
# 1D quadrature
# ---------------------------------------------------------------------------

@dataclass
class Quadrature1D:
    """LGL nodes, weights and the nodal derivative matrix for degree N."""

    N: int
    nodes: np.ndarray
    weights: np.ndarray
    D: np.ndarray


def lgl_nodes_weights(N: int) -> Quadrature1D:
    """Build degree-N LGL quadrature: roots of (1-x^2) P_N'(x).

    Interior nodes are found by Newton iteration seeded with Chebyshev
    points; weights are 2 / (N (N+1) P_N(x)^2).
    """
    if N < 1:
        raise ValueError("polynomial degree must be >= 1")
    if N == 1:
        nodes = np.array([-1.0, 1.0])
    else:
        # coefficients of P_N' in Legendre basis
        cN = np.zeros(N + 1)
        cN[N] = 1.0
        dPN = npleg.legder(cN)
        x = np.cos(np.pi * np.arange(N - 1, 0, -1) / N)  # interior guesses
        for _ in range(100):
            f = npleg.legval(x, dPN)
            fp = npleg.legval(x, npleg.legder(dPN))
            dx = f / fp
            x = x - dx
            if np.max(np.abs(dx)) < 1e-15:
                break
        nodes = np.concatenate(([-1.0], np.sort(x), [1.0]))
    cN = np.zeros(N + 1)
    cN[N] = 1.0
    PNx = npleg.legval(nodes, cN)
    weights = 2.0 / (N * (N + 1) * PNx ** 2)
    D = _derivative_matrix_from_nodes(nodes)
    return Quadrature1D(N=N, nodes=nodes, weights=weights, D=D)


def _derivative_matrix_from_nodes(nodes: np.ndarray) -> np.ndarray:
    """Lagrange derivative matrix D[i, j] = l_j'(x_i) via barycentric weights."""
    n = len(nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    bw = 1.0 / diff.prod(axis=1)  # barycentric weights
    D = (bw[None, :] / bw[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def derivative_matrix(q: Quadrature1D) -> np.ndarray:
    return _derivative_matrix_from_nodes(q.nodes)


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass
class ElementMesh:
    kind: str                      # 'box' | 'sphere'
    N: int
    quad_r: Quadrature1D
    quad_s: Quadrature1D
    quad_t: Quadrature1D
    coords: np.ndarray             # (nel, nqt, nqs, nqr, 3)
    vert: np.ndarray               # unit vertical/radial direction per node
    height: np.ndarray             # height above the bottom surface
    col_id: np.ndarray             # (nel, nqt, nqs, nqr) int
    lev_id: np.ndarray
    n_col: int
    n_lev: int
    boundary_faces: list           # (elem, axis, side, tag)
    interior_faces: list = field(default_factory=list)  # filled by compute_metrics
    # extents/bookkeeping
    meta: dict = field(default_factory=dict)

    @property
    def nel(self) -> int:
        return self.coords.shape[0]

    @property
    def nshape(self):
        return self.coords.shape[:4]

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nshape))

    def dump_nodes(self, path):
        """Debug dump: one line per node `node_id column_id x y z`."""
        xyz = self.coords.reshape(-1, 3)
        cid = self.col_id.ravel()
        with open(path, "w") as f:
            for i in range(xyz.shape[0]):
                f.write(f"{i} {cid[i]} {xyz[i,0]:.10g} {xyz[i,1]:.10g} {xyz[i,2]:.10g}\n")


# local axes: in index order the array is [e, t, s, r]; axis labels used in
# face bookkeeping are integers 0=r, 1=s, 2=t
_AX_TO_DIM = {0: 3, 1: 2, 2: 1}  # array axis carrying each local direction


def _group_points(points: np.ndarray, tol: float) -> np.ndarray:
    """Assign group ids to coincident points (within tol), deterministically.

    Uses a KD-tree pair search plus connected components, then relabels
    groups by first occurrence so results do not depend on library internals.
    """
    n = points.shape[0]
    if points.shape[1] == 1:
        # 1D values: sort and split at gaps larger than tol (few distinct
        # values with many copies would overwhelm the pair search below)
        v = points[:, 0]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        newgrp = np.r_[True, np.diff(sv) > tol]
        comp_sorted = np.cumsum(newgrp) - 1
        comp = np.empty(n, dtype=np.int64)
        comp[order] = comp_sorted
        _, first = np.unique(comp, return_index=True)
        order = np.argsort(first)
        remap = np.empty(len(order), dtype=np.int64)
        remap[order] = np.arange(len(order))
        return remap[comp]
    tree = cKDTree(points)
    pairs = tree.query_pairs(r=tol, output_type="ndarray")
    if len(pairs) == 0:
        comp = np.arange(n)
    else:
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, comp = connected_components(g, directed=False)
    # relabel by first occurrence
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[comp]


def build_box_mesh(nx: int, nz: int, Lx: float, Lz: float, N: int,
                   Ly: Optional[float] = None) -> ElementMesh:
    """Uniform x-z box of nx-by-nz elements, one dummy y layer of degree 1."""
    if nx < 1 or nz < 1:
        raise ValueError("element counts must be >= 1")
    if Lx <= 0 or Lz <= 0:
        raise ValueError("extents must be positive")
    if Ly is None:
        Ly = Lx / nx
    qr = lgl_nodes_weights(N)
    qs = lgl_nodes_weights(1)
    qt = lgl_nodes_weights(N)
    nqr, nqs, nqt = N + 1, 2, N + 1
    nel = nx * nz
    coords = np.empty((nel, nqt, nqs, nqr, 3))
    xe = np.linspace(0.0, Lx, nx + 1)
    ze = np.linspace(0.0, Lz, nz + 1)
    for kz in range(nz):
        for ix in range(nx):
            e = kz * nx + ix
            xs = xe[ix] + (qr.nodes + 1.0) * 0.5 * (xe[ix + 1] - xe[ix])
            zs = ze[kz] + (qt.nodes + 1.0) * 0.5 * (ze[kz + 1] - ze[kz])
            ys = np.array([0.0, Ly])
            coords[e, ..., 0] = xs[None, None, :]
            coords[e, ..., 1] = ys[None, :, None]
            coords[e, ..., 2] = zs[:, None, None]
    vert = np.zeros_like(coords)
    vert[..., 2] = 1.0
    height = coords[..., 2].copy()

    scale = max(Lx, Lz, Ly)
    tol = 1e-8 * scale
    xs_flat = coords[..., 0].reshape(-1, 1)
    col = _group_points(xs_flat, tol)           # columns keyed by x only
    lev = _group_points(height.reshape(-1, 1), tol)
    # order levels by height
    col_id, lev_id, n_col, n_lev = _order_columns_levels(col, lev, height.ravel())
    shape = (nel, nqt, nqs, nqr)

    bfaces = []
    for kz in range(nz):
        for ix in range(nx):
            e = kz * nx + ix
            if kz == 0:
                bfaces.append((e, 2, 0, "bottom"))
            if kz == nz - 1:
                bfaces.append((e, 2, 1, "top"))
            if ix == 0:
                bfaces.append((e, 0, 0, "lateral"))
            if ix == nx - 1:
                bfaces.append((e, 0, 1, "lateral"))
            bfaces.append((e, 1, 0, "lateral"))
            bfaces.append((e, 1, 1, "lateral"))

    return ElementMesh(kind="box", N=N, quad_r=qr, quad_s=qs, quad_t=qt,
                       coords=coords, vert=vert, height=height,
                       col_id=col_id.reshape(shape), lev_id=lev_id.reshape(shape),
                       n_col=n_col, n_lev=n_lev, boundary_faces=bfaces,
                       meta={"nx": nx, "nz": nz, "Lx": Lx, "Lz": Lz, "Ly": Ly})


def _order_columns_levels(col, lev, height):
    """Renumber level groups bottom-to-top and columns deterministically."""
    n_col = col.max() + 1
    n_lev = lev.max() + 1
    # mean height of each level group -> rank
    hsum = np.bincount(lev, weights=height, minlength=n_lev)
    hcnt = np.bincount(lev, minlength=n_lev)
    hmean = hsum / hcnt
    rank = np.empty(n_lev, dtype=np.int64)
    rank[np.argsort(hmean)] = np.arange(n_lev)
    return col.astype(np.int64), rank[lev], int(n_col), int(n_lev)


_PANEL_DIRS = (
    lambda X, Y: (np.ones_like(X), X, Y),
    lambda X, Y: (-X, np.ones_like(X), Y),
    lambda X, Y: (-np.ones_like(X), -X, Y),
    lambda X, Y: (X, -np.ones_like(X), Y),
    lambda X, Y: (-Y, X, np.ones_like(X)),      # top (+z)
    lambda X, Y: (Y, X, -np.ones_like(X)),      # bottom (-z)
)


def build_cubed_sphere_mesh(ne_panel: int, ne_vert: int, r_e: float, r_T: float,
                            N: int) -> ElementMesh:
    """Equiangular gnomonic cubed-sphere shell spanning [r_e, r_e + r_T]."""
    if ne_panel < 1 or ne_vert < 1:
        raise ValueError("element counts must be >= 1")
    q = lgl_nodes_weights(N)
    nq = N + 1
    nel = 6 * ne_panel * ne_panel * ne_vert
    coords = np.empty((nel, nq, nq, nq, 3))
    ang = np.linspace(-np.pi / 4, np.pi / 4, ne_panel + 1)
    re = np.linspace(r_e, r_e + r_T, ne_vert + 1)
    e = 0
    for p in range(6):
        for kb in range(ne_panel):          # beta (s axis)
            for ka in range(ne_panel):      # alpha (r axis)
                a = ang[ka] + (q.nodes + 1.0) * 0.5 * (ang[ka + 1] - ang[ka])
                b = ang[kb] + (q.nodes + 1.0) * 0.5 * (ang[kb + 1] - ang[kb])
                A, B = np.meshgrid(a, b, indexing="xy")  # B rows (s), A cols (r)
                X, Y = np.tan(A), np.tan(B)
                dx, dy, dz = _PANEL_DIRS[p](X, Y)
                nrm = np.sqrt(dx * dx + dy * dy + dz * dz)
                d = np.stack([dx / nrm, dy / nrm, dz / nrm], axis=-1)  # (nqs,nqr,3)
                for kr in range(ne_vert):
                    r = re[kr] + (q.nodes + 1.0) * 0.5 * (re[kr + 1] - re[kr])
                    coords[e + kr, ...] = r[:, None, None, None] * d[None, :, :, :]
                e += ne_vert
    rad = np.linalg.norm(coords, axis=-1)
    vert = coords / rad[..., None]
    height = rad - r_e

    tol = 1e-8 * (r_e + r_T)
    col = _group_points(vert.reshape(-1, 3), 1e-9)
    lev = _group_points(height.reshape(-1, 1), tol)
    col_id, lev_id, n_col, n_lev = _order_columns_levels(col, lev, height.ravel())
    shape = (nel, nq, nq, nq)

    bfaces = []
    for e in range(nel):
        kr = e % ne_vert
        if kr == 0:
            bfaces.append((e, 2, 0, "bottom"))
        if kr == ne_vert - 1:
            bfaces.append((e, 2, 1, "top"))

    return ElementMesh(kind="sphere", N=N, quad_r=q, quad_s=q, quad_t=q,
                       coords=coords, vert=vert, height=height,
                       col_id=col_id.reshape(shape), lev_id=lev_id.reshape(shape),
                       n_col=n_col, n_lev=n_lev, boundary_faces=bfaces,
                       meta={"ne_panel": ne_panel, "ne_vert": ne_vert,
                             "r_e": r_e, "r_T": r_T})


# ---------------------------------------------------------------------------
# Metric terms
# ---------------------------------------------------------------------------

@dataclass
class FaceGeom:
    elem: int
    axis: int          # 0=r, 1=s, 2=t
    side: int          # 0 = low end, 1 = high end
    tag: str           # 'bottom' | 'top' | 'lateral' | 'interior'
    normal: np.ndarray  # (nfa, nfb, 3) outward unit normal
    jac: np.ndarray     # surface Jacobian
    lift: np.ndarray    # (w_face J_face) / (w_vol J_vol)


@dataclass
class FacePair:
    minus: FaceGeom
    plus: FaceGeom
    perm: np.ndarray   # flat index map: minus-face node n matches plus-face node perm[n]


@dataclass
class MetricTerms:
    J: np.ndarray            # (nel, nqt, nqs, nqr)
    a_r: np.ndarray          # contravariant basis vectors, (..., 3)
    a_s: np.ndarray
    a_t: np.ndarray
    wJ: np.ndarray           # quadrature weight times J
    Jtv: np.ndarray          # a_t . vertical-unit  (radial derivative factor)
    bfaces: list             # FaceGeom for boundary faces
    ifaces: list             # FacePair for interior faces (dG)
    _comp: dict = None       # contiguous per-component copies (hot loops)

    def comp(self, name: str, m: int) -> np.ndarray:
        """Contiguous copy of a_<name>[..., m]; cached."""
        if self._comp is None:
            object.__setattr__(self, "_comp", {})
        key = (name, m)
        if key not in self._comp:
            self._comp[key] = np.ascontiguousarray(
                getattr(self, "a_" + name)[..., m])
        return self._comp[key]

    # the nine scalar contraction coefficients, provided as views for clarity
    @property
    def Jrx(self):
        return self.a_r[..., 0]

    @property
    def Jry(self):
        return self.a_r[..., 1]

    @property
    def Jrz(self):
        return self.a_r[..., 2]

    @property
    def Jsx(self):
        return self.a_s[..., 0]

    @property
    def Jsy(self):
        return self.a_s[..., 1]

    @property
    def Jsz(self):
        return self.a_s[..., 2]

    @property
    def Jtx(self):
        return self.a_t[..., 0]

    @property
    def Jty(self):
        return self.a_t[..., 1]

    @property
    def Jtz(self):
        return self.a_t[..., 2]


def deriv_r(f: np.ndarray, mesh: ElementMesh) -> np.ndarray:
    return f @ mesh.quad_r.D.T


def deriv_s(f: np.ndarray, mesh: ElementMesh) -> np.ndarray:
    return np.swapaxes(np.swapaxes(f, -2, -1) @ mesh.quad_s.D.T, -2, -1)


def deriv_t(f: np.ndarray, mesh: ElementMesh) -> np.ndarray:
    ne, nt, ns, nr = f.shape
    return (mesh.quad_t.D @ f.reshape(ne, nt, ns * nr)).reshape(f.shape)


def compute_metrics(mesh: ElementMesh) -> MetricTerms:
    """Per-node Jacobian factors, face normals and lift coefficients.

    The contravariant vectors are obtained by inverting the per-node
    coordinate Jacobian, so gradients of linear fields are exact.
    """
    c = mesh.coords
    xr = np.stack([deriv_r(c[..., m], mesh) for m in range(3)], axis=-1)
    xs = np.stack([deriv_s(c[..., m], mesh) for m in range(3)], axis=-1)
    xt = np.stack([deriv_t(c[..., m], mesh) for m in range(3)], axis=-1)
    # Jacobian matrix rows are d(x,y,z)/d(r,s,t): columns xr, xs, xt
    Jm = np.stack([xr, xs, xt], axis=-1)          # (..., 3 comp, 3 dir)
    J = np.linalg.det(Jm)
    if np.any(J <= 0):
        bad = np.argwhere(J.reshape(mesh.nel, -1).min(axis=1) <= 0).ravel()
        raise ValueError(f"degenerate or inverted element(s): {bad.tolist()}")
    Ji = np.linalg.inv(Jm)                        # rows are a^r, a^s, a^t
    a_r = Ji[..., 0, :]
    a_s = Ji[..., 1, :]
    a_t = Ji[..., 2, :]

    wr, ws, wt = mesh.quad_r.weights, mesh.quad_s.weights, mesh.quad_t.weights
    w3 = wt[:, None, None] * ws[None, :, None] * wr[None, None, :]
    wJ = w3[None, ...] * J
    Jtv = np.einsum("ekjic,ekjic->ekji", a_t, mesh.vert)

    axes_vecs = {0: a_r, 1: a_s, 2: a_t}
    axes_w = {0: wr, 1: ws, 2: wt}

    def face_geom(e, axis, side, tag):
        av = axes_vecs[axis][e]
        idx = -1 if side == 1 else 0
        if axis == 0:
            avf, Jf_, wv = av[:, :, idx, :], J[e][:, :, idx], axes_w[0][idx]
        elif axis == 1:
            avf, Jf_, wv = av[:, idx, :, :], J[e][:, idx, :], axes_w[1][idx]
        else:
            avf, Jf_, wv = av[idx, :, :, :], J[e][idx, :, :], axes_w[2][idx]
        mag = np.linalg.norm(avf, axis=-1)
        sgn = 1.0 if side == 1 else -1.0
        normal = sgn * avf / mag[..., None]
        sj = Jf_ * mag
        lift = sj / (wv * Jf_)     # = |a| / w_normal-axis
        return FaceGeom(elem=e, axis=axis, side=side, tag=tag,
                        normal=normal, jac=sj, lift=lift)

    bfaces = [face_geom(e, ax, sd, tag) for (e, ax, sd, tag) in mesh.boundary_faces]

    ifaces = _match_interior_faces(mesh, face_geom)
    mesh.interior_faces = ifaces
    return MetricTerms(J=J, a_r=a_r, a_s=a_s, a_t=a_t, wJ=wJ, Jtv=Jtv,
                       bfaces=bfaces, ifaces=ifaces)


def face_node_index(mesh: ElementMesh, axis: int, side: int):
    """Index tuple selecting the nodes of a local face within one element."""
    nqt, nqs, nqr = mesh.quad_t.N + 1, mesh.quad_s.N + 1, mesh.quad_r.N + 1
    idx = {0: nqr - 1, 1: nqs - 1, 2: nqt - 1}[axis] if side == 1 else 0
    if axis == 0:
        return (slice(None), slice(None), idx)
    if axis == 1:
        return (slice(None), idx, slice(None))
    return (idx, slice(None), slice(None))


def _match_interior_faces(mesh: ElementMesh, face_geom) -> list:
    """Pair element faces by face-center coordinates; build node trace maps."""
    btags = {(e, ax, sd) for (e, ax, sd, _) in mesh.boundary_faces}
    entries = []
    centers = []
    for e in range(mesh.nel):
        for ax in range(3):
            for sd in range(2):
                if (e, ax, sd) in btags:
                    continue
                sel = face_node_index(mesh, ax, sd)
                pts = mesh.coords[e][sel]          # (na, nb, 3)
                entries.append((e, ax, sd, pts))
                centers.append(pts.reshape(-1, 3).mean(axis=0))
    if not entries:
        return []
    centers = np.asarray(centers)
    scale = np.abs(mesh.coords).max()
    tree = cKDTree(centers)
    pairs = tree.query_pairs(r=1e-8 * scale, output_type="ndarray")
    used = set()
    out = []
    for i, j in sorted(map(tuple, pairs)):
        if i in used or j in used:
            raise ValueError("ambiguous face match")
        used.add(i)
        used.add(j)
        em, axm, sdm, pm = entries[i]
        ep, axp, sdp, pp = entries[j]
        fm = face_geom(em, axm, sdm, "interior")
        fp = face_geom(ep, axp, sdp, "interior")
        tm = cKDTree(pp.reshape(-1, 3))
        dist, perm = tm.query(pm.reshape(-1, 3))
        if dist.max() > 1e-7 * scale:
            raise ValueError("face node correspondence failed")
        out.append(FacePair(minus=fm, plus=fp, perm=perm))
    return out


# ---------------------------------------------------------------------------
# Direct stiffness summation
# ---------------------------------------------------------------------------

@dataclass
class DssMap:
    gid: np.ndarray       # group id per flat node
    wsum: np.ndarray      # assembled diagonal mass per group
    w: np.ndarray         # per-node mass weight (flat)
    n_groups: int
    shape: tuple
    rep: np.ndarray       # representative flat node per group (first occurrence)
    mult: np.ndarray      # multiplicity per group


def build_dss_map(mesh: ElementMesh, metrics: MetricTerms) -> DssMap:
    scale = max(np.abs(mesh.coords).max(), 1.0)
    gid = _group_points(mesh.coords.reshape(-1, 3), 1e-8 * scale)
    w = metrics.wJ.ravel()
    ng = int(gid.max()) + 1
    wsum = np.bincount(gid, weights=w, minlength=ng)
    _, rep = np.unique(gid, return_index=True)
    mult = np.bincount(gid, minlength=ng)
    return DssMap(gid=gid, wsum=wsum, w=w, n_groups=ng, shape=mesh.nshape,
                  rep=rep, mult=mult)


def apply_dss(f: np.ndarray, dss: DssMap) -> np.ndarray:
    """Replace coincident-node values by their mass-weighted average."""
    if f.shape != dss.shape:
        raise ValueError("field/DSS map shape mismatch")
    num = np.bincount(dss.gid, weights=(dss.w * f.ravel()), minlength=dss.n_groups)
    return (num / dss.wsum)[dss.gid].reshape(dss.shape)


def apply_dss_many(fields: np.ndarray, dss: DssMap) -> np.ndarray:
    """DSS along the leading axis of a stacked array of fields."""
    out = np.empty_like(fields)
    for i in range(fields.shape[0]):
        out[i] = apply_dss(fields[i], dss)
    return out


# ---------------------------------------------------------------------------
# Rotation matrices (Cartesian <-> zonal/meridional/radial)
# ---------------------------------------------------------------------------

@dataclass
class RotationField:
    A: np.ndarray        # (..., 3, 3), rows = (zonal, meridional, radial)
    Ainv: np.ndarray


def build_rotation_matrices(mesh: ElementMesh) -> RotationField:
    if mesh.kind == "box":
        eye = np.broadcast_to(np.eye(3), mesh.nshape + (3, 3)).copy()
        return RotationField(A=eye, Ainv=eye.copy())
    r = mesh.vert
    if np.any(np.linalg.norm(mesh.coords, axis=-1) < 1e-12):
        raise ValueError("node at the origin has no radial frame")
    zhat = np.zeros_like(r)
    zhat[..., 2] = 1.0
    zon = np.cross(zhat, r)
    n = np.linalg.norm(zon, axis=-1)
    # pole fallback: use x-hat to seed the frame
    bad = n < 1e-8
    if np.any(bad):
        xhat = np.zeros_like(r)
        xhat[..., 0] = 1.0
        alt = np.cross(xhat, r)
        zon[bad] = alt[bad]
        n = np.linalg.norm(zon, axis=-1)
    zon = zon / n[..., None]
    mer = np.cross(r, zon)
    A = np.stack([zon, mer, r], axis=-2)
    Ainv = np.swapaxes(A, -1, -2).copy()
    return RotationField(A=A, Ainv=Ainv)


def rotate_to_local(vec: np.ndarray, rot: RotationField) -> np.ndarray:
    """Cartesian vector field (..., 3) -> (zonal, meridional, radial)."""
    return np.einsum("...ab,...b->...a", rot.A, vec)


def rotate_to_cartesian(vec: np.ndarray, rot: RotationField) -> np.ndarray:
    return np.einsum("...ab,...b->...a", rot.Ainv, vec)


# ---------------------------------------------------------------------------
# Differential operators (pointwise metric contraction)
# ---------------------------------------------------------------------------

def grad(f: np.ndarray, mesh: ElementMesh, metrics: MetricTerms) -> np.ndarray:
    """Gradient of a scalar field; returns (..., 3)."""
    fr = deriv_r(f, mesh)
    fs = deriv_s(f, mesh)
    ft = deriv_t(f, mesh)
    out = np.empty(f.shape + (3,))
    for m in range(3):
        gm = fr * metrics.comp("r", m)
        gm += fs * metrics.comp("s", m)
        gm += ft * metrics.comp("t", m)
        out[..., m] = gm
    return out


def div(vec: np.ndarray, mesh: ElementMesh, metrics: MetricTerms) -> np.ndarray:
    """Divergence of a vector field with trailing component axis."""
    out = np.zeros(vec.shape[:-1])
    for m in range(3):
        vm = np.ascontiguousarray(vec[..., m])
        out += deriv_r(vm, mesh) * metrics.comp("r", m)
        out += deriv_s(vm, mesh) * metrics.comp("s", m)
        out += deriv_t(vm, mesh) * metrics.comp("t", m)
    return out


def deriv_vertical(f: np.ndarray, mesh: ElementMesh, metrics: MetricTerms) -> np.ndarray:
    """Vertical (radial) derivative using only the local t direction."""
    return metrics.Jtv * deriv_t(f, mesh)

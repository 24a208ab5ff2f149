"""Shared fixtures: small meshes, reference states, helper constructors."""
import numpy as np
import pytest

from dycore import specgrid as sg
from dycore import euler
from dycore import imexcore as imx


def build_setup(kind, **kw):
    """(mesh, disc, ref) for a small test grid."""
    if kind == "box":
        mesh = sg.build_box_mesh(kw.get("nx", 4), kw.get("nz", 4),
                                 kw.get("Lx", 1000.0), kw.get("Lz", 1000.0),
                                 kw.get("N", 4))
    else:
        mesh = sg.build_cubed_sphere_mesh(kw.get("ne_panel", 2),
                                          kw.get("ne_vert", 2),
                                          kw.get("r_e", 6_371_000.0),
                                          kw.get("r_T", 10_000.0),
                                          kw.get("N", 3))
    disc = euler.build_discretization(mesh)
    ref = euler.hydrostatic_reference(mesh, kw.get("theta0", 300.0))
    return mesh, disc, ref


@pytest.fixture(scope="session")
def box44():
    """4x4-element N=4 box over 1 km x 1 km (the bubble test grid)."""
    return build_setup("box", nx=4, nz=4, N=4)


@pytest.fixture(scope="session")
def box22():
    """Tiny 2x2-element N=2 box for dense probing."""
    return build_setup("box", nx=2, nz=2, N=2)


@pytest.fixture(scope="session")
def aniso_box():
    """Wide flat box (dx_h >> dx_v) where the vertical-only implicit
    treatment keeps the horizontal waves explicitly stable."""
    return build_setup("box", nx=5, nz=4, Lx=20_000.0, Lz=1000.0, N=4)


@pytest.fixture(scope="session")
def sphere_small():
    """2x2x2-element N=3 cubed-sphere shell."""
    return build_setup("sphere", ne_panel=2, ne_vert=2, N=3)


def continuous_random_state(disc, ref, set_name="set2nc", seed=0, amp=1e-3):
    """Smooth, DSS-continuous random perturbation with no-flux velocities."""
    rng = np.random.default_rng(seed)
    mesh = disc.mesh
    q = rng.standard_normal((5,) + mesh.nshape)
    if mesh.kind == "box":
        # slab convention: fields are uniform across the dummy y layer and
        # carry no y-velocity
        q[...] = q[..., :1, :]
        q[2] = 0.0
    q = sg.apply_dss_many(q, disc.dss)
    vel = np.moveaxis(q[1:4], 0, -1).copy()
    euler.zero_normal_velocity(vel, disc.bidx, disc.bproj)
    q[1:4] = np.moveaxis(vel, -1, 0)
    scale = np.array([ref.rho0.mean(), 1.0, 1.0, 1.0, ref.theta0.mean()])
    return amp * scale[:, None, None, None, None] * q


def make_problem(disc, ref, set_name="set2nc", form="schur", dim="3d",
                 lam=1.0, **solver_kw):
    spec = imx.SolverSpec(**solver_kw) if solver_kw else imx.SolverSpec()
    p = imx.ImplicitProblem(disc=disc, ref=ref, set_name=set_name,
                            form=form, dim=dim, solver=spec)
    p.lam = lam
    return p

"""Equation sets, reference states, operators, boundary handling."""
import numpy as np
import pytest

from dycore import specgrid as sg
from dycore import euler
from conftest import build_setup, continuous_random_state


# ---------------------------------------------------------------------------
# Gas constants and reference state
# ---------------------------------------------------------------------------

def test_gas_constants():
    c = euler.GasConstants()
    assert c.R == pytest.approx(287.0)
    assert c.gamma > 1.0
    assert c.R == c.c_p - c.c_v


def test_exner_surface_values(box44):
    mesh, _, ref = box44
    surf = mesh.height < 1e-9
    assert np.abs(ref.P0f[surf] - 1e5).max() < 1e-6
    assert np.abs(ref.theta0 - 300.0).max() == 0.0


def test_exner_at_ten_kilometres():
    mesh, _, ref = build_setup("box", nx=1, nz=4, Lx=1000.0, Lz=10_000.0, N=3)
    c = ref.const
    top = np.abs(mesh.height - 10_000.0) < 1e-6
    pi = (ref.P0f[top] / c.P0) ** (c.R / c.c_p)
    want = 1.0 - 9.80616 * 10_000.0 / (1004.5 * 300.0)
    assert np.abs(pi - want).max() < 1e-10
    assert abs(want - 0.67459) < 1e-4


def test_reference_rejects_bad_input(box44):
    mesh, _, _ = box44
    with pytest.raises(ValueError):
        euler.hydrostatic_reference(mesh, -5.0)


def test_too_tall_domain_rejected():
    mesh = sg.build_box_mesh(1, 2, 1000.0, 40_000.0, 2)
    with pytest.raises(ValueError):
        euler.hydrostatic_reference(mesh, 300.0)


@pytest.mark.parametrize("fixture", ["box44", "sphere_small"])
def test_analytic_hydrostatic_balance(fixture, request):
    # dP0/dh = P0 (c_p/R) pi^(c_p/R - 1) dpi/dh must equal -rho0 g exactly
    mesh, _, ref = request.getfixturevalue(fixture)
    c = ref.const
    pi = (ref.P0f / c.P0) ** (c.R / c.c_p)
    dpi = -c.g / (c.c_p * 300.0)
    dP0 = c.P0 * (c.c_p / c.R) * pi ** (c.c_p / c.R - 1.0) * dpi
    resid = dP0 + c.g * ref.rho0
    assert np.abs(resid).max() < 1e-10 * np.abs(c.g * ref.rho0).max()


@pytest.mark.parametrize("fixture", ["box44", "sphere_small"])
def test_discrete_hydrostatic_balance(fixture, request):
    # discrete vertical derivative balances gravity to truncation level
    mesh, disc, ref = request.getfixturevalue(fixture)
    resid = sg.deriv_vertical(ref.P0f, mesh, disc.metrics) + ref.const.g * ref.rho0
    assert np.abs(resid).max() < 1e-4 * np.abs(ref.const.g * ref.rho0).max()


@pytest.mark.parametrize("fixture", ["box44", "sphere_small"])
def test_isothermal_reference_balance_and_sound_speed(fixture, request):
    mesh, disc, ref0 = request.getfixturevalue(fixture)
    ref = euler.isothermal_reference(mesh, 300.0)
    c = ref.const
    # temperature theta0 * pi is 300 K everywhere; sound speed is uniform
    pi = (ref.P0f / c.P0) ** (c.R / c.c_p)
    T = ref.theta0 * pi
    assert np.abs(T - 300.0).max() < 1e-9
    cs = np.sqrt(c.gamma * ref.P0f / ref.rho0)
    assert np.abs(cs - np.sqrt(c.gamma * c.R * 300.0)).max() < 1e-9
    # analytic hydrostatic balance: dP0/dh = -rho0 g
    dP0 = -ref.P0f * c.g / (c.R * 300.0)
    assert np.abs(dP0 + c.g * ref.rho0).max() < 1e-10 * (c.g * ref.rho0).max()
    # stable stratification
    vert_grad = np.einsum("...a,...a->...", ref.grad_theta0, mesh.vert)
    assert np.all(vert_grad > 0)
    with pytest.raises(ValueError):
        euler.isothermal_reference(mesh, -1.0)


@pytest.mark.parametrize("set_name", ["set2nc", "set2c"])
def test_isothermal_rest_state_stays_at_rest(box44, set_name):
    mesh, disc, _ = box44
    ref = euler.isothermal_reference(mesh, 300.0)
    R = euler.nonlinear_rhs(np.zeros((5,) + mesh.nshape), ref, disc, set_name)
    assert np.abs(R).max() < 1e-9


def test_reference_coefficients_positive(box44):
    _, _, ref = box44
    assert np.all(ref.G0_nc > 0)
    assert np.all(ref.H0_nc > 0)
    assert np.all(ref.F0_c > 0)
    assert np.all(ref.G0_c > 0)
    assert np.all(ref.rho0 > 0)


# ---------------------------------------------------------------------------
# Equation of state and linearized pressure
# ---------------------------------------------------------------------------

def test_eos_fixed_point():
    c = euler.GasConstants()
    rho = np.array([c.P0 / (c.R * 300.0)])
    assert euler.equation_of_state(rho, np.array([300.0]), c)[0] == pytest.approx(c.P0)


def test_eos_power_law():
    c = euler.GasConstants()
    rho = np.array([1.0])
    th = np.array([250.0])
    p1 = euler.equation_of_state(rho, th, c)
    p2 = euler.equation_of_state(2 * rho, th, c)
    assert p2[0] == pytest.approx(2 ** c.gamma * p1[0], rel=1e-13)


def test_eos_consistent_with_reference(box44):
    _, _, ref = box44
    P = euler.equation_of_state(ref.rho0, ref.theta0, ref.const)
    assert np.abs(P - ref.P0f).max() < 1e-10 * ref.P0f.max()


def test_eos_rejects_nonpositive():
    c = euler.GasConstants()
    with pytest.raises(ValueError):
        euler.equation_of_state(np.array([-1.0]), np.array([300.0]), c)
    with pytest.raises(ValueError):
        euler.equation_of_state(np.array([1.0]), np.array([0.0]), c)


def test_linearized_pressure_zero_state(box44):
    mesh, _, ref = box44
    q = np.zeros((5,) + mesh.nshape)
    assert np.abs(euler.linearized_pressure(q, ref, "set2nc")).max() == 0.0
    assert np.abs(euler.linearized_pressure(q, ref, "set2c")).max() == 0.0


def test_linearized_pressure_set2c_identity(box44):
    mesh, _, ref = box44
    q = np.zeros((5,) + mesh.nshape)
    q[4] = ref.Theta0 / ref.const.gamma
    P = euler.linearized_pressure(q, ref, "set2c")
    assert np.abs(P - ref.P0f).max() < 1e-10 * ref.P0f.max()


def test_linearized_pressure_matches_eos_derivative(box44):
    mesh, _, ref = box44
    c = ref.const
    rng = np.random.default_rng(7)
    drho = 1e-7 * ref.rho0 * rng.standard_normal(mesh.nshape)
    dth = 1e-7 * ref.theta0 * rng.standard_normal(mesh.nshape)
    q = np.zeros((5,) + mesh.nshape)
    q[0], q[4] = drho, dth
    lin = euler.linearized_pressure(q, ref, "set2nc")
    full = (euler.equation_of_state(ref.rho0 + drho, ref.theta0 + dth, c)
            - ref.P0f)
    assert np.abs(lin - full).max() < 1e-6 * np.abs(full).max()


def test_unknown_set_rejected(box44):
    mesh, _, ref = box44
    with pytest.raises(ValueError):
        euler.linearized_pressure(np.zeros((5,) + mesh.nshape), ref, "set3")


# ---------------------------------------------------------------------------
# Linear operator
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("set_name", ["set2nc", "set2c"])
def test_linear_operator_zero(box44, set_name):
    mesh, disc, ref = box44
    L = euler.linear_operator(np.zeros((5,) + mesh.nshape), ref, disc, set_name)
    assert np.abs(L).max() == 0.0


@pytest.mark.parametrize("set_name", ["set2nc", "set2c"])
def test_linear_operator_superposition(box44, set_name):
    mesh, disc, ref = box44
    q1 = continuous_random_state(disc, ref, set_name, seed=1)
    q2 = continuous_random_state(disc, ref, set_name, seed=2)
    a, b = 2.0, -3.0
    lhs = euler.linear_operator(a * q1 + b * q2, ref, disc, set_name)
    rhs = (a * euler.linear_operator(q1, ref, disc, set_name)
           + b * euler.linear_operator(q2, ref, disc, set_name))
    assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(lhs).max())


def test_theta_tendency_vanishes_constant_background(box44):
    mesh, disc, ref = box44
    q = continuous_random_state(disc, ref, "set2nc", seed=3)
    L = euler.linear_operator(q, ref, disc, "set2nc")
    assert np.abs(L[4]).max() == 0.0   # u . grad(theta0) with grad(theta0) = 0


# ---------------------------------------------------------------------------
# Vertical restriction
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("set_name", ["set2nc", "set2c"])
def test_vertical_restriction_on_uniform_columns(box44, set_name):
    mesh, disc, ref = box44
    # state varying only in the vertical -> restriction equals full operator
    q = np.zeros((5,) + mesh.nshape)
    z = mesh.height
    q[0] = 1e-4 * np.sin(np.pi * z / 1000.0) * ref.rho0
    q[3] = 0.1 * np.sin(np.pi * z / 1000.0)
    q[4] = 1e-4 * np.cos(np.pi * z / 1000.0) * ref.theta0
    full = euler.linear_operator(q, ref, disc, set_name)
    vert = euler.vertical_restriction(q, ref, disc, set_name)
    scale = max(1.0, np.abs(full).max())
    assert np.abs(full - vert).max() < 1e-12 * scale


def test_vertical_restriction_ignores_horizontal_velocity(box44):
    mesh, disc, ref = box44
    q = np.zeros((5,) + mesh.nshape)
    q[1] = 1.0   # uniform horizontal wind, constant theta0
    vert = euler.vertical_restriction(q, ref, disc, "set2nc")
    assert np.abs(vert).max() < 1e-14


def test_vertical_restriction_on_sphere_radial_field(sphere_small):
    mesh, disc, ref = sphere_small
    h = mesh.height
    q = np.zeros((5,) + mesh.nshape)
    q[0] = 1e-4 * np.sin(np.pi * h / 10_000.0) * ref.rho0
    vel = 0.1 * np.cos(np.pi * h / 10_000.0)[..., None] * mesh.vert
    q[1:4] = np.moveaxis(vel, -1, 0)
    full = euler.linear_operator(q, ref, disc, "set2nc")
    vert = euler.vertical_restriction(q, ref, disc, "set2nc")
    scale = np.abs(full).max()
    # the restriction keeps only the radial derivative; the remaining gap is
    # the spherical curvature term ~ 2 w / r, of relative size ~ r_T / r_e
    assert np.abs(full - vert).max() < 1e-2 * scale


# ---------------------------------------------------------------------------
# Nonlinear right-hand side
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("set_name", ["set2nc", "set2c"])
def test_well_balanced_rest_state(box44, set_name):
    mesh, disc, ref = box44
    R = euler.nonlinear_rhs(np.zeros((5,) + mesh.nshape), ref, disc, set_name)
    assert np.abs(R).max() < 1e-9


def test_rhs_minus_linear_zero_state(box44):
    mesh, disc, ref = box44
    q = np.zeros((5,) + mesh.nshape)
    diff = (euler.nonlinear_rhs(q, ref, disc, "set2nc")
            - euler.linear_operator(q, ref, disc, "set2nc"))
    assert np.abs(diff).max() < 1e-9


def test_set2c_mass_tendency_zero(box44):
    mesh, disc, ref = box44
    q = continuous_random_state(disc, ref, "set2c", seed=8)
    R = euler.nonlinear_rhs(q, ref, disc, "set2c")
    dmass = np.sum(disc.metrics.wJ * R[0])
    mass = np.sum(disc.metrics.wJ * (ref.rho0 + q[0]))
    assert abs(dmass) < 1e-12 * abs(mass)


def test_rhs_rejects_unknown_set(box44):
    mesh, disc, ref = box44
    with pytest.raises(ValueError):
        euler.nonlinear_rhs(np.zeros((5,) + mesh.nshape), ref, disc, "bogus")


# ---------------------------------------------------------------------------
# Boundary handling
# ---------------------------------------------------------------------------

def test_zero_normal_velocity_on_all_faces(box44):
    mesh, disc, ref = box44
    rng = np.random.default_rng(9)
    vel = rng.standard_normal(mesh.nshape + (3,))
    euler.zero_normal_velocity(vel, disc.bidx, disc.bproj)
    bidx, bnrm = euler.boundary_entries(mesh, disc.metrics)
    flat = vel.reshape(-1, 3)
    vn = np.einsum("na,na->n", flat[bidx], bnrm)
    assert np.abs(vn).max() < 1e-12


def test_boundary_projection_idempotent(box44):
    mesh, disc, _ = box44
    rng = np.random.default_rng(10)
    vel = rng.standard_normal(mesh.nshape + (3,))
    euler.zero_normal_velocity(vel, disc.bidx, disc.bproj)
    v2 = vel.copy()
    euler.zero_normal_velocity(v2, disc.bidx, disc.bproj)
    assert np.abs(v2 - vel).max() < 1e-13


def test_positive_density_check(box44):
    mesh, _, ref = box44
    st = euler.zero_state("set2nc", mesh)
    euler.check_positive_density(st, ref)   # fine
    st.q[0] -= 2 * ref.rho0
    with pytest.raises(FloatingPointError):
        euler.check_positive_density(st, ref)


# ---------------------------------------------------------------------------
# Courant numbers
# ---------------------------------------------------------------------------

def test_courant_scales_with_dt(box44):
    mesh, disc, ref = box44
    q = np.zeros((5,) + mesh.nshape)
    ch1, cv1 = euler.courant_numbers(q, ref, disc, 1.0, "set2nc")
    ch2, cv2 = euler.courant_numbers(q, ref, disc, 2.0, "set2nc")
    assert ch2 == pytest.approx(2 * ch1, rel=1e-13)
    assert cv2 == pytest.approx(2 * cv1, rel=1e-13)


def test_rest_state_sound_speed(box44):
    mesh, disc, ref = box44
    q = np.zeros((5,) + mesh.nshape)
    dxh, dxv = euler.min_node_spacing(mesh)
    ch, _ = euler.courant_numbers(q, ref, disc, 1.0, "set2nc")
    cmax = ch * dxh
    assert abs(cmax - 347.32) / 347.32 < 5e-3


def test_courant_rejects_bad_dt(box44):
    mesh, disc, ref = box44
    with pytest.raises(ValueError):
        euler.courant_numbers(np.zeros((5,) + mesh.nshape), ref, disc, 0.0,
                              "set2nc")


# ---------------------------------------------------------------------------
# dG surface terms
# ---------------------------------------------------------------------------

def test_dg_surface_vanishes_for_continuous_noflux_field(box44):
    mesh, disc, ref = box44
    q = continuous_random_state(disc, ref, "set2c", seed=11)
    out = euler.dg_surface_linear(q, ref, disc)
    scale = max(1.0, np.abs(q).max())
    assert np.abs(out).max() < 1e-10 * scale


def test_dg_penalty_wave_speed(box44):
    _, _, ref = box44
    c = np.sqrt(ref.const.gamma * ref.P0f / ref.rho0)
    assert abs(c.max() - 347.32) / 347.32 < 5e-3


def test_dg_requires_conservative_set(box44):
    mesh, disc, ref = box44
    with pytest.raises(ValueError):
        euler.linear_operator(np.zeros((5,) + mesh.nshape), ref, disc,
                              "set2nc", dg=True)

"""Command-line driver.

Usage:
    dycore run <config> [--key=value ...]
    dycore study speedup <config> --courants=1,2,5,10,15
    dycore study convergence <config> --dts=2,1,0.5

Config files are plain ``key = value`` text, one per line, ``#`` comments.
Exit codes: 0 ok, 2 config error, 3 solver failure, 4 non-finite state.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import bench, columnsolve, euler, imexcore
from . import specgrid as sg


@dataclass
class RunConfig:
    case: str = "bubble"            # acoustic | bubble | rest-state
    equation_set: str = "set2nc"    # set2nc | set2c
    disc: str = "cg"                # cg | dg
    integrator: str = "rk35"        # rk35 | ark2 | bdf2
    imex: str = "none"              # none | 3d | 1d
    form: str = "schur"             # standard | schur
    solver: str = "gmres"           # gmres | bicgstab | richardson | direct
    precon_order: int = 1
    tolerance: float = 1e-6
    dt: float = 0.0                 # 0 -> auto from courant
    courant: float = 0.5
    end_time: float = 100.0
    # mesh
    nx: int = 10
    nz: int = 10
    ne_panel: int = 4
    ne_vert: int = 3
    order: int = 4
    theta0: float = 300.0
    # outputs
    output_dir: str = "out"
    snapshot_interval: float = 0.0  # 0 -> only final snapshot
    diag_interval: float = 0.0      # 0 -> every step
    threads: int = 1


_CHOICES = {
    "case": {"acoustic", "bubble", "rest-state"},
    "equation_set": {"set2nc", "set2c"},
    "disc": {"cg", "dg"},
    "integrator": {"rk35", "ark2", "bdf2"},
    "imex": {"none", "3d", "1d"},
    "form": {"standard", "schur"},
    "solver": {"gmres", "bicgstab", "richardson", "direct"},
}


class ConfigError(ValueError):
    pass


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read `key = value` lines, apply --key=value overrides, validate."""
    kv = {}
    if path is not None:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key = value")
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
    for ov in overrides:
        if not ov.startswith("--") or "=" not in ov:
            raise ConfigError(f"bad override {ov!r}; expected --key=value")
        k, v = ov[2:].split("=", 1)
        kv[k.strip()] = v.strip()

    cfg = RunConfig()
    ftypes = {f.name: f.type for f in fields(RunConfig)}
    for k, v in kv.items():
        if k not in ftypes:
            raise ConfigError(f"unknown config key {k!r}")
        t = type(getattr(cfg, k))
        try:
            setattr(cfg, k, t(v))
        except ValueError as exc:
            raise ConfigError(f"bad value for {k!r}: {v!r}") from exc
    for k, allowed in _CHOICES.items():
        if getattr(cfg, k) not in allowed:
            raise ConfigError(f"{k} must be one of {sorted(allowed)}")
    # combination invariants
    if cfg.solver == "direct" and cfg.imex != "1d":
        raise ConfigError("the direct column solver requires imex=1d")
    if cfg.disc == "dg" and cfg.form == "schur" and cfg.imex != "none":
        raise ConfigError("the pressure-reduced form is unsupported with dG "
                          "(the flux construction does not converge)")
    if cfg.disc == "dg" and cfg.equation_set != "set2c":
        raise ConfigError("dG requires the conservative set (set2c)")
    if cfg.integrator in ("ark2", "bdf2") and cfg.imex == "none":
        cfg.imex = "3d"
    return cfg


# ---------------------------------------------------------------------------
# Simulation driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    steps: int
    wall_time: float
    dt: float
    courant_h: float
    courant_v: float
    stats: imexcore.SolveStats
    diagnostics: bench.Diagnostics
    final_q: np.ndarray
    exit_code: int = 0
    message: str = ""


def _build_case(cfg: RunConfig):
    const = euler.GasConstants()
    if cfg.case == "acoustic":
        acfg = bench.AcousticWaveConfig(theta0=cfg.theta0)
        mesh = sg.build_cubed_sphere_mesh(cfg.ne_panel, cfg.ne_vert,
                                          acfg.r_e, acfg.r_T, cfg.order)
        # constant-temperature background: uniform sound speed, so the
        # travelling pulse speed can be checked against sqrt(gamma R T)
        ref = euler.isothermal_reference(mesh, cfg.theta0, const)
        state = bench.init_acoustic_wave(acfg, mesh, ref, cfg.equation_set)
        probe = bench.probe_point_on_sphere(acfg, np.pi / 2, 0.0)
        meta = {"acoustic": acfg, "probe_xyz": probe}
    else:
        bcfg = bench.RisingBubbleConfig(theta0=cfg.theta0)
        mesh = sg.build_box_mesh(cfg.nx, cfg.nz, bcfg.Lx, bcfg.Lz, cfg.order)
        ref = euler.hydrostatic_reference(mesh, cfg.theta0, const)
        if cfg.case == "bubble":
            state = bench.init_rising_bubble(bcfg, mesh, ref, cfg.equation_set)
        else:
            state = euler.zero_state(cfg.equation_set, mesh)
        probe = (bcfg.x_c, 0.0, bcfg.z_c)
        meta = {"bubble": bcfg, "probe_xyz": probe}
    disc = euler.build_discretization(mesh)
    return mesh, ref, disc, state, meta


def write_snapshot(path, t, q, mesh, ref, set_name):
    """Plain-text snapshot: x y z rho_p u v w theta_p."""
    vel = np.moveaxis(q[1:4], 0, -1)
    if set_name == "set2c":
        rho = ref.rho0 + q[0]
        vel = vel / rho[..., None]
        th_p = (ref.Theta0 + q[4]) / rho - ref.theta0
    else:
        th_p = q[4]
    xyz = mesh.coords.reshape(-1, 3)
    data = np.column_stack([xyz, q[0].reshape(-1), vel.reshape(-1, 3),
                            th_p.reshape(-1)])
    np.savetxt(path, data, fmt="%.10g",
               header=f"time={t:.10g} fields=x y z rho_p u v w theta_p")


def run_simulation(cfg: RunConfig, quiet=False) -> RunResult:
    os.makedirs(cfg.output_dir, exist_ok=True)
    mesh, ref, disc, state, meta = _build_case(cfg)
    set_name = cfg.equation_set
    euler.check_positive_density(state, ref)
    q = state.q
    # make coincident nodes exactly consistent before stepping
    q = sg.apply_dss_many(q, disc.dss)

    dg = cfg.disc == "dg"

    def rhs(qv):
        return euler.nonlinear_rhs(qv, ref, disc, set_name, dg=dg)

    dx_h, dx_v = euler.min_node_spacing(mesh)
    ch0, cv0 = euler.courant_numbers(q, ref, disc, 1.0, set_name)
    cmax_v = cv0 * dx_v   # max signal speed
    if cfg.dt > 0:
        dt = cfg.dt
    else:
        # vertical courant target (the limiting one for the thin shell)
        dt = cfg.courant * dx_v / cmax_v
    ch, cv = euler.courant_numbers(q, ref, disc, dt, set_name)

    problem = None
    if cfg.integrator in ("ark2", "bdf2"):
        problem = imexcore.ImplicitProblem(
            disc=disc, ref=ref, set_name=set_name,
            discretization=cfg.disc, form=cfg.form,
            dim="1d" if cfg.imex == "1d" else "3d",
            solver=imexcore.SolverSpec(method=cfg.solver, tol=cfg.tolerance,
                                       precon_order=cfg.precon_order))

    ark = imexcore.ark2_tableau()
    bdf = imexcore.bdf2_coefficients()
    diags = bench.Diagnostics()
    pid = bench.nearest_node(mesh, meta["probe_xyz"])

    def probe_vals(qv):
        P = euler.linearized_pressure(qv, ref, set_name)
        return (float(P.reshape(-1)[pid]),)

    t = 0.0
    steps = 0
    qm1 = None
    diags.record(t, q, ref, disc.metrics, probe_vals(q))
    next_diag = cfg.diag_interval
    t0 = time.perf_counter()
    exit_code = 0
    message = ""
    try:
        while t < cfg.end_time - 1e-12:
            step_dt = min(dt, cfg.end_time - t)
            if cfg.integrator == "rk35":
                qn = imexcore.rk35_step(q, step_dt, rhs)
            elif cfg.integrator == "ark2":
                qn = imexcore.ark_imex_step(q, step_dt, ark, problem, rhs)
            else:
                if qm1 is None or step_dt != dt:
                    qn = imexcore.ark_imex_step(q, step_dt, ark, problem, rhs)
                else:
                    qn = imexcore.bdf2_imex_step(q, qm1, step_dt, bdf, problem, rhs)
            qm1 = q
            q = qn
            t += step_dt
            steps += 1
            if cfg.diag_interval <= 0 or t >= next_diag - 1e-12:
                diags.record(t, q, ref, disc.metrics, probe_vals(q))
                next_diag += cfg.diag_interval
    except imexcore.SolverFailure as exc:
        exit_code, message = 3, str(exc)
    except FloatingPointError as exc:
        exit_code, message = 4, str(exc)
    wall = time.perf_counter() - t0

    diags.write_csv(os.path.join(cfg.output_dir, "timeseries.csv"))
    snap = os.path.join(cfg.output_dir, f"snapshot_{t:012.3f}.txt")
    write_snapshot(snap, t, q, mesh, ref, set_name)

    stats = problem.stats if problem is not None else imexcore.SolveStats()
    if not quiet:
        mean_it = stats.iterations / max(stats.solves, 1)
        print(f"steps={steps} wall={wall:.3f}s dt={dt:.6g} "
              f"C_H={ch:.3g} C_V={cv:.3g} "
              f"solves={stats.solves} mean_iters={mean_it:.2f} "
              f"matvecs={stats.matvecs}")
        if message:
            print(f"aborted: {message} (last snapshot: {snap})")
    return RunResult(steps=steps, wall_time=wall, dt=dt, courant_h=ch,
                     courant_v=cv, stats=stats, diagnostics=diags,
                     final_q=q, exit_code=exit_code, message=message)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def speedup_study(cfg: RunConfig, courants, out_path=None):
    """Explicit baseline once, then one IMEX run per vertical Courant target."""
    import copy
    base = copy.deepcopy(cfg)
    base.integrator = "rk35"
    base.imex = "none"
    base.courant = 1.0
    base.dt = 0.0
    base.output_dir = os.path.join(cfg.output_dir, "explicit")
    res_exp = run_simulation(base, quiet=True)
    rows = []
    for C in courants:
        run = copy.deepcopy(cfg)
        if run.integrator == "rk35":
            run.integrator = "ark2"
        run.courant = float(C)
        run.dt = 0.0
        run.output_dir = os.path.join(cfg.output_dir, f"imex_C{C:g}")
        try:
            res = run_simulation(run, quiet=True)
            mean_it = res.stats.iterations / max(res.stats.solves, 1)
            rows.append((float(C), res_exp.wall_time, res.wall_time,
                         res_exp.wall_time / res.wall_time, mean_it))
        except Exception as exc:   # record and continue
            rows.append((float(C), res_exp.wall_time, float("nan"),
                         float("nan"), float("nan")))
            print(f"run at C={C} failed: {exc}", file=sys.stderr)
    lines = ["C,wall_explicit,wall_imex,speedup,iters_mean"]
    for r in rows:
        lines.append(",".join(f"{v:.6g}" for v in r))
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    return rows, text


def convergence_cli(cfg: RunConfig, dts):
    import copy

    def run_case(dt):
        run = copy.deepcopy(cfg)
        run.dt = float(dt)
        run.output_dir = os.path.join(cfg.output_dir, f"dt{dt:g}")
        res = run_simulation(run, quiet=True)
        if res.exit_code:
            raise RuntimeError(res.message)
        return res.final_q

    order, dts_sorted, errors = bench.convergence_study(run_case, dts)
    return order, dts_sorted, errors


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            print(__doc__)
            return 2
        cmd = argv[0]
        if cmd == "run":
            if len(argv) < 2:
                raise ConfigError("usage: dycore run <config> [--key=value ...]")
            cfg = parse_config(argv[1] if argv[1] != "-" else None, argv[2:])
            res = run_simulation(cfg)
            return res.exit_code
        if cmd == "study":
            if len(argv) < 3:
                raise ConfigError("usage: dycore study speedup|convergence "
                                  "<config> --courants=...|--dts=...")
            kind = argv[1]
            listarg = None
            rest = []
            for a in argv[3:]:
                if a.startswith("--courants=") or a.startswith("--dts="):
                    listarg = [float(x) for x in a.split("=", 1)[1].split(",")]
                else:
                    rest.append(a)
            cfg = parse_config(argv[2] if argv[2] != "-" else None, rest)
            if listarg is None:
                raise ConfigError("study requires --courants= or --dts=")
            if kind == "speedup":
                os.makedirs(cfg.output_dir, exist_ok=True)
                _, text = speedup_study(cfg, listarg,
                                        os.path.join(cfg.output_dir, "speedup.csv"))
                print(text, end="")
                return 0
            if kind == "convergence":
                order, dts_sorted, errors = convergence_cli(cfg, listarg)
                for d, e in zip(dts_sorted, errors):
                    print(f"dt={d:g} err={e:.6e}")
                print(f"observed_order={order if order is not None else 'n/a'}")
                return 0
            raise ConfigError(f"unknown study {kind!r}")
        raise ConfigError(f"unknown command {cmd!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except imexcore.SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())

"""Experiment runner behind the msle console script.

Subcommands: simulate (sample driving paths), verify (run check suites),
lerw-exit (lattice exit-probability sweep), drift-profile and
partition-trace (tabulate functionals along a stored path). Every run
writes its outputs into one directory and finishes with manifest.json, the
completion marker. Exit status: 0 when all checks pass, 1 when a check
fails or a numerical error aborts the run, 2 for usage or config errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

from . import __version__
from .config import SectionView, apply_overrides, echo_config, read_config
from .errors import ConfigError, MsleError

SUITES = ("generator", "flow", "mc", "lattice", "splitting", "all")


@dataclass
class RunManifest:
    command: str
    config: dict
    version: str
    workers: int
    started: str
    seed: int | None = None
    stopped: str = ""
    outputs: list = field(default_factory=list)
    truncations: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def write(self, out_dir: str) -> None:
        self.stopped = _timestamp()
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _worker_count() -> int:
    env = os.environ.get("MSLE_WORKERS", "").strip()
    if not env:
        return os.cpu_count() or 1
    try:
        n = int(env)
    except ValueError as exc:
        raise ConfigError(f"MSLE_WORKERS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ConfigError(f"MSLE_WORKERS must be positive, got {n}")
    return n


def _fmt(cell) -> str:
    if isinstance(cell, float):
        return f"{cell:.17g}"
    return str(cell)


def _write_csv(out_dir, name, header, rows, manifest) -> None:
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(c) for c in row) + "\n")
    manifest.outputs.append(name)


# config -> domain objects


def _cfg_dir(args) -> str:
    cfg = getattr(args, "config", None)
    return os.path.dirname(os.path.abspath(cfg)) if cfg else os.getcwd()


def _build_mass(view: SectionView, base_dir: str):
    """[mass] section -> MassProfile, or None when the section is absent.

    Either file = <massgrid path> (relative to the config file) with an
    optional scale, or box = x0 y0 x1 y1 with nx, ny, m2 = constant.
    """
    from .kernels import MassProfile

    if not view:
        return None
    if "file" in view:
        rel = view.get_str("file")
        scale = view.get_float("scale", 1.0)
        view.reject_unknown()
        path = rel if os.path.isabs(rel) else os.path.join(base_dir, rel)
        if not os.path.exists(path):
            raise ConfigError(f"[mass] grid file not found: {path}", view.path)
        try:
            prof = MassProfile.from_grid_file(path)
        except ValueError as exc:
            raise ConfigError(f"[mass] {exc}", view.path) from exc
        if scale != 1.0:
            prof = MassProfile(prof.centers, prof.areas, prof.m2 * scale,
                               prof.support_box)
        return prof
    box = view.get_floats("box")
    if len(box) != 4:
        raise ConfigError("[mass] box needs 4 numbers: x0 y0 x1 y1", view.path)
    nx = view.get_int("nx")
    ny = view.get_int("ny")
    m2 = view.get_float("m2")
    view.reject_unknown()
    try:
        return MassProfile.square_grid(tuple(box), nx, ny, m2)
    except ValueError as exc:
        raise ConfigError(f"[mass] {exc}", view.path) from exc


def _default_kappa(mode: str) -> float:
    return 2.0 if mode in ("massive-dipolar-sle2", "critical-dipolar") else 4.0


def _build_spec(sde: SectionView, mass, seed_override=None, mode_override=None):
    from .sde import SimulationSpec

    cfg_mode = sde.get_str("mode", "critical-chordal")
    cfg_seed = sde.get_int("seed", 0)
    mode = mode_override or cfg_mode
    seed = seed_override if seed_override is not None else cfg_seed
    massive = mode in ("massive-sle4", "massive-dipolar-sle2")
    if massive and mass is None:
        raise ConfigError(f"[mass] section required for mode {mode!r}", sde.path)
    kwargs = dict(
        kappa=sde.get_float("kappa", _default_kappa(mode)),
        T=sde.get_float("T", 0.5),
        dt=sde.get_float("dt", 2.5e-3),
        seed=seed,
        mode=mode,
        drift_refresh=sde.get_int("drift_refresh", 1),
        mass=mass if massive else None,
        a=sde.get_float("a", None),
        b=sde.get_float("b", None),
        mark_stop_gap=sde.get_float("mark_stop_gap", None),
    )
    try:
        return SimulationSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[sde] {exc}", sde.path) from exc


def _pair(view: SectionView, key: str, default):
    vals = view.get_floats(key, default)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise ConfigError(f"[{view.name}] {key} needs two increasing numbers",
                          view.path)
    return tuple(vals)


def _m2_lookup(profile):
    """Step-function m^2 of a stored profile: nearest cell inside its box,
    zero outside (keeps the lattice killing and the continuum grid equal)."""
    import numpy as np

    x0, y0, x1, y1 = profile.support_box

    def m2(z: complex) -> float:
        if not (x0 <= z.real <= x1 and y0 <= z.imag <= y1):
            return 0.0
        return float(profile.m2[np.argmin(np.abs(profile.centers - z))])

    return m2


def _grid_shape_of(profile) -> tuple:
    import numpy as np

    return (len(np.unique(profile.centers.real)),
            len(np.unique(profile.centers.imag)))


# stored-path profiling: advance the grid images once, snapshot at strides


def _read_stored_path(path_file: str):
    from .sde import read_path_csv

    if not os.path.exists(path_file):
        raise ConfigError(f"path file not found: {path_file}")
    with open(path_file, "r", encoding="utf-8") as fh:
        return read_path_csv(fh)


def _profile_states(path, grid, stride: int, reals=None):
    import numpy as np

    from .kernels import assemble_from_images
    from .loewner import step_dg_factor, step_points, step_reals

    dts = np.diff(path.times)
    imgs = np.asarray(grid.centers, complex).copy()
    dgs = np.ones(len(imgs), complex)
    rs = np.asarray(reals, float) if reals is not None else None

    def state(k):
        xi_k = float(path.xi[k])
        cache = assemble_from_images(grid, imgs - xi_k, dgs, xi_k)
        return k, float(path.times[k]), xi_k, cache, rs

    yield state(0)
    for k in range(path.n_steps):
        x, d = float(path.xi[k]), float(dts[k])
        new = step_points(imgs, x, d)
        dgs = dgs * step_dg_factor(imgs, new, x)
        imgs = new
        if rs is not None:
            rs = step_reals(rs, x, d)
        if (k + 1) % stride == 0 or k + 1 == path.n_steps:
            yield state(k + 1)


# subcommand bodies; each appends outputs to the manifest and returns the
# exit code, with the manifest written afterwards by _dispatch


def _cmd_simulate(args, cfg, out_dir, manifest) -> int:
    from .loewner import FLAG_HULL, FLAG_MARK
    from .sde import ensemble, write_path_csv

    cfg_path = getattr(args, "config", None)
    sde = SectionView(cfg, "sde", cfg_path)
    mass = _build_mass(SectionView(cfg, "mass", cfg_path), _cfg_dir(args))
    spec = _build_spec(sde, mass, seed_override=args.seed,
                       mode_override=args.mode)
    n_paths = sde.get_int("n_paths", 1)
    sde.reject_unknown()
    if n_paths < 1:
        raise ConfigError("[sde] n_paths must be positive", cfg_path)
    manifest.seed = spec.seed

    ens = ensemble(spec, n_paths)
    hull = mark = 0
    for i, p in enumerate(ens.paths):
        name = f"path-{i:03d}.csv"
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            write_path_csv(p, fh)
        manifest.outputs.append(name)
        stop = int(p.flags[-1]) if p.flags is not None else 0
        hull += stop == FLAG_HULL
        mark += stop == FLAG_MARK
    manifest.truncations = {"hull": hull, "mark": mark}
    if not args.no_figures:
        from .figures import save_path_figure

        save_path_figure(ens.paths, os.path.join(out_dir, "fig-paths.png"))
        manifest.outputs.append("fig-paths.png")
    return 0


def _mc_reports(vv: SectionView, sde: SectionView, mass, n_tau: int,
                names, n_paths, checkpoints) -> list:
    from . import verify as V
    from .sde import SimulationSpec

    seed = sde.get_int("seed", 20260801)
    T = sde.get_float("T", 0.5)
    dt = sde.get_float("dt", 2.5e-3)
    refresh = sde.get_int("drift_refresh", 4)
    a = sde.get_float("a", 2.0)
    b = sde.get_float("b", 4.0)
    reports = []
    for obs in names:
        if obs not in V.MC_OBSERVABLES:
            raise ConfigError(f"[verify] unknown observable {obs!r}", vv.path)
        mode = V._MC_MODE[obs]
        kwargs = dict(kappa=V._MC_KAPPA.get(obs, 4.0), T=T, dt=dt, seed=seed,
                      mode=mode)
        params: dict = {"n_tau": n_tau}
        if mode in ("massive-sle4", "massive-dipolar-sle2"):
            if mass is None:
                raise ConfigError(
                    f"[mass] section required for observable {obs!r}", vv.path)
            kwargs.update(mass=mass, drift_refresh=refresh)
        if mode == "massive-dipolar-sle2":
            kwargs.update(a=a, b=b)
        if obs in ("z4", "z2tilde"):
            if mass is None:
                raise ConfigError(
                    f"[mass] section required for observable {obs!r}", vv.path)
            params["mass"] = mass
        elif obs == "exp_char" and mass is not None:
            params["mass"] = mass
        if obs == "z2tilde":
            params["marks"] = (a, b)
        try:
            spec = SimulationSpec(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"[sde] {exc}", sde.path) from exc
        reports += V.martingale_mc(obs, spec, n_paths, checkpoints,
                                   params=params)
    return reports


def _cmd_verify(args, cfg, out_dir, manifest) -> int:
    from . import verify as V

    cfg_path = getattr(args, "config", None)
    vv = SectionView(cfg, "verify", cfg_path)
    suite = args.suite or vv.get_str("suite", "all")
    if suite not in SUITES:
        raise ConfigError(f"[verify] unknown suite {suite!r}", cfg_path)
    # consume every option up front so one config can serve every suite
    n_tau = vv.get_int("n_tau", 8)
    gen_states = vv.get_int("gen_states", 20)
    gen_grid = vv.get_floats("gen_grid", (20.0, 20.0))
    gen_seed = vv.get_int("gen_seed", V.GEN_SEED)
    gen_t = vv.get_float("gen_t", 0.45)
    gen_dt = vv.get_float("gen_dt", 2.5e-3)
    flow_dt = vv.get_float("flow_dt", 1e-3)
    flow_times = vv.get_floats("flow_times", (0.05, 0.1, 0.15))
    mc_observables = vv.get_strs("mc_observables", V.MC_OBSERVABLES)
    mc_paths = vv.get_int("mc_paths", 200)
    mc_checkpoints = vv.get_floats("mc_checkpoints", (0.1, 0.25, 0.5))
    lat_spacings = vv.get_floats("lat_spacings", (0.5, 0.25, 0.125))
    lat_radius = vv.get_float("lat_radius", 32.0)
    lat_sub = _pair(vv, "lat_sub", (1.0, 2.0))
    lat_arc = _pair(vv, "lat_arc", (1.0, 3.0))
    lat_scale = vv.get_float("lat_scale", 0.25)
    lat_tol = vv.get_float("lat_tol", 0.05)
    split_seed = vv.get_int("split_seed", 424243)
    split_t = vv.get_float("split_t", 2.0)
    split_dt = vv.get_float("split_dt", 2.5e-3)
    split_times = vv.get_floats("split_times", (1.0, 2.0))
    split_floor = vv.get_float("split_floor", 0.0)
    vv.reject_unknown()
    sde = SectionView(cfg, "sde", cfg_path)
    mass = _build_mass(SectionView(cfg, "mass", cfg_path), _cfg_dir(args))
    manifest.seed = sde.get_int("seed", 20260801) if suite in ("mc", "all") else gen_seed

    reports = []
    if suite in ("generator", "all"):
        setup = V.default_generator_setup(
            n_states=gen_states,
            grid_shape=(int(gen_grid[0]), int(gen_grid[1])),
            seed=gen_seed, T=gen_t, dt=gen_dt)
        reports += V.generator_suite(setup, n_tau=n_tau)
    if suite in ("flow", "all"):
        for kind in ("constant", "sinusoidal"):
            reports += V.detratio_flow(kind=kind, dt=flow_dt,
                                       t_eval=flow_times, n_tau=n_tau)
    if suite in ("mc", "all"):
        reports += _mc_reports(vv, sde, mass, n_tau, mc_observables,
                               mc_paths, mc_checkpoints)
    if suite in ("lattice", "all"):
        reports += V.lattice_vs_continuum(
            spacings=lat_spacings, radius=lat_radius, sub=lat_sub,
            arc=lat_arc, tol_finest=lat_tol)
        if mass is not None:
            reports += V.lattice_vs_continuum(
                spacings=lat_spacings, radius=lat_radius, sub=lat_sub,
                arc=lat_arc, m2=_m2_lookup(mass), mass_scale=lat_scale,
                grid_box=mass.support_box, grid_shape=_grid_shape_of(mass),
                tol_finest=lat_tol)
    if suite in ("splitting", "all"):
        sp_path, sp_grid = V.default_splitting_run(seed=split_seed, T=split_t,
                                                   dt=split_dt)
        reports += V.green_splitting(sp_path, sp_grid, times=split_times,
                                     same_side_floor=split_floor)

    V.write_reports(reports,
                    jsonl_path=os.path.join(out_dir, "reports.jsonl"),
                    csv_path=os.path.join(out_dir, "reports.csv"))
    manifest.outputs += ["reports.jsonl", "reports.csv"]
    manifest.truncations = {"mc_excluded": int(sum(
        r.detail.get("n_excluded", 0) for r in reports
        if r.name.startswith("mc:")))}
    if not args.no_figures:
        from .figures import save_report_figure

        save_report_figure(reports, os.path.join(out_dir, "fig-reports.png"))
        manifest.outputs.append("fig-reports.png")
    if all(r.passed for r in reports):
        return 0
    manifest.status = "check-failures"
    return 1


def _cmd_lerw_exit(args, cfg, out_dir, manifest) -> int:
    from . import verify as V
    from .lattice import half_disk_domain, subinterval_probability

    cfg_path = getattr(args, "config", None)
    lat = SectionView(cfg, "lattice", cfg_path)
    radius = lat.get_float("radius", 16.0)
    spacings = lat.get_floats("spacings", (0.5, 0.25))
    sub = _pair(lat, "sub", (1.0, 2.0))
    arc = _pair(lat, "arc", (1.0, 3.0))
    scale = lat.get_float("mass_scale", 0.25)
    lat.reject_unknown()
    mass = _build_mass(SectionView(cfg, "mass", cfg_path), _cfg_dir(args))

    if mass is None:
        target = V._mark_ratio_target(sub, arc, None)
        rho = 0.0
    else:
        target = V._mark_ratio_target(sub, arc, mass)
        lookup = _m2_lookup(mass)

        def rho(x, y):
            return scale * lookup(complex(x, y))

    label = f"[{sub[0]:g}:{sub[1]:g}]in[{arc[0]:g}:{arc[1]:g}]"
    rows = []
    for a in spacings:
        dom = half_disk_domain(radius, a, rho=rho)
        p = subinterval_probability(dom, sub, arc)
        rows.append((float(a), radius, label, p, target, p / target - 1.0))
    _write_csv(out_dir, "lerw-exit.csv",
               "a,radius,interval,lattice_p,continuum_p,rel_err",
               rows, manifest)
    if not args.no_figures:
        from .figures import save_lerw_figure

        save_lerw_figure(spacings, [r[3] for r in rows], target,
                         os.path.join(out_dir, "fig-convergence.png"))
        manifest.outputs.append("fig-convergence.png")
    return 0


def _cmd_drift_profile(args, cfg, out_dir, manifest) -> int:
    from .kernels import MassProfile
    from .loewner import MarkedBoundary
    from .partition import drift2, drift4

    cfg_path = getattr(args, "config", None)
    path = _read_stored_path(args.path)
    mass = _build_mass(SectionView(cfg, "mass", cfg_path), _cfg_dir(args))
    grid = mass if mass is not None else MassProfile.empty()
    if args.stride < 1:
        raise ConfigError("--stride must be positive")

    reals = None
    if path.kappa == 2.0:
        sde = SectionView(cfg, "sde", cfg_path)
        a = sde.get_float("a", None)
        b = sde.get_float("b", None)
        if a is None or b is None:
            raise ConfigError(
                "[sde] a and b are required to profile a kappa=2 path", cfg_path)
        reals = (a, b)

    rows = []
    for _, t, xi_k, cache, rr in _profile_states(path, grid, args.stride,
                                                 reals=reals):
        if reals is not None:
            marks = MarkedBoundary(reals[0], reals[1],
                                   float(rr[0]), float(rr[1]))
            rows.append((t, xi_k, drift2(cache, marks)))
        else:
            rows.append((t, xi_k, drift4(cache),
                         drift4(cache, first_order=True)))
    header = ("t,xi,drift" if reals is not None
              else "t,xi,drift,drift_first")
    _write_csv(out_dir, "drift-profile.csv", header, rows, manifest)
    if not args.no_figures:
        from .figures import save_series_figure

        ts = [r[0] for r in rows]
        save_series_figure(ts, {"drift": [r[2] for r in rows]}, "F",
                           os.path.join(out_dir, "fig-drift.png"))
        manifest.outputs.append("fig-drift.png")
    return 0


def _cmd_partition_trace(args, cfg, out_dir, manifest) -> int:
    from .kernels import MassProfile
    from .partition import z4

    cfg_path = getattr(args, "config", None)
    path = _read_stored_path(args.path)
    mass = _build_mass(SectionView(cfg, "mass", cfg_path), _cfg_dir(args))
    grid = mass if mass is not None else MassProfile.empty()
    if args.stride < 1:
        raise ConfigError("--stride must be positive")

    rows = []
    ref = None
    for _, t, xi_k, cache, _rr in _profile_states(path, grid, args.stride):
        if ref is None:
            ref = z4(cache, args.n_tau)
        rep = z4(cache, args.n_tau, reference=ref, normalized=True)
        rows.append((t, xi_k, rep.z4_log, rep.log_zbar, rep.j_term,
                     rep.y_log, rep.n_t, rep.n_hat_t))
    _write_csv(out_dir, "partition-trace.csv",
               "t,xi,z4_log,log_zbar,j_term,y_log,n_t,n_hat_t",
               rows, manifest)
    if not args.no_figures:
        from .figures import save_series_figure

        ts = [r[0] for r in rows]
        series = {"z4_log": [r[2] for r in rows],
                  "log_zbar": [r[3] for r in rows],
                  "j_term/2": [0.5 * r[4] for r in rows],
                  "y_log": [r[5] for r in rows]}
        save_series_figure(ts, series, "log value",
                           os.path.join(out_dir, "fig-partition.png"))
        manifest.outputs.append("fig-partition.png")
    return 0


_BODIES = {
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "lerw-exit": _cmd_lerw_exit,
    "drift-profile": _cmd_drift_profile,
    "partition-trace": _cmd_partition_trace,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msle",
        description="Off-critical Loewner laboratory: simulations, "
                    "verification suites, and lattice cross-checks.")
    parser.add_argument("--version", action="version",
                        version=f"msle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, config_required: bool):
        sp.add_argument("--config", required=config_required,
                        help="run configuration file")
        sp.add_argument("--out", default=None,
                        help="output directory (default msle-<command>)")
        sp.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
        sp.add_argument("--no-figures", action="store_true",
                        help="skip figure rendering")

    sp = sub.add_parser("simulate",
                        help="sample driving paths, store one CSV per path")
    common(sp, True)
    sp.add_argument("--mode", default=None, help="override [sde] mode")
    sp.add_argument("--seed", type=int, default=None, help="override [sde] seed")

    sp = sub.add_parser("verify", help="run verification suites")
    common(sp, True)
    sp.add_argument("--suite", default=None, choices=SUITES)

    sp = sub.add_parser("lerw-exit",
                        help="lattice exit-probability sweep vs continuum")
    common(sp, True)

    sp = sub.add_parser("drift-profile",
                        help="tabulate the off-critical drift along a stored path")
    common(sp, False)
    sp.add_argument("--path", required=True, help="stored DrivingPath CSV")
    sp.add_argument("--stride", type=int, default=1)

    sp = sub.add_parser("partition-trace",
                        help="tabulate partition logs along a stored path")
    common(sp, False)
    sp.add_argument("--path", required=True, help="stored DrivingPath CSV")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--n-tau", dest="n_tau", type=int, default=8)

    return parser


def _dispatch(args, workers: int) -> int:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    if args.set:
        apply_overrides(cfg, args.set)
    out_dir = args.out or f"msle-{args.command}"
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(command=args.command, config=echo_config(cfg),
                           version=__version__, workers=workers,
                           started=_timestamp())
    try:
        code = _BODIES[args.command](args, cfg, out_dir, manifest)
    except ConfigError:
        raise
    except MsleError as exc:
        manifest.status = "error"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.write(out_dir)
        print(f"run failed: {manifest.error}", file=sys.stderr)
        return 1
    manifest.write(out_dir)
    return code


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        workers = _worker_count()
        return _dispatch(args, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

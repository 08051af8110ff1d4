"""Driving-process simulation and a finite-difference Ito-drift evaluator.

The Euler scheme is left-point: over step k the slit map uses the driving
value xi_k, then xi_{k+1} = xi_k + sqrt(kappa dt) N + F_k dt. The drift F is
recomputed every drift_refresh steps (each refresh is a dense solve in the
massive modes) and held in between.

Paths are evolved in lockstep batches. Per path the engine tracks the cell
images w = g_t(c) and the derivative products g_t'(c) incrementally, one
O(n_cells) update per step, so the only expensive work is the batched
linear solve at refresh steps. Truncation never raises mid-ensemble: a path
whose hull reaches the mass support (conformal radius of some cell center
below the cell radius, where the quadrature loses validity) records flag 1,
one whose driving reaches the marked boundary interval records flag 2, and
the surviving rows stay valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kernels import FOUR_PI, MassProfile
from .loewner import (
    EPS_SWALLOW,
    FLAG_HULL,
    FLAG_MARK,
    FLAG_OK,
    LAMBDA_C,
    DrivingPath,
    SlitMapChain,
    advance,
    step_dg_factor,
    step_points,
    step_reals,
)

MODES = (
    "critical-chordal",
    "critical-dipolar",
    "massive-sle4",
    "massive-dipolar-sle2",
)

_SOLVE_CHUNK = 256


@dataclass(frozen=True)
class SimulationSpec:
    """Parameters of one driving-process law."""

    kappa: float
    T: float
    dt: float
    seed: int
    mode: str
    mass: MassProfile | None = None
    drift_refresh: int = 1
    a: float | None = None
    b: float | None = None
    mark_stop_gap: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T >= self.dt:
            raise ValueError("T must be at least dt")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.drift_refresh < 1:
            raise ValueError("drift_refresh must be >= 1")
        if self.is_massive != (self.mass is not None):
            raise ValueError("mass profile present iff the mode is massive")
        if self.mode == "massive-sle4" and self.kappa != 4.0:
            raise ValueError("massive-sle4 runs at kappa = 4")
        if self.mode == "massive-dipolar-sle2" and self.kappa != 2.0:
            raise ValueError("massive-dipolar-sle2 runs at kappa = 2")
        if self.has_marks:
            if self.a is None or self.b is None:
                raise ValueError(f"mode {self.mode} needs marks a < b")
            if not self.a < self.b or (self.a <= 0.0 <= self.b):
                raise ValueError("marks must satisfy a < b on one side of 0")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 bits")

    @property
    def is_massive(self) -> bool:
        return self.mode in ("massive-sle4", "massive-dipolar-sle2")

    @property
    def has_marks(self) -> bool:
        return self.mode in ("critical-dipolar", "massive-dipolar-sle2")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    @property
    def stop_gap(self) -> float:
        """Driving-to-mark gap at which a dipolar run stops; the Euler drift
        increment 2 dt / gap stays far below the gap itself above this."""
        if self.mark_stop_gap is not None:
            return self.mark_stop_gap
        return float(np.sqrt(8.0 * self.kappa * self.dt))


class _BatchCursor:
    """Mutable lockstep state of a path batch (single-writer, engine only)."""

    def __init__(self, spec: SimulationSpec, n_paths: int):
        n_cells = spec.mass.n_cells if spec.mass is not None else 0
        self.xi = np.zeros(n_paths)
        self.w = np.tile(spec.mass.centers, (n_paths, 1)) if n_cells else np.zeros((n_paths, 0), complex)
        self.dg = np.ones((n_paths, n_cells), complex)
        self.r_cells = np.sqrt(spec.mass.areas / np.pi) if n_cells else np.zeros(0)
        self.a_img = np.full(n_paths, spec.a if spec.a is not None else np.nan)
        self.b_img = np.full(n_paths, spec.b if spec.b is not None else np.nan)
        self.alive = np.ones(n_paths, bool)
        self.flags = np.full(n_paths, FLAG_OK, np.uint8)
        self.rows = np.full(n_paths, spec.n_steps + 1)  # rows each path keeps


def _g0_batch(h: np.ndarray, dg: np.ndarray, areas: np.ndarray) -> np.ndarray:
    """Stacked G0 matrices with regularized diagonals, one per path."""
    b, n = h.shape
    d = h[:, :, None] - h[:, None, :]
    dbar = h[:, :, None] - np.conj(h)[:, None, :]
    idx = np.arange(n)
    d[:, idx, idx] = 1.0
    g0 = -2.0 * np.log(np.abs(d) / np.abs(dbar))
    rho = 2.0 * h.imag / np.abs(dg)
    r = np.sqrt(areas / np.pi)
    g0[:, idx, idx] = (1.0 - 2.0 * np.log(r))[None, :] + 2.0 * np.log(rho)
    return g0


def _batch_drift(spec: SimulationSpec, cur: _BatchCursor, idx: np.ndarray) -> np.ndarray:
    """Drift values for the alive subset idx at the current node."""
    if spec.mode == "critical-chordal":
        return np.zeros(len(idx))
    ga = cur.a_img[idx] - cur.xi[idx]
    gb = cur.b_img[idx] - cur.xi[idx]
    if spec.mode == "critical-dipolar":
        return 0.5 * (6.0 - spec.kappa) * (1.0 / ga + 1.0 / gb)

    mass = spec.mass
    mw = mass.mass_weights
    if mass.n_cells == 0 or not np.any(mw):
        if spec.mode == "massive-sle4":
            return np.zeros(len(idx))
        return 0.5 * (6.0 - spec.kappa) * (1.0 / ga + 1.0 / gb)

    out = np.empty(len(idx))
    for lo in range(0, len(idx), _SOLVE_CHUNK):
        sel = idx[lo:lo + _SOLVE_CHUNK]
        h = cur.w[sel] - cur.xi[sel, None]
        g0 = _g0_batch(h, cur.dg[sel], mass.areas)
        a_mat = np.eye(mass.n_cells)[None, :, :] + g0 * (mw / FOUR_PI)[None, None, :]
        theta = 2.0 * h.imag / np.abs(h) ** 2
        if spec.mode == "massive-sle4":
            phi = LAMBDA_C * np.angle(h)
            phi_m = np.linalg.solve(a_mat, phi[:, :, None])[:, :, 0]
            out[lo:lo + _SOLVE_CHUNK] = -2.0 * LAMBDA_C * (
                (theta * phi_m) @ (mw / FOUR_PI))
        else:
            q0 = -2.0 * (1.0 / h**2).imag
            rhs = np.stack([theta, q0], axis=2)
            sol = np.linalg.solve(a_mat, rhs)
            theta_m, q_m = sol[:, :, 0], sol[:, :, 1]
            a_t = cur.a_img[sel]
            b_t = cur.b_img[sel]
            g_img = cur.w[sel]
            psi = np.angle((g_img - b_t[:, None]) / (g_img - a_t[:, None]))
            ga_c = a_t - cur.xi[sel]
            gb_c = b_t - cur.xi[sel]
            gamma0_v = np.abs((a_t - b_t) / (ga_c * gb_c))
            f0 = 2.0 * (1.0 / ga_c + 1.0 / gb_c)
            gamma_m_v = gamma0_v - (theta_m * psi) @ mw / (2.0 * np.pi)
            grad = gamma0_v * f0 / 2.0 - (q_m * psi) @ mw / (2.0 * np.pi)
            out[lo:lo + _SOLVE_CHUNK] = 2.0 * grad / gamma_m_v
    return out


def _simulate_batch(spec: SimulationSpec, n_paths: int,
                    checkpoint_steps: tuple = (), collect=None):
    """Lockstep Euler evolution; returns per-path histories and flags."""
    n_steps = spec.n_steps
    normals = np.empty((n_paths, n_steps))
    for k in range(n_paths):
        rng = np.random.default_rng(np.uint64(spec.seed) ^ np.uint64(k))
        normals[k] = rng.standard_normal(n_steps)

    cur = _BatchCursor(spec, n_paths)
    xi_hist = np.zeros((n_paths, n_steps + 1))
    drift_hist = np.zeros((n_paths, n_steps + 1))
    drift = np.zeros(n_paths)
    root_k_dt = np.sqrt(spec.kappa * spec.dt)

    for k in range(n_steps):
        idx = np.where(cur.alive)[0]
        if len(idx) == 0:
            break
        if k % spec.drift_refresh == 0:
            drift[idx] = _batch_drift(spec, cur, idx)
        drift_hist[idx, k] = drift[idx]
        xi_map = cur.xi[idx].copy()

        # hull advance through step k; every path that started the step
        # alive still gets node k+1 recorded, truncation only marks it final
        if spec.mass is not None and spec.mass.n_cells:
            w_old = cur.w[idx]
            w_new = step_points(w_old, xi_map[:, None], spec.dt)
            cur.dg[idx] *= step_dg_factor(w_old, w_new, xi_map[:, None])
            cur.w[idx] = w_new
            rho = 2.0 * w_new.imag / np.abs(cur.dg[idx])
            hit = np.any(rho < cur.r_cells[None, :], axis=1)
            if np.any(hit):
                died = idx[hit]
                cur.alive[died] = False
                cur.flags[died] = FLAG_HULL
                cur.rows[died] = k + 2
        if spec.has_marks:
            da = cur.a_img[idx] - xi_map
            db = cur.b_img[idx] - xi_map
            coll = (np.minimum(np.abs(da), np.abs(db)) < EPS_SWALLOW) | (da * db < 0)
            if np.any(coll):
                died = idx[coll]
                cur.alive[died] = False
                cur.flags[died] = np.where(
                    cur.flags[died] == FLAG_OK, FLAG_MARK, cur.flags[died])
                cur.rows[died] = np.minimum(cur.rows[died], k + 2)
            keep = idx[~coll]
            cur.a_img[keep] = step_reals(cur.a_img[keep], cur.xi[keep], spec.dt)
            cur.b_img[keep] = step_reals(cur.b_img[keep], cur.xi[keep], spec.dt)

        cur.xi[idx] = xi_map + root_k_dt * normals[idx, k] + drift[idx] * spec.dt
        xi_hist[idx, k + 1] = cur.xi[idx]
        drift_hist[idx, k + 1] = drift[idx]

        live = np.where(cur.alive)[0]
        if spec.has_marks and len(live):
            gap_a = cur.a_img[live] - cur.xi[live]
            gap_b = cur.b_img[live] - cur.xi[live]
            stopped = (np.minimum(np.abs(gap_a), np.abs(gap_b)) < spec.stop_gap) | (
                gap_a * gap_b < 0)
            if np.any(stopped):
                died = live[stopped]
                cur.alive[died] = False
                cur.flags[died] = FLAG_MARK
                cur.rows[died] = k + 2

        if collect is not None and (k + 1) in checkpoint_steps:
            collect(k + 1, cur)

    return xi_hist, drift_hist, cur


def _paths_from_histories(spec: SimulationSpec, xi_hist, drift_hist, cur) -> list:
    paths = []
    n_steps = spec.n_steps
    for p in range(xi_hist.shape[0]):
        rows = int(min(cur.rows[p], n_steps + 1))
        times = spec.dt * np.arange(rows)
        flags = np.zeros(rows, np.uint8)
        if cur.flags[p] != FLAG_OK:
            flags[-1] = cur.flags[p]
        paths.append(DrivingPath(
            kappa=spec.kappa,
            times=times,
            xi=xi_hist[p, :rows].copy(),
            drift_log=drift_hist[p, :rows].copy(),
            flags=flags,
        ))
    return paths


def simulate(spec: SimulationSpec) -> DrivingPath:
    """One Euler path of the driving process; deterministic in spec.seed."""
    xi_hist, drift_hist, cur = _simulate_batch(spec, 1)
    return _paths_from_histories(spec, xi_hist, drift_hist, cur)[0]


@dataclass(frozen=True)
class PathEnsemble:
    """Independent paths with per-path seeds spec.seed xor path index."""

    spec: SimulationSpec
    paths: tuple

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def n_truncated(self) -> int:
        return sum(1 for p in self.paths if p.truncated)

    def flag_counts(self) -> dict:
        counts = {FLAG_OK: 0, FLAG_HULL: 0, FLAG_MARK: 0}
        for p in self.paths:
            counts[int(p.flags[-1]) if p.flags is not None else FLAG_OK] += 1
        return counts


def ensemble(spec: SimulationSpec, n_paths: int) -> PathEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    xi_hist, drift_hist, cur = _simulate_batch(spec, n_paths)
    return PathEnsemble(spec=spec, paths=tuple(
        _paths_from_histories(spec, xi_hist, drift_hist, cur)))


def ito_drift_fd(functional, chain: SlitMapChain, extras: dict | None = None,
                 kappa: float = 4.0, delta_xi: float | None = None,
                 delta_t: float = 1e-5, drift: float | None = None,
                 return_error: bool = False):
    """Ito dt-coefficient of A(t, xi) by finite differences.

    drift(A) = d_t A (xi frozen, Loewner advanced; one-sided second order)
             + (kappa/2) d^2_xi A (central)
             + F d_xi A when a drift value is passed.

    The xi-shifted states keep the hull: functionals see chain.with_xi and
    must re-evaluate only driving-dependent quantities. With
    return_error=True a half-step Richardson repeat gives (value, error).
    """
    extras = extras or {}

    def call(ch):
        return float(functional(ch, **extras))

    xi = chain.xi_current
    dxi = delta_xi if delta_xi is not None else 1e-4 * max(1.0, abs(xi))
    a0 = call(chain)

    def estimate(dx, dt_):
        a_t1 = call(advance(chain, xi, dt_))
        a_t2 = call(advance(chain, xi, 2.0 * dt_))
        a_p = call(chain.with_xi(xi + dx))
        a_m = call(chain.with_xi(xi - dx))
        d_t = (-3.0 * a0 + 4.0 * a_t1 - a_t2) / (2.0 * dt_)
        d_xx = (a_p - 2.0 * a0 + a_m) / dx**2
        val = d_t + 0.5 * kappa * d_xx
        if drift is not None:
            val += drift * (a_p - a_m) / (2.0 * dx)
        return val

    d1 = estimate(dxi, delta_t)
    if not return_error:
        return d1
    d2 = estimate(dxi / 2.0, delta_t / 2.0)
    return d2, abs(d2 - d1)


# DrivingPath serialization: CSV columns t, xi, drift, flag


def write_path_csv(path: DrivingPath, fileobj) -> None:
    fileobj.write(f"# drivingpath kappa={path.kappa:.17g}\n")
    fileobj.write("t,xi,drift,flag\n")
    drift = path.drift_log if path.drift_log is not None else np.zeros(len(path.times))
    flags = path.flags if path.flags is not None else np.zeros(len(path.times), np.uint8)
    for t, x, d, f in zip(path.times, path.xi, drift, flags):
        fileobj.write(f"{t:.17g},{x:.17g},{d:.17g},{int(f)}\n")


def read_path_csv(fileobj) -> DrivingPath:
    kappa = None
    rows = []
    header_seen = False
    for lineno, line in enumerate(fileobj, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line.lstrip("# ").split()
            for p in parts:
                if p.startswith("kappa="):
                    kappa = float(p.split("=", 1)[1])
            continue
        if not header_seen:
            if line.replace(" ", "") != "t,xi,drift,flag":
                raise ConfigError("expected header 't,xi,drift,flag'", line=lineno)
            header_seen = True
            continue
        cells = line.split(",")
        if len(cells) != 4:
            raise ConfigError(f"expected 4 columns, got {len(cells)}", line=lineno)
        rows.append((float(cells[0]), float(cells[1]), float(cells[2]), int(cells[3])))
    if kappa is None:
        raise ConfigError("missing '# drivingpath kappa=...' comment")
    if not rows:
        raise ConfigError("no data rows")
    arr = np.array([r[:3] for r in rows])
    return DrivingPath(
        kappa=kappa,
        times=arr[:, 0],
        xi=arr[:, 1],
        drift_log=arr[:, 2],
        flags=np.array([r[3] for r in rows], np.uint8),
    )

"""Verification suite built from four instruments: deterministic generator
residuals for every drift identity the package claims, Monte Carlo martingale
checks on simulated ensembles, lattice-to-continuum comparison of exit
ratios, and a trace-splitting diagnostic for the massive Green function.

Each check emits a CheckReport. Reports serialize to JSON lines (one report
per line) and to a summary CSV. Runs are deterministic: the inputs digest
identifies the producing configuration, and rerunning with the same inputs
reproduces every statistic bit for bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from hashlib import sha256

import numpy as np

from .errors import ConfigError, SwallowedPoint
from .kernels import (
    FOUR_PI,
    MassProfile,
    assemble,
    assemble_from_images,
    fermion_correlator,
    gamma_m,
    green_m_at,
    green_m_reg_at,
    massive_green,
    phi_m_at,
    reassemble_with_xi,
    theta_m_at,
)
from .loewner import (
    LAMBDA_C,
    MarkedBoundary,
    SlitMapChain,
    drift0_dipolar,
    eval_h,
    gamma0,
    green0,
    green_half_plane,
    observables0,
    step_dg_factor,
    step_points,
    step_reals,
    trace_tip,
)
from .partition import drift4, log_zbar, n_terms, z2, z4
from .sde import EPS_SWALLOW, SimulationSpec, ensemble, ito_drift_fd, simulate


# check reports: uniform record for every verification statistic


@dataclass(frozen=True)
class CheckReport:
    """One verification statistic with its pass rule.

    The rule is uniform: |statistic| <= tolerance. Monte Carlo checks set
    tolerance = 3 * stderr and record stderr; deterministic checks leave
    stderr as None. The inputs field is a digest of the producing
    configuration so a report can be traced back to its run.
    """

    name: str
    inputs: str
    statistic: float
    tolerance: float
    stderr: float | None = None
    passed: bool = False
    runtime: float = 0.0
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs": self.inputs,
            "statistic": self.statistic,
            "tolerance": self.tolerance,
            "stderr": self.stderr,
            "pass": self.passed,
            "runtime": self.runtime,
            "detail": self.detail,
        }


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return str(obj)


def _digest(inputs: dict) -> str:
    blob = json.dumps(inputs, sort_keys=True, default=_json_default)
    return sha256(blob.encode()).hexdigest()[:16]


def _report(name: str, inputs: str, statistic: float, tolerance: float,
            stderr: float | None = None, runtime: float = 0.0,
            detail: dict | None = None) -> CheckReport:
    statistic = float(statistic)
    tolerance = float(tolerance)
    return CheckReport(
        name=name, inputs=inputs, statistic=statistic, tolerance=tolerance,
        stderr=None if stderr is None else float(stderr),
        passed=bool(abs(statistic) <= tolerance),
        runtime=float(runtime), detail=detail or {},
    )


def reports_to_jsonl(reports) -> str:
    lines = [json.dumps(r.to_dict(), sort_keys=True, default=_json_default)
             for r in reports]
    return "\n".join(lines) + "\n"


def reports_to_csv(reports) -> str:
    rows = ["name,inputs,statistic,tolerance,stderr,pass,runtime"]
    for r in reports:
        err = "" if r.stderr is None else f"{r.stderr:.17g}"
        rows.append(f"{r.name},{r.inputs},{r.statistic:.17g},"
                    f"{r.tolerance:.17g},{err},{int(r.passed)},{r.runtime:.3f}")
    return "\n".join(rows) + "\n"


def write_reports(reports, jsonl_path=None, csv_path=None) -> None:
    if jsonl_path is not None:
        with open(jsonl_path, "w") as f:
            f.write(reports_to_jsonl(reports))
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write(reports_to_csv(reports))


# hull-memoized assembly: finite-difference stencils reuse factorizations


class CachedAssembler:
    """Kernel caches memoized by hull.

    Stencil states produced by ito_drift_fd share four distinct hulls and
    many driving values; assembly and the massive solve are keyed on the
    hull alone, and driving shifts reuse the stored factorization through
    reassemble_with_xi. Hull-only scalars (the log determinant ratio) get
    their own memo.
    """

    def __init__(self, grid: MassProfile):
        self.grid = grid
        self._by_hull: dict = {}
        self._logz: dict = {}

    @staticmethod
    def _key(chain: SlitMapChain):
        return (np.asarray(chain.xi_steps, float).tobytes(),
                np.asarray(chain.dt_steps, float).tobytes())

    def __call__(self, chain: SlitMapChain):
        key = self._key(chain)
        base = self._by_hull.get(key)
        if base is None:
            base = assemble(chain, self.grid)
            massive_green(base)
            self._by_hull[key] = base
        if base.chain.xi_current == chain.xi_current:
            return base
        return reassemble_with_xi(base, chain.xi_current)

    def logz(self, chain: SlitMapChain, n_tau: int = 8) -> float:
        key = (self._key(chain), n_tau)
        val = self._logz.get(key)
        if val is None:
            val = log_zbar(self(chain), n_tau)
            self._logz[key] = val
        return val


# generator suite: every drift identity checked by finite differences
# against the stated rate, state by state along a frozen driving path


@dataclass(frozen=True)
class GeneratorSetup:
    """States and evaluation data for the generator suite."""

    states: tuple
    grid: MassProfile
    z1: complex
    z2: complex
    z3: complex
    marks: tuple
    marks_alt: tuple
    coeffs: tuple
    delta_t: float


GEN_SEED = 20260818
GEN_BOX = (-1.0, 1.5, 1.0, 2.5)


def default_generator_setup(n_states: int = 20, grid_shape=(20, 20),
                            seed: int = GEN_SEED, T: float = 0.45,
                            dt: float = 2.5e-3,
                            delta_t: float = 1e-5) -> GeneratorSetup:
    """Prefix states of one fixed critical path over a sinusoidal mass grid.

    The grid sits above the reachable hull (height at most 2 sqrt(T)) and
    the boundary marks sit outside the recorded driving range, so every
    stencil state is clear of swallows.
    """
    spec = SimulationSpec(kappa=4.0, T=T, dt=dt, seed=seed,
                          mode="critical-chordal")
    path = simulate(spec)
    ks = sorted({max(1, round((i + 1) * path.n_steps / n_states))
                 for i in range(n_states)})
    states = tuple(path.chain(upto=k) for k in ks)
    grid = MassProfile.square_grid(
        GEN_BOX, grid_shape[0], grid_shape[1],
        lambda z: 1.0 + 0.5 * np.sin(z.real + z.imag))
    return GeneratorSetup(
        states=states, grid=grid,
        z1=0.3 + 1.6j, z2=-0.6 + 2.1j, z3=-0.15 + 1.85j,
        marks=(2.5, 3.5), marks_alt=(2.2, 4.5),
        coeffs=(0.25, -0.4), delta_t=delta_t)


def _j_log(cache) -> float:
    return n_terms(cache).j_t


def _y_log(cache) -> float:
    # mixed term of the one-interaction expansion: -sum w (phi phi_m + 2 log rho)
    massive_green(cache)
    w8 = cache.grid.mass_weights / (2.0 * FOUR_PI)
    return -float(np.sum(w8 * (cache.phi * cache.phi_m
                               + 2.0 * np.log(cache.rho))))


def _z4_log(asm: CachedAssembler, chain: SlitMapChain, n_tau: int) -> float:
    cache = asm(chain)
    return asm.logz(chain, n_tau) + 0.5 * _j_log(cache) + _y_log(cache)


def _fd_floor(scale: float, kappa: float, dxi: float, delta_t: float,
              drift: float = 0.0) -> float:
    # rounding bound for the stencil: the Richardson repeat halves both
    # steps, and smooth-in-xi rounding of the functional biases the second
    # difference identically at both resolutions, so it must be budgeted
    # explicitly rather than read off the Richardson difference
    eps = 2.3e-16 * max(1.0, abs(scale))
    dxi2, dt2 = dxi / 2.0, delta_t / 2.0
    return eps * (2.0 * kappa / dxi2**2 + 4.0 / dt2 + abs(drift) / dxi2)


def _drift_fd(f, chain, kappa, delta_t, drift=None, scale=None):
    val, rich = ito_drift_fd(f, chain, kappa=kappa, delta_t=delta_t,
                             drift=drift, return_error=True)
    if scale is None:
        scale = abs(f(chain))
    dxi = 1e-4 * max(1.0, abs(chain.xi_current))
    return val, rich + _fd_floor(scale, kappa, dxi, delta_t,
                                 drift=drift or 0.0)


def _id_phi_harmonic(chain, asm, P, n_tau):
    def f(ch):
        return observables0(ch, P.z1).phi
    val, err = _drift_fd(f, chain, 4.0, P.delta_t)
    return val, err, 0.0


def _id_theta_kappa2(chain, asm, P, n_tau):
    def f(ch):
        return observables0(ch, P.z1).theta
    val, err = _drift_fd(f, chain, 2.0, P.delta_t)
    return val, err, 0.0


def _id_green_hadamard(chain, asm, P, n_tau):
    def f(ch):
        return green0(ch, P.z1, P.z2)
    o1 = observables0(chain, P.z1)
    o2 = observables0(chain, P.z2)
    val, err = _drift_fd(f, chain, 4.0, P.delta_t)
    return val + 2.0 * o1.theta * o2.theta, err, 0.0


def _id_conformal_radius(chain, asm, P, n_tau):
    def f(ch):
        return math.log(observables0(ch, P.z1).rho)
    th = observables0(chain, P.z1).theta
    val, err = _drift_fd(f, chain, 4.0, P.delta_t)
    return val + th**2, err, 0.0


def _id_x2_pointsplit(chain, asm, P, n_tau):
    def f(ch):
        o = observables0(ch, P.z1)
        return o.phi**2 + 2.0 * math.log(o.rho)
    val, err = _drift_fd(f, chain, 4.0, P.delta_t)
    return val, err, 0.0


def _char_exponent0(ch, points, coeffs) -> float:
    obs = [observables0(ch, p) for p in points]
    u = sum(c * o.phi for c, o in zip(coeffs, obs))
    for j in range(len(points)):
        for k in range(j + 1, len(points)):
            u += coeffs[j] * coeffs[k] * green0(ch, points[j], points[k])
        u += 0.5 * coeffs[j]**2 * 2.0 * math.log(obs[j].rho)
    return u


def _id_exp_char_critical(chain, asm, P, n_tau):
    points, coeffs = (P.z1, P.z2), P.coeffs
    u0 = _char_exponent0(chain, points, coeffs)

    def f(ch):
        return math.exp(_char_exponent0(ch, points, coeffs) - u0)
    val, err = _drift_fd(f, chain, 4.0, P.delta_t, scale=1.0)
    return val, err, 0.0


def _id_phi_m_massive(chain, asm, P, n_tau):
    drift = drift4(asm(chain))

    def f(ch):
        return phi_m_at(asm(ch), P.z1)
    val, err = _drift_fd(f, chain, 4.0, P.delta_t, drift=drift)
    return val, err, 0.0


def _id_green_m_hadamard(chain, asm, P, n_tau):
    def f(ch):
        return green_m_at(asm(ch), P.z1, P.z2)
    t1 = theta_m_at(asm(chain), P.z1)
    t2 = theta_m_at(asm(chain), P.z2)
    val, err = _drift_fd(f, chain, 4.0, P.delta_t)
    return val + 2.0 * t1 * t2, err, 0.0


def _exp_drift(u_fn, chain, kappa, delta_t, drift=None):
    u0 = u_fn(chain)

    def f(ch):
        return math.exp(u_fn(ch) - u0)
    return _drift_fd(f, chain, kappa, delta_t, drift=drift, scale=1.0)


def _id_z4_martingale(chain, asm, P, n_tau):
    def run(nt):
        return _exp_drift(lambda ch: _z4_log(asm, ch, nt), chain, 4.0,
                          P.delta_t)
    val, err = run(n_tau)
    val2, _ = run(n_tau + 4)
    return val2, err, abs(val2 - val)


def _id_z2_martingale(chain, asm, P, n_tau):
    a, b = P.marks

    def u_fn(nt):
        def u(ch):
            marks = MarkedBoundary.evaluate(ch, a, b)
            return (-2.0 * asm.logz(ch, nt)
                    + math.log(gamma_m(asm(ch), marks)))
        return u
    val, err = _exp_drift(u_fn(n_tau), chain, 2.0, P.delta_t)
    val2, _ = _exp_drift(u_fn(n_tau + 4), chain, 2.0, P.delta_t)
    return val2, err, abs(val2 - val)


def _id_detratio_time_derivative(chain, asm, P, n_tau):
    target = 2.0 * n_terms(asm(chain)).n_t

    def run(nt):
        def u(ch):
            return asm.logz(ch, nt) + 0.5 * _j_log(asm(ch))
        return _drift_fd(u, chain, 0.0, P.delta_t, scale=u(chain))
    val, err = run(n_tau)
    val2, _ = run(n_tau + 4)
    return val2 - target, err, abs(val2 - val)


def _rate_residual(f, chain, P, rate):
    # kappa=2 observables with drift identity L[f] = rate * f
    f0 = f(chain)
    val, err = _drift_fd(f, chain, 2.0, P.delta_t, scale=f0)
    scale = max(abs(f0), 1e-12)
    return (val - rate * f0) / scale, err / scale


def _id_gamma_m_exp_j(chain, asm, P, n_tau, marks_ab=None):
    a, b = marks_ab or P.marks
    nt = 4.0 * n_terms(asm(chain)).n_t

    def f(ch):
        cache = asm(ch)
        marks = MarkedBoundary.evaluate(ch, a, b)
        return gamma_m(cache, marks) * math.exp(_j_log(cache))
    res, err = _rate_residual(f, chain, P, nt)
    return res, err, 0.0


def _id_gamma_m_exp_j_alt(chain, asm, P, n_tau):
    return _id_gamma_m_exp_j(chain, asm, P, n_tau, marks_ab=P.marks_alt)


def _id_theta_m_exp_j(chain, asm, P, n_tau):
    nt = 4.0 * n_terms(asm(chain)).n_t

    def f(ch):
        cache = asm(ch)
        return theta_m_at(cache, P.z1) * math.exp(_j_log(cache))
    res, err = _rate_residual(f, chain, P, nt)
    return res, err, 0.0


def _id_fermion_det_exp_j(chain, asm, P, n_tau):
    nt = 4.0 * n_terms(asm(chain)).n_t
    zs, ws = (P.z1, P.z2), (P.z3,)

    def f(ch):
        cache = asm(ch)
        return fermion_correlator(cache, zs, ws) * math.exp(_j_log(cache))
    res, err = _rate_residual(f, chain, P, nt)
    return res, err, 0.0


def _id_theta_m_nhat(chain, asm, P, n_tau):
    nhat = 4.0 * n_terms(asm(chain)).n_hat_t

    def f(ch):
        return theta_m_at(asm(ch), P.z1)
    res, err = _rate_residual(f, chain, P, nhat)
    return res, err, 0.0


def _id_gamma0_gradient(chain, asm, P, n_tau):
    # pure driving derivative: d_xi Gamma0 = Gamma0 * F0 / 2
    marks = MarkedBoundary.evaluate(chain, *P.marks)
    g0v = gamma0(chain, marks)
    target = g0v * drift0_dipolar(chain, marks, 2.0) / 2.0
    xi = chain.xi_current

    def central(dx):
        up = gamma0(chain.with_xi(xi + dx), marks)
        dn = gamma0(chain.with_xi(xi - dx), marks)
        return (up - dn) / (2.0 * dx)
    dx = 1e-4 * max(1.0, abs(xi))
    d1 = central(dx)
    d2 = central(dx / 2.0)
    floor = 2.3e-16 * max(1.0, g0v) * 2.0 / dx
    return (d2 - target) / g0v, (abs(d2 - d1) + floor) / g0v, 0.0


def _id_exp_char_massive(chain, asm, P, n_tau):
    points, coeffs = (P.z1, P.z2), P.coeffs

    def u_fn(nt):
        def u(ch):
            cache = asm(ch)
            v = _z4_log(asm, ch, nt)
            v += sum(c * phi_m_at(cache, p) for c, p in zip(coeffs, points))
            for j in range(len(points)):
                for k in range(j + 1, len(points)):
                    v += (coeffs[j] * coeffs[k]
                          * green_m_at(cache, points[j], points[k]))
                v += 0.5 * coeffs[j]**2 * green_m_reg_at(cache, points[j])
            return v
        return u
    val, err = _exp_drift(u_fn(n_tau), chain, 4.0, P.delta_t)
    val2, _ = _exp_drift(u_fn(n_tau + 4), chain, 4.0, P.delta_t)
    return val2, err, abs(val2 - val)


_IDENTITY_FUNCS = {
    "phi_harmonic": _id_phi_harmonic,
    "theta_kappa2": _id_theta_kappa2,
    "green_hadamard": _id_green_hadamard,
    "conformal_radius": _id_conformal_radius,
    "x2_pointsplit": _id_x2_pointsplit,
    "exp_char_critical": _id_exp_char_critical,
    "phi_m_massive": _id_phi_m_massive,
    "green_m_hadamard": _id_green_m_hadamard,
    "z4_martingale": _id_z4_martingale,
    "z2_martingale": _id_z2_martingale,
    "detratio_time_derivative": _id_detratio_time_derivative,
    "gamma_m_exp_j": _id_gamma_m_exp_j,
    "gamma_m_exp_j_alt": _id_gamma_m_exp_j_alt,
    "theta_m_exp_j": _id_theta_m_exp_j,
    "fermion_det_exp_j": _id_fermion_det_exp_j,
    "theta_m_nhat": _id_theta_m_nhat,
    "gamma0_gradient": _id_gamma0_gradient,
    "exp_char_massive": _id_exp_char_massive,
}

GENERATOR_IDENTITIES = tuple(_IDENTITY_FUNCS)


def identity_manifest() -> dict:
    """Name -> claim for every drift identity the generator suite covers."""
    return {
        "phi_harmonic": "L4[phi0(z)] = 0",
        "theta_kappa2": "L2[theta0(z)] = 0",
        "green_hadamard": "L[G0(z,w)] = -2 theta0(z) theta0(w)",
        "conformal_radius": "L[log rho0(z)] = -theta0(z)^2",
        "x2_pointsplit": "L4[phi0^2 + 2 log rho0] = 0",
        "exp_char_critical": "L4[exp(sum c phi0 + quad G0 terms)] = 0",
        "phi_m_massive": "L4[Phi_m(z)] + F_m d_xi Phi_m(z) = 0",
        "green_m_hadamard": "L[G_m(z,w)] = -2 Theta_m(z) Theta_m(w)",
        "z4_martingale": "L4[Z4 ratio] = 0",
        "z2_martingale": "L2[Z2 ratio with flowing marks] = 0",
        "detratio_time_derivative": "d_t(log Zbar + J/2) = 2 N_t",
        "gamma_m_exp_j": "L2[Gamma_m e^J] = 4 N_t Gamma_m e^J",
        "gamma_m_exp_j_alt": "same rate identity at a second mark pair",
        "theta_m_exp_j": "L2[Theta_m(z) e^J] = 4 N_t Theta_m(z) e^J",
        "fermion_det_exp_j": "L2[det correlator e^J] = 4 N_t det e^J",
        "theta_m_nhat": "L2[Theta_m(z)] = 4 Nhat_t Theta_m(z)",
        "gamma0_gradient": "d_xi Gamma0 = Gamma0 F0(kappa=2) / 2",
        "exp_char_massive": "L4[exp(massive characteristic exponent)] = 0",
    }


def generator_suite(setup: GeneratorSetup | None = None,
                    identities=None, n_tau: int = 8) -> list:
    """Finite-difference drift residuals for each identity at each state.

    Per state the error budget is 10 * (Richardson finite-difference
    estimate + quadrature-refinement estimate); the report statistic is the
    worst residual-to-budget margin over the states, so pass means every
    state sits inside its budget. A coverage report counts manifest
    identities the run skipped.
    """
    if setup is None:
        setup = default_generator_setup()
    names = tuple(identities) if identities is not None else GENERATOR_IDENTITIES
    unknown = [n for n in names if n not in _IDENTITY_FUNCS]
    if unknown:
        raise ConfigError(f"unknown identities {unknown}")
    inputs = _digest({
        "check": "generator", "n_states": len(setup.states),
        "grid": setup.grid.support_box, "n_cells": setup.grid.n_cells,
        "n_tau": n_tau, "identities": names, "delta_t": setup.delta_t,
    })
    asm = CachedAssembler(setup.grid)
    reports = []
    for name in names:
        t0 = time.perf_counter()
        fn = _IDENTITY_FUNCS[name]
        margins = []
        worst = (0.0, 0.0, 0.0, 0)
        for i, chain in enumerate(setup.states):
            res, err, quad = fn(chain, asm, setup, n_tau)
            budget = 10.0 * (err + quad) + 1e-13
            margin = abs(res) / budget
            margins.append(margin)
            if margin >= worst[0]:
                worst = (margin, res, budget, i)
        reports.append(_report(
            f"generator:{name}", inputs,
            statistic=max(margins), tolerance=1.0,
            runtime=time.perf_counter() - t0,
            detail={"worst_residual": worst[1], "worst_budget": worst[2],
                    "worst_state": worst[3], "n_states": len(setup.states)}))
    missing = sorted(set(identity_manifest()) - set(names))
    reports.append(_report(
        "generator:coverage", inputs, statistic=float(len(missing)),
        tolerance=0.0, detail={"missing": missing}))
    return reports


# determinant-ratio flow: time derivative of log Zbar + J/2 against 2 N_t
# along explicit drivings, with a halving refinement of the residual


def _flow_driving(kind: str, amp: float, times: np.ndarray) -> np.ndarray:
    if kind == "constant":
        return np.full(times.shape, amp)
    if kind == "sinusoidal":
        return amp * np.sin(2.0 * np.pi * times / 0.2)
    raise ConfigError(f"unknown driving kind {kind!r}")


def _flow_residual(kind, amp, dt, t_eval, grid, n_tau, asm=None):
    n_max = max(round(t / dt) for t in t_eval)
    nodes = np.arange(n_max + 2) * dt
    xs = _flow_driving(kind, amp, nodes)
    if asm is None:
        asm = CachedAssembler(grid)

    def u(k):
        chain = SlitMapChain(xs[:k], np.full(k, dt), xi_current=float(xs[k]))
        return asm.logz(chain, n_tau) + 0.5 * _j_log(asm(chain))

    rels = []
    for t in t_eval:
        k = round(t / dt)
        if k < 1:
            raise ConfigError("evaluation time below one step")
        fd = (u(k + 1) - u(k - 1)) / (2.0 * dt)
        # the difference spans one step driven at xs[k-1] and one at xs[k],
        # so the target rate is evaluated at the midpoint driving; a node
        # value would add an O(dt * xs') off-centering bias
        xi_eff = 0.5 * (xs[k - 1] + xs[k])
        chain_k = SlitMapChain(xs[:k], np.full(k, dt), xi_current=float(xi_eff))
        nt = n_terms(asm(chain_k)).n_t
        rels.append(abs(fd - 2.0 * nt) / abs(nt))
    return max(rels), rels


def detratio_flow(kind: str = "constant", dt: float = 1e-3,
                  t_eval=(0.05, 0.1, 0.15), grid: MassProfile | None = None,
                  n_tau: int = 8, amp: float | None = None,
                  rel_tol: float = 1e-2, halving_tol: float = 0.6) -> list:
    """Centered time derivative of the determinant-ratio log vs 2 N_t.

    Two reports: the worst relative residual at step dt, and the refinement
    ratio residual(dt/2) / residual(dt), which must drop below halving_tol
    (the residual is dominated by the dt^2 composition error, so halving
    the step should at least nearly quarter it).
    """
    if amp is None:
        amp = 0.3 if kind == "constant" else 0.4
    if grid is None:
        grid = MassProfile.square_grid(
            (-1.0, 1.0, 1.0, 2.0), 12, 12,
            lambda z: 1.0 + 0.5 * np.sin(z.real + z.imag))
    inputs = _digest({"check": "detratio-flow", "kind": kind, "dt": dt,
                      "t_eval": tuple(t_eval), "n_tau": n_tau, "amp": amp})
    t0 = time.perf_counter()
    stat, rels = _flow_residual(kind, amp, dt, t_eval, grid, n_tau)
    r1 = _report(f"detratio-flow:{kind}:residual", inputs, statistic=stat,
                 tolerance=rel_tol, runtime=time.perf_counter() - t0,
                 detail={"dt": dt, "relative_residuals": rels})
    t0 = time.perf_counter()
    stat_half, rels_half = _flow_residual(kind, amp, dt / 2.0, t_eval, grid,
                                          n_tau)
    r2 = _report(f"detratio-flow:{kind}:refinement", inputs,
                 statistic=stat_half / stat, tolerance=halving_tol,
                 runtime=time.perf_counter() - t0,
                 detail={"dt_half": dt / 2.0,
                         "relative_residuals": rels_half})
    return [r1, r2]


# Monte Carlo martingale checks: ensembles replayed from recorded drivings,
# observables evaluated at checkpoints, sample mean against the start value


@dataclass
class _Snapshot:
    node: int
    xi: np.ndarray
    cells: np.ndarray | None
    cell_dg: np.ndarray | None
    probes: np.ndarray | None
    probe_dg: np.ndarray | None
    reals: np.ndarray | None


def _replay_snapshots(paths, dt, centers=None, probes=None, reals=None,
                      stop=None, nodes=()) -> dict:
    """Advance recorded drivings through the slit maps, snapshot at nodes.

    Tracks grid-cell images, complex probe images with derivatives, and
    real boundary points. A path that stops (recorded truncation, or the
    stop rule on a tracked pair of boundary points) freezes; later
    snapshots carry its stopped state, which is what optional stopping
    needs. stop is (index_a, index_b, gap): the pair straddling the driving
    value or coming within gap of it freezes the path.
    """
    n = len(paths)
    lens = np.array([p.n_steps for p in paths])
    n_max = int(lens.max())
    xi = np.zeros((n, n_max + 1))
    for i, p in enumerate(paths):
        xi[i, :lens[i] + 1] = p.xi
    cur_xi = xi[:, 0].copy()
    cells = cell_dg = pim = pdg = rim = None
    if centers is not None and len(centers):
        cells = np.tile(np.asarray(centers, complex), (n, 1))
        cell_dg = np.ones_like(cells)
    if probes is not None and len(probes):
        pim = np.tile(np.asarray(probes, complex), (n, 1))
        pdg = np.ones_like(pim)
    if reals is not None and len(reals):
        rim = np.tile(np.asarray(reals, float), (n, 1))
    active = np.ones(n, bool)
    want = set(int(k) for k in nodes)
    snaps = {}

    def grab(node):
        snaps[node] = _Snapshot(
            node=node, xi=cur_xi.copy(),
            cells=None if cells is None else cells.copy(),
            cell_dg=None if cell_dg is None else cell_dg.copy(),
            probes=None if pim is None else pim.copy(),
            probe_dg=None if pdg is None else pdg.copy(),
            reals=None if rim is None else rim.copy())

    if 0 in want:
        grab(0)
    for k in range(n_max):
        act = active & (k < lens)
        if stop is not None and act.any():
            ia, ib, _gap = stop
            da = rim[act, ia] - xi[act, k]
            db = rim[act, ib] - xi[act, k]
            hit = (np.minimum(np.abs(da), np.abs(db)) < EPS_SWALLOW) | (da * db < 0.0)
            if hit.any():
                active[np.where(act)[0][hit]] = False
                act = active & (k < lens)
        idx = np.where(act)[0]
        if len(idx):
            x = xi[idx, k][:, None]
            if cells is not None:
                w_old = cells[idx]
                w_new = step_points(w_old, x, dt)
                cell_dg[idx] *= step_dg_factor(w_old, w_new, x)
                cells[idx] = w_new
            if pim is not None:
                w_old = pim[idx]
                w_new = step_points(w_old, x, dt)
                pdg[idx] *= step_dg_factor(w_old, w_new, x)
                pim[idx] = w_new
            if rim is not None:
                rim[idx] = step_reals(rim[idx], x, dt)
            cur_xi[idx] = xi[idx, k + 1]
        if stop is not None and len(idx):
            ia, ib, gap = stop
            ga = rim[idx, ia] - cur_xi[idx]
            gb = rim[idx, ib] - cur_xi[idx]
            out = (np.minimum(np.abs(ga), np.abs(gb)) < gap) | (ga * gb < 0.0)
            active[idx[out]] = False
        if (k + 1) in want:
            grab(k + 1)
    return snaps


MC_OBSERVABLES = ("phi", "green", "x2", "exp_char", "z4", "z2tilde",
                  "phi_m", "green_m", "gamma_ratio")

_MC_MODE = {
    "phi": "critical-chordal", "green": "critical-chordal",
    "x2": "critical-chordal", "exp_char": "critical-chordal",
    "z4": "critical-chordal", "z2tilde": "critical-chordal",
    "phi_m": "massive-sle4", "green_m": "massive-sle4",
    "gamma_ratio": "massive-dipolar-sle2",
}
_MC_KAPPA = {"z2tilde": 2.0, "gamma_ratio": 2.0}


def _nearest_cell(grid: MassProfile, z: complex) -> int:
    return int(np.argmin(np.abs(grid.centers - z)))


def martingale_mc(observable: str, spec: SimulationSpec, n_paths: int,
                  checkpoints=(0.1, 0.25, 0.5), params: dict | None = None) -> list:
    """Sample mean of an observable at checkpoints against its start value.

    One report per checkpoint; statistic = mean - reference, tolerance =
    3 * stderr. Stopped paths contribute their frozen value. Ratio
    observables (z4, z2tilde) have reference 1. Paths whose replayed state
    degenerates at a checkpoint are excluded and counted.
    """
    if observable not in MC_OBSERVABLES:
        raise ConfigError(f"unknown observable {observable!r}")
    if spec.mode != _MC_MODE[observable]:
        raise ConfigError(
            f"{observable} needs mode {_MC_MODE[observable]!r}, got {spec.mode!r}")
    if spec.kappa != _MC_KAPPA.get(observable, 4.0):
        raise ConfigError(
            f"{observable} needs kappa {_MC_KAPPA.get(observable, 4.0)}")
    params = dict(params or {})
    n_tau = int(params.pop("n_tau", 8))

    nodes = []
    for t in checkpoints:
        k = round(t / spec.dt)
        if abs(k * spec.dt - t) > 1e-9 or not 1 <= k <= spec.n_steps:
            raise ConfigError(f"checkpoint {t} is not a step multiple inside (0, T]")
        nodes.append(k)

    grid = None
    probes: tuple = ()
    reals: tuple = ()
    stop = None
    if observable in ("phi", "x2"):
        probes = (complex(params.pop("z", 2.0j)),)
    elif observable == "green":
        probes = (complex(params.pop("z", 2.0j)),
                  complex(params.pop("w", -0.8 + 1.7j)))
    elif observable == "exp_char":
        probes = tuple(map(complex, params.pop("points", (2.0j, -0.8 + 1.7j))))
        coeffs = tuple(map(float, params.pop("coeffs", (0.25, -0.4))))
        grid = params.pop("mass", None)
    elif observable == "z4":
        grid = params.pop("mass", None)
        if grid is None:
            raise ConfigError("z4 needs a mass grid in params['mass']")
    elif observable == "z2tilde":
        grid = params.pop("mass", None)
        if grid is None:
            raise ConfigError("z2tilde needs a mass grid in params['mass']")
        ma, mb = params.pop("marks", (2.0, 4.0))
        reals = (float(ma), float(mb))
        gap = params.pop("stop_gap", None)
        stop = (0, 1, float(gap) if gap is not None
                else math.sqrt(8.0 * spec.kappa * spec.dt))
    elif observable in ("phi_m", "green_m"):
        grid = spec.mass
    elif observable == "gamma_ratio":
        grid = spec.mass
        c = params.pop("c", None)
        c = float(c) if c is not None else 0.5 * (spec.a + spec.b)
        if not spec.a < c < spec.b:
            raise ConfigError("interior mark must sit between the outer marks")
        reals = (spec.a, c, spec.b)
        stop = (0, 2, spec.stop_gap)
    if params:
        raise ConfigError(f"unused parameters {sorted(params)}")

    cell_idx = pair_idx = None
    if observable == "phi_m":
        cell_idx = _nearest_cell(grid, 2.0j)
    if observable == "green_m":
        pair_idx = (_nearest_cell(grid, 2.0j), _nearest_cell(grid, -0.8 + 1.7j))

    inputs = _digest({
        "check": "mc", "observable": observable, "seed": spec.seed,
        "kappa": spec.kappa, "T": spec.T, "dt": spec.dt, "mode": spec.mode,
        "n_paths": n_paths, "checkpoints": tuple(checkpoints),
        "n_tau": n_tau, "probes": probes, "reals": reals,
    })

    t_start = time.perf_counter()
    ens = ensemble(spec, n_paths)
    paths = ens.paths
    flag_counts = {0: 0, 1: 0, 2: 0}
    for p in paths:
        flag_counts[int(p.flags[-1])] += 1

    centers = grid.centers if grid is not None else None
    snaps = _replay_snapshots(paths, spec.dt, centers=centers, probes=probes,
                              reals=reals, stop=stop, nodes=nodes)

    def evaluate(xi_now, cell_img, cell_dg, probe_img, probe_dg, real_img):
        if observable == "phi":
            h = probe_img[0] - xi_now
            return LAMBDA_C * math.atan2(h.imag, h.real)
        if observable == "green":
            # pair martingale: the Hadamard decay of the kernel compensates
            # the field product exactly, as 2 log rho does inside x2
            h1 = probe_img[0] - xi_now
            h2 = probe_img[1] - xi_now
            p1 = LAMBDA_C * math.atan2(h1.imag, h1.real)
            p2 = LAMBDA_C * math.atan2(h2.imag, h2.real)
            return p1 * p2 + green_half_plane(h1, h2)
        if observable == "x2":
            h = probe_img[0] - xi_now
            phi_v = LAMBDA_C * math.atan2(h.imag, h.real)
            rho_v = 2.0 * h.imag / abs(probe_dg[0])
            return phi_v**2 + 2.0 * math.log(rho_v)
        if observable == "exp_char":
            hs = probe_img - xi_now
            u = 0.0
            for j, c in enumerate(coeffs):
                u += c * LAMBDA_C * math.atan2(hs[j].imag, hs[j].real)
                for k in range(j + 1, len(coeffs)):
                    u += c * coeffs[k] * green_half_plane(hs[j], hs[k])
                rho_v = 2.0 * hs[j].imag / abs(probe_dg[j])
                u += c**2 * math.log(rho_v)
            if grid is not None:
                cache = assemble_from_images(grid, cell_img - xi_now,
                                             cell_dg, xi_now)
                u += z4(cache, n_tau).z4_log
            return u
        cache = assemble_from_images(grid, cell_img - xi_now, cell_dg, xi_now)
        if observable == "z4":
            return z4(cache, n_tau).z4_log
        if observable == "z2tilde":
            marks = MarkedBoundary(reals[0], reals[1],
                                   float(real_img[0]), float(real_img[1]))
            return z2(cache, marks, n_tau)
        if observable == "phi_m":
            massive_green(cache)
            return float(cache.phi_m[cell_idx])
        if observable == "green_m":
            massive_green(cache)
            i, j = pair_idx
            return float(cache.phi_m[i] * cache.phi_m[j] + cache.gm[i, j])
        if observable == "gamma_ratio":
            num = MarkedBoundary(reals[0], reals[1],
                                 float(real_img[0]), float(real_img[1]))
            den = MarkedBoundary(reals[0], reals[2],
                                 float(real_img[0]), float(real_img[2]))
            return gamma_m(cache, num) / gamma_m(cache, den)
        raise ConfigError(observable)

    n_pr = len(probes)
    base = evaluate(
        0.0,
        centers.copy() if centers is not None else None,
        np.ones(len(centers), complex) if centers is not None else None,
        np.asarray(probes, complex) if n_pr else None,
        np.ones(n_pr, complex) if n_pr else None,
        np.asarray(reals, float) if reals else None)
    is_ratio = observable in ("z4", "z2tilde")
    reference = 1.0 if is_ratio else base

    reports = []
    setup_time = time.perf_counter() - t_start
    for t, node in zip(checkpoints, nodes):
        t0 = time.perf_counter()
        snap = snaps[node]
        vals = []
        excluded = 0
        for i in range(n_paths):
            try:
                v = evaluate(
                    snap.xi[i],
                    snap.cells[i] if snap.cells is not None else None,
                    snap.cell_dg[i] if snap.cell_dg is not None else None,
                    snap.probes[i] if snap.probes is not None else None,
                    snap.probe_dg[i] if snap.probe_dg is not None else None,
                    snap.reals[i] if snap.reals is not None else None)
                if is_ratio:
                    v = math.exp(v - base)
                if not math.isfinite(v):
                    raise ValueError("non-finite value")
                vals.append(v)
            except Exception:
                excluded += 1
        vals = np.array(vals)
        mean = float(vals.mean())
        stderr = float(vals.std(ddof=1) / math.sqrt(len(vals)))
        reports.append(_report(
            f"mc:{observable}:t={t:g}", inputs,
            statistic=mean - reference, tolerance=3.0 * stderr,
            stderr=stderr,
            runtime=setup_time + time.perf_counter() - t0,
            detail={"mean": mean, "reference": reference,
                    "n_effective": int(len(vals)), "n_excluded": excluded,
                    "flag_counts": {str(k): v for k, v in flag_counts.items()}}))
        setup_time = 0.0
    return reports


# lattice against continuum: killed-walk exit ratios vs the two-mark
# functional ratio, swept over spacings at fixed physical geometry


def lattice_vs_continuum(spacings=(0.5, 0.25, 0.125), radius: float = 32.0,
                         sub=(1.0, 2.0), arc=(1.0, 3.0), m2=None,
                         mass_scale: float = 0.25,
                         grid_box=(0.0, 0.05, 4.0, 3.05), grid_shape=(40, 30),
                         tol_finest: float = 0.05) -> list:
    """Exit-ratio comparison over a spacing sweep on the half-disk.

    Massless target: the closed-form two-mark ratio. Massive target: the
    solved continuum functional ratio with lattice killing density
    mass_scale * m2. Two reports per call: the relative error at the finest
    spacing, and the worst increase of |error| along the sweep (zero when
    the sweep is monotone).
    """
    from .lattice import half_disk_domain, subinterval_probability

    if m2 is None:
        target = _mark_ratio_target(sub, arc, None)
    else:
        grid = MassProfile.square_grid(grid_box, grid_shape[0], grid_shape[1], m2)
        target = _mark_ratio_target(sub, arc, grid)
    inputs = _digest({
        "check": "lattice", "radius": radius, "spacings": tuple(spacings),
        "sub": tuple(sub), "arc": tuple(arc), "massive": m2 is not None,
        "mass_scale": mass_scale,
    })
    t0 = time.perf_counter()
    rels = []
    values = []
    for a in spacings:
        if m2 is None:
            dom = half_disk_domain(radius, a)
        else:
            dom = half_disk_domain(
                radius, a, rho=lambda x, y: mass_scale * m2(complex(x, y)))
        p = subinterval_probability(dom, tuple(sub), tuple(arc))
        values.append(p)
        rels.append((p - target) / target)
    elapsed = time.perf_counter() - t0
    tag = "massive" if m2 is not None else "massless"
    detail = {"radius": radius, "spacings": list(spacings), "target": target,
              "lattice_values": values, "relative_errors": rels}
    finest = _report(f"lattice:{tag}:finest", inputs, statistic=rels[-1],
                     tolerance=tol_finest, runtime=elapsed, detail=detail)
    bumps = [abs(rels[i + 1]) - abs(rels[i]) for i in range(len(rels) - 1)]
    mono = _report(f"lattice:{tag}:monotone", inputs,
                   statistic=max(0.0, max(bumps)) if bumps else 0.0,
                   tolerance=0.0, runtime=0.0, detail=detail)
    return [finest, mono]


def _mark_ratio_target(sub, arc, grid) -> float:
    chain = SlitMapChain((), ())
    m_sub = MarkedBoundary(sub[0], sub[1], sub[0], sub[1])
    m_arc = MarkedBoundary(arc[0], arc[1], arc[0], arc[1])
    if grid is None:
        return gamma0(chain, m_sub) / gamma0(chain, m_arc)
    cache = assemble(chain, grid)
    return gamma_m(cache, m_sub) / gamma_m(cache, m_arc)


# trace splitting: side classification of probes against the traced curve
# and the cross-side attenuation of the massive Green function


def trace_polyline(path, upto: int | None = None, eps: float = 1e-6) -> np.ndarray:
    """Tip positions of every prefix state, node 0 at the origin."""
    n = path.n_steps if upto is None else int(upto)
    tips = [0.0 + 0.0j]
    for k in range(1, n + 1):
        tips.append(trace_tip(path.chain(upto=k), eps))
    return np.asarray(tips, complex)


def classify_sides(polyline: np.ndarray, probes, margin: float):
    """Side labels (+1/-1) for probes against the curve, with an
    ambiguity mask for probes within margin of it.

    The curve is closed off by a vertical ray from its tip, and the side
    is the parity of leftward horizontal crossings; labels are consistent
    for any curve from the real line.
    """
    probes = np.asarray(probes, complex)
    ext = np.append(polyline, polyline[-1].real + 1e6j)
    a, b = ext[:-1], ext[1:]
    seg = b - a
    seg_len2 = np.maximum(np.abs(seg) ** 2, 1e-300)
    labels = np.zeros(len(probes), int)
    ambiguous = np.zeros(len(probes), bool)
    body = polyline[:-1]
    body_seg = polyline[1:] - body
    body_len2 = np.maximum(np.abs(body_seg) ** 2, 1e-300)
    for i, p in enumerate(probes):
        t = np.clip(((p - body).conj() * body_seg).real / body_len2, 0.0, 1.0)
        dist = np.min(np.abs(p - (body + t * body_seg))) if len(body) else np.inf
        ambiguous[i] = dist < margin
        up = (a.imag > p.imag) != (b.imag > p.imag)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = a.real + (p.imag - a.imag) * seg.real / np.where(
                seg.imag == 0.0, np.inf, seg.imag)
        crossings = int(np.sum(up & (x_int < p.real)))
        labels[i] = 1 if crossings % 2 else -1
    return labels, ambiguous


def default_splitting_run(seed: int = 424243, T: float = 2.0,
                          dt: float = 2.5e-3):
    """Massive path with mass support above the reachable hull."""
    grid = MassProfile.square_grid((-3.0, 3.3, 3.0, 5.3), 20, 20, 1.0)
    spec = SimulationSpec(kappa=4.0, T=T, dt=dt, seed=seed,
                          mode="massive-sle4", mass=grid, drift_refresh=4)
    return simulate(spec), grid


def green_splitting(path=None, grid: MassProfile | None = None,
                    times=(1.0, 2.0), probes=None,
                    same_side_floor: float = 0.0) -> list:
    """Massive Green attenuation across the traced curve.

    At each of the two times the probes are classified against that time's
    trace; the statistic is the growth of the maximal cross-side |G_m|
    from the earlier to the later time (zero when it decays, as it must
    once the curve separates the probes further). A second report checks
    the same-side minimum at the later time stays above same_side_floor.
    A state with no curve yet is reported as skipped.
    """
    if path is None or grid is None:
        path, grid = default_splitting_run()
    if probes is None:
        xs = np.linspace(-3.5, 3.5, 8)
        ys = np.linspace(0.4, 3.0, 6)
        probes = [complex(x, y) for y in ys for x in xs]
    probes = np.asarray(probes, complex)
    dt = float(path.times[1] - path.times[0])
    inputs = _digest({
        "check": "green-splitting", "times": tuple(times),
        "n_steps": path.n_steps, "dt": dt, "n_probes": len(probes),
    })
    ks = [round(t / dt) for t in times]
    if ks[0] < 1:
        return [_report("green-splitting:cross-side", inputs, 0.0, 0.0,
                        detail={"status": "skipped: no curve at the first time"})]
    if ks[1] > path.n_steps:
        return [_report("green-splitting:cross-side", inputs,
                        statistic=float("nan"), tolerance=0.0,
                        detail={"status": "path stopped before the later time",
                                "n_steps": path.n_steps})]

    t0 = time.perf_counter()
    stats = {}
    for t, k in zip(times, ks):
        chain = path.chain(upto=k)
        poly = trace_polyline(path, upto=k)
        margin = 2.0 * float(np.max(np.abs(np.diff(poly))))
        labels, ambiguous = classify_sides(poly, probes, margin)
        ok = ~ambiguous
        for i in np.where(ok)[0]:
            try:
                eval_h(chain, complex(probes[i]))
            except SwallowedPoint:
                ok[i] = False
        cache = assemble(chain, grid)
        massive_green(cache)
        idx = np.where(ok)[0]
        cross_max = 0.0
        same_min = math.inf
        n_cross = 0
        for ii in range(len(idx)):
            for jj in range(ii + 1, len(idx)):
                i, j = idx[ii], idx[jj]
                g = abs(green_m_at(cache, complex(probes[i]),
                                   complex(probes[j])))
                if labels[i] != labels[j]:
                    cross_max = max(cross_max, g)
                    n_cross += 1
                else:
                    same_min = min(same_min, g)
        stats[t] = {"cross_max": cross_max, "same_min": same_min,
                    "n_cross_pairs": n_cross, "n_usable": int(len(idx)),
                    "n_ambiguous": int(ambiguous.sum()), "margin": margin}
    elapsed = time.perf_counter() - t0
    t1, t2 = times
    detail = {"per_time": {f"{t:g}": stats[t] for t in times}}
    cross = _report(
        "green-splitting:cross-side", inputs,
        statistic=max(0.0, stats[t2]["cross_max"] - stats[t1]["cross_max"]),
        tolerance=0.0, runtime=elapsed, detail=detail)
    same = _report(
        "green-splitting:same-side", inputs,
        statistic=max(0.0, same_side_floor - stats[t2]["same_min"]),
        tolerance=0.0, runtime=0.0,
        detail={"floor": same_side_floor,
                "same_min_later": stats[t2]["same_min"]})
    return [cross, same]

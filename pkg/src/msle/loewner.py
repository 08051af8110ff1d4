"""Discrete Loewner evolution by exact vertical-slit maps.

The chordal Loewner equation dg_t = 2/(g_t - xi_t) with piecewise constant
driving integrates exactly over one step to

    g_{t+dt}(z) = xi + sqrt((g_t(z) - xi)^2 + 4 dt),

square root taken with positive imaginary part. Composing one such map per
step keeps the evolution conformal, analytically differentiable and
analytically invertible (trace extraction). Time is half-plane capacity:
g_t(z) = z + 2t/z + O(z^-2).

All massless observables live here: the one-point function phi, the Poisson
kernel theta, the conformal radius rho, the xi-derivative kernel q0, the
Green function, the arc kernel psi0, the two-mark functional gamma0 and the
dipolar drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BranchFailure, CoincidentPoints, MarkCollision, SwallowedPoint

EPS_SWALLOW = 1e-9
LAMBDA_C = np.sqrt(2.0)

FLAG_OK = 0
FLAG_HULL = 1
FLAG_MARK = 2


def _as_float_array(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return a


@dataclass(frozen=True)
class DrivingPath:
    """Time grid, driving values and bookkeeping of one simulated path.

    times[k] is capacity time, xi[k] the driving value at times[k]; step k
    spans [times[k], times[k+1]) and the slit map of that step is driven by
    xi[k]. drift_log records the drift in force at each node, flags records
    truncation events (FLAG_OK / FLAG_HULL / FLAG_MARK).
    """

    kappa: float
    times: np.ndarray
    xi: np.ndarray
    drift_log: np.ndarray | None = None
    flags: np.ndarray | None = None

    def __post_init__(self):
        times = _as_float_array(self.times, "times")
        xi = _as_float_array(self.xi, "xi")
        if len(times) != len(xi):
            raise ValueError("times and xi must have equal length")
        if len(times) == 0 or times[0] != 0.0:
            raise ValueError("times must start at 0")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        if xi[0] != 0.0:
            raise ValueError("xi[0] must be 0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xi", xi)
        if self.drift_log is not None:
            d = _as_float_array(self.drift_log, "drift_log")
            if len(d) != len(times):
                raise ValueError("drift_log length must match times")
            object.__setattr__(self, "drift_log", d)
        if self.flags is not None:
            f = np.asarray(self.flags, dtype=int)
            if len(f) != len(times):
                raise ValueError("flags length must match times")
            object.__setattr__(self, "flags", f)
        for arr in (self.times, self.xi, self.drift_log, self.flags):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def truncated(self) -> bool:
        return self.flags is not None and bool(np.any(self.flags != FLAG_OK))

    def chain(self, upto: int | None = None) -> "SlitMapChain":
        """Replay the first `upto` steps; current driving is xi[upto]."""
        n = self.n_steps if upto is None else int(upto)
        if not 0 <= n <= self.n_steps:
            raise ValueError("upto out of range")
        return SlitMapChain(
            xi_steps=self.xi[:n].copy(),
            dt_steps=np.diff(self.times[: n + 1]),
            xi_current=float(self.xi[n]),
        )


@dataclass(frozen=True)
class SlitMapChain:
    """Composed discrete Loewner map: steps (xi_k, dt_k), oldest applied first.

    xi_current is the driving value of the present state (h = g - xi_current);
    it defaults to the newest appended driving but may be overridden with
    with_xi, which is how the simulation holds the post-step driving value and
    how xi-derivatives are finite-differenced without touching the hull.
    """

    xi_steps: np.ndarray = field(default_factory=lambda: np.empty(0))
    dt_steps: np.ndarray = field(default_factory=lambda: np.empty(0))
    xi_current: float = 0.0

    def __post_init__(self):
        xs = _as_float_array(self.xi_steps, "xi_steps")
        ds = _as_float_array(self.dt_steps, "dt_steps")
        if len(xs) != len(ds):
            raise ValueError("xi_steps and dt_steps must have equal length")
        if np.any(ds <= 0):
            raise ValueError("step durations must be positive")
        object.__setattr__(self, "xi_steps", xs)
        object.__setattr__(self, "dt_steps", ds)
        xs.flags.writeable = False
        ds.flags.writeable = False

    @property
    def n_steps(self) -> int:
        return len(self.xi_steps)

    @property
    def total_time(self) -> float:
        return float(np.sum(self.dt_steps))

    def with_xi(self, xi: float) -> "SlitMapChain":
        return SlitMapChain(self.xi_steps, self.dt_steps, float(xi))


def advance(chain: SlitMapChain, xi_next: float, dt: float) -> SlitMapChain:
    """Append one slit-map step driven at xi_next for duration dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return SlitMapChain(
        np.append(chain.xi_steps, float(xi_next)),
        np.append(chain.dt_steps, float(dt)),
        float(xi_next),
    )


# vectorized single-step kernels, shared with the SDE engine


def step_points(w: np.ndarray, xi, dt) -> np.ndarray:
    """One forward slit-map step on upper-half-plane points."""
    v = w - xi
    s = np.sqrt(v * v + 4.0 * dt)
    s = np.where(s.imag < 0.0, -s, s)
    return xi + s


def step_reals(u: np.ndarray, xi, dt) -> np.ndarray:
    """One forward step on real boundary points, side-preserving branch."""
    v = u - xi
    return xi + np.sign(v) * np.sqrt(v * v + 4.0 * dt)


def step_dg_factor(w_old: np.ndarray, w_new: np.ndarray, xi) -> np.ndarray:
    """Derivative of one step map, (w - xi)/sqrt((w - xi)^2 + 4 dt)."""
    return (w_old - xi) / (w_new - xi)


def inverse_step(u: np.ndarray, xi, dt) -> np.ndarray:
    """One inverse step, z = xi + sqrt((u - xi)^2 - 4 dt), branch -> u at infinity."""
    v = np.asarray(u) - xi
    out = np.where(
        v == 0.0,
        2j * np.sqrt(dt) + 0.0 * v,
        v * np.sqrt(1.0 - 4.0 * dt / np.where(v == 0.0, 1.0, v) ** 2),
    )
    return xi + out


def _eval_g_complex(chain: SlitMapChain, z: np.ndarray, eps_swallow: float):
    """Forward images of complex points; returns (g, swallowed mask)."""
    w = np.array(z, dtype=complex, copy=True)
    swallowed = w.imag < eps_swallow
    for xi_k, dt_k in zip(chain.xi_steps, chain.dt_steps):
        live = ~swallowed
        if not np.any(live):
            break
        w[live] = step_points(w[live], xi_k, dt_k)
        swallowed |= w.imag < eps_swallow
    return w, swallowed


def _eval_g_real(chain: SlitMapChain, u: np.ndarray, eps_swallow: float):
    """Forward images of real boundary points; swallowed when the driving
    collides with or crosses the tracked image."""
    x = np.array(u, dtype=float, copy=True)
    side = np.sign(x - (chain.xi_steps[0] if chain.n_steps else chain.xi_current))
    swallowed = side == 0.0
    for xi_k, dt_k in zip(chain.xi_steps, chain.dt_steps):
        live = ~swallowed
        if not np.any(live):
            break
        d = x - xi_k
        hit = live & ((np.abs(d) < eps_swallow) | (np.sign(d) != side))
        swallowed |= hit
        live &= ~hit
        x[live] = step_reals(x[live], xi_k, dt_k)
    swallowed |= (~swallowed) & (np.sign(x - chain.xi_current) != side)
    return x, swallowed


def eval_g(chain: SlitMapChain, z: complex, eps_swallow: float = EPS_SWALLOW) -> complex:
    """Image of z under the composed map g_t."""
    if np.imag(z) == 0.0:
        x, sw = _eval_g_real(chain, np.array([np.real(z)]), eps_swallow)
        if sw[0]:
            raise SwallowedPoint(f"boundary point {z} swallowed by the hull")
        return float(x[0])
    g, sw = _eval_g_complex(chain, np.array([z]), eps_swallow)
    if sw[0]:
        raise SwallowedPoint(f"point {z} swallowed by the hull")
    return complex(g[0])


def eval_h(chain: SlitMapChain, z: complex, eps_swallow: float = EPS_SWALLOW) -> complex:
    """Shifted map h_t = g_t - xi_current (tip at the origin)."""
    return eval_g(chain, z, eps_swallow) - chain.xi_current


def eval_g_increment(chain: SlitMapChain, z: complex) -> complex:
    """g_t(z) - z without cancellation, for far-field points.

    Each step adds sqrt(v^2 + 4 dt) - v = 4 dt / (sqrt(v^2 + 4 dt) + v); both
    terms of the denominator have positive imaginary part, so the increment
    stays accurate even when |z| dwarfs the hull and direct subtraction of
    eval_g(z) - z would lose every significant digit.
    """
    if np.imag(z) <= 0.0:
        raise ValueError("increment form needs an interior point")
    d = 0.0 + 0.0j
    for xi_k, dt_k in zip(chain.xi_steps, chain.dt_steps):
        v = (z - xi_k) + d
        s = np.sqrt(v * v + 4.0 * dt_k)
        if s.imag < 0.0:
            s = -s
        d = d + 4.0 * dt_k / (s + v)
    return complex(d)


def eval_dg(chain: SlitMapChain, z: complex, eps_swallow: float = EPS_SWALLOW) -> complex:
    """Derivative g_t'(z) by the chain rule over step maps."""
    if np.imag(z) == 0.0:
        h, dg, sw = eval_h_dg_array(chain, np.array([complex(z)]), eps_swallow, real=True)
        if sw[0]:
            raise SwallowedPoint(f"boundary point {z} swallowed by the hull")
        return float(dg[0].real)
    h, dg, sw = eval_h_dg_array(chain, np.array([z]), eps_swallow)
    if sw[0]:
        raise SwallowedPoint(f"point {z} swallowed by the hull")
    return complex(dg[0])


def eval_h_dg_array(chain: SlitMapChain, z: np.ndarray, eps_swallow: float = EPS_SWALLOW, real: bool = False):
    """h images and derivatives of many points in one pass.

    Returns (h, dg, swallowed). Swallowed entries hold their last value and
    must be masked by the caller.
    """
    if real:
        x = np.asarray(z).real.astype(float).copy()
        dg = np.ones_like(x)
        side = np.sign(x - (chain.xi_steps[0] if chain.n_steps else chain.xi_current))
        swallowed = side == 0.0
        for xi_k, dt_k in zip(chain.xi_steps, chain.dt_steps):
            live = ~swallowed
            if not np.any(live):
                break
            d = x - xi_k
            hit = live & ((np.abs(d) < eps_swallow) | (np.sign(d) != side))
            swallowed |= hit
            live &= ~hit
            xn = step_reals(x[live], xi_k, dt_k)
            dg[live] *= (x[live] - xi_k) / (xn - xi_k)
            x[live] = xn
        swallowed |= (~swallowed) & (np.sign(x - chain.xi_current) != side)
        return (x - chain.xi_current).astype(complex), dg.astype(complex), swallowed
    w = np.array(z, dtype=complex, copy=True)
    dg = np.ones_like(w)
    swallowed = w.imag < eps_swallow
    for xi_k, dt_k in zip(chain.xi_steps, chain.dt_steps):
        live = ~swallowed
        if not np.any(live):
            break
        wn = step_points(w[live], xi_k, dt_k)
        dg[live] *= step_dg_factor(w[live], wn, xi_k)
        w[live] = wn
        swallowed |= w.imag < eps_swallow
    return w - chain.xi_current, dg, swallowed


def trace_tip(chain: SlitMapChain, eps: float = 1e-6) -> complex:
    """Tip gamma_t ~ g_t^{-1}(xi + i eps), inverse steps applied newest-first."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if chain.n_steps == 0:
        return complex(chain.xi_current, eps)
    u = complex(chain.xi_steps[-1], eps)
    for xi_k, dt_k in zip(chain.xi_steps[::-1], chain.dt_steps[::-1]):
        u = complex(inverse_step(u, xi_k, dt_k))
        if u.imag <= 0.0:
            raise BranchFailure(
                f"inverse step left the upper half plane (eps={eps} too large for dt={dt_k})"
            )
    return u


@dataclass(frozen=True)
class Observables0:
    phi: float
    theta: float
    rho: float
    q0: float


def observables0(chain: SlitMapChain, z: complex, eps_swallow: float = EPS_SWALLOW) -> Observables0:
    """Massless one-point observables at z through h = g - xi_current.

    phi = sqrt(2) arg h in [0, sqrt(2) pi]; theta = -Im 2/h; rho = 2 Im h/|h'|;
    q0 = -2 Im 1/h^2 (equals the exact xi-derivative of theta).
    """
    h, dg, sw = eval_h_dg_array(chain, np.array([z]), eps_swallow)
    if sw[0]:
        raise SwallowedPoint(f"point {z} swallowed by the hull")
    h0, dg0 = complex(h[0]), complex(dg[0])
    return Observables0(
        phi=float(LAMBDA_C * np.angle(h0)),
        theta=float(2.0 * h0.imag / abs(h0) ** 2),
        rho=float(2.0 * h0.imag / abs(dg0)),
        q0=float(-2.0 * (1.0 / h0**2).imag),
    )


def green_half_plane(u, v):
    """Dirichlet Green function of the upper half plane, -log|(u-v)/(u-vbar)|^2."""
    return -2.0 * np.log(np.abs((u - v) / (u - np.conj(v))))


def green0(chain: SlitMapChain, z: complex, w: complex, eps_swallow: float = EPS_SWALLOW) -> float:
    """Green function of the cut domain by conformal transport."""
    if abs(z - w) <= 1e-12 * max(1.0, abs(z), abs(w)):
        raise CoincidentPoints(f"green0 arguments coincide: {z}, {w}")
    img, sw = _eval_g_complex(chain, np.array([z, w]), eps_swallow)
    if sw.any():
        bad = z if sw[0] else w
        raise SwallowedPoint(f"point {bad} swallowed by the hull")
    return float(green_half_plane(img[0], img[1]))


@dataclass(frozen=True)
class MarkedBoundary:
    """Dipolar marks a < b (same side of 0) and their images under g_t."""

    a: float
    b: float
    a_t: float
    b_t: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("marks must satisfy a < b")
        if self.a <= 0.0 <= self.b:
            raise ValueError("marks must lie on one side of 0")
        if not self.a_t < self.b_t:
            raise ValueError("mark images must stay ordered")

    @classmethod
    def evaluate(cls, chain: SlitMapChain, a: float, b: float,
                 eps_swallow: float = EPS_SWALLOW) -> "MarkedBoundary":
        at = eval_g(chain, float(a), eps_swallow)
        bt = eval_g(chain, float(b), eps_swallow)
        return cls(a=float(a), b=float(b), a_t=at, b_t=bt)


def psi0(chain: SlitMapChain, marks: MarkedBoundary, z: complex,
         eps_swallow: float = EPS_SWALLOW) -> float:
    """Arc kernel: boundary value pi on (a_t, b_t), 0 on the rest of R.

    arg((g-b_t)/(g-a_t)) needs no branch bookkeeping: the Mobius ratio maps
    the upper half plane to itself, so the angle stays in (0, pi).
    """
    g = eval_g(chain, z, eps_swallow)
    return float(np.angle((g - marks.b_t) / (g - marks.a_t)))


def _mark_gaps(chain: SlitMapChain, marks: MarkedBoundary):
    xi = chain.xi_current
    ga, gb = marks.a_t - xi, marks.b_t - xi
    scale = max(1.0, abs(marks.a_t), abs(marks.b_t))
    if min(abs(ga), abs(gb)) < 1e-9 * scale or (marks.a_t < xi < marks.b_t):
        raise MarkCollision(
            f"driving {xi} too close to mark images [{marks.a_t}, {marks.b_t}]"
        )
    return ga, gb


def gamma0(chain: SlitMapChain, marks: MarkedBoundary) -> float:
    """Two-mark boundary functional |a_t - b_t| / |(xi - a_t)(xi - b_t)|.

    Positive sign convention; additive over adjacent subintervals. Equals the
    (1/delta) boundary limit of psi0 near the tip.
    """
    ga, gb = _mark_gaps(chain, marks)
    return float(abs((marks.a_t - marks.b_t) / (ga * gb)))


def drift0_dipolar(chain: SlitMapChain, marks: MarkedBoundary, kappa: float) -> float:
    """Critical dipolar drift ((6-kappa)/2)(1/(a_t-xi) + 1/(b_t-xi))."""
    ga, gb = _mark_gaps(chain, marks)
    return float(0.5 * (6.0 - kappa) * (1.0 / ga + 1.0 / gb))

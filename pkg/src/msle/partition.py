"""Determinant-ratio partition functions and off-critical drifts.

Everything is kept in log space. The zeta-regularized log-determinant
enters through a coupling-constant integral: with B = G0 M / 4pi,

    log det(I + tau B) = int_0^tau tr[(I + s B)^{-1} B] ds,

whose integrand per cell is the K kernel below. The additive constant
proportional to int m^2 (the per-cell 1 - 2 log r regularization term) is
time independent and set to zero: log_zbar keeps only the 2 log rho part of
the diagonal, so d/dt log_zbar = 2 n_hat_t holds with no stray constants.

Sign conventions: for nonnegative m^2 the mass correction suppresses the
partition function, K <= 0, n_t <= 0, n_hat_t >= 0, and the kappa=4 drift
F[m] is nonpositive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import MissingReference, SingularSystem
from .kernels import FOUR_PI, KernelCache, gamma_m, massive_green
from .loewner import LAMBDA_C, MarkedBoundary, drift0_dipolar, gamma0


def _weights8(cache: KernelCache) -> np.ndarray:
    return cache.grid.mass_weights / (8.0 * np.pi)


def k_kernel(cache: KernelCache, tau: float) -> np.ndarray:
    """Per-cell diagonal defect of the tau-scaled massive Green function.

    K_i(tau) = [G(tau) - G0]_ii with mass tau m^2, computed from the raw
    (unsymmetrized) solve so that sum_i K_i M_i / 4pi is exactly the
    derivative of log det(I + tau B) in the coupling integral.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    n = cache.grid.n_cells
    if n == 0 or tau == 0.0:
        return np.zeros(n)
    mw = cache.grid.mass_weights
    a_tau = np.eye(n) + tau * cache.g0 * (mw / FOUR_PI)[None, :]
    try:
        raw = lu_solve(lu_factor(a_tau), cache.g0)
    except Exception as exc:
        raise SingularSystem(f"tau-scaled Green solve failed: {exc}") from exc
    return -(tau / FOUR_PI) * ((raw * cache.g0) @ mw)


def tau_quadrature(n_tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    if n_tau < 2:
        raise ValueError("need at least 2 tau nodes")
    x, w = np.polynomial.legendre.leggauss(n_tau)
    return 0.5 * (x + 1.0), 0.5 * w


def log_zbar(cache: KernelCache, n_tau: int = 8) -> float:
    """log of the regularized determinant-ratio partition function,
    -sum_i (m2 A / 8pi)_i [2 log rho_i + int_0^1 K_i(tau) dtau]."""
    if cache.grid.n_cells == 0:
        return 0.0
    taus, ws = tau_quadrature(n_tau)
    integral = np.zeros(cache.grid.n_cells)
    for t, w in zip(taus, ws):
        integral += w * k_kernel(cache, t)
    return float(-np.sum(_weights8(cache) * (2.0 * np.log(cache.rho) + integral)))


@dataclass(frozen=True)
class NTerms:
    """Drift bookkeeping scalars: n_t <= 0, n_hat_t >= 0, j_t = J."""

    n_t: float
    n_hat_t: float
    j_t: float


def n_terms(cache: KernelCache) -> NTerms:
    massive_green(cache)
    w8 = _weights8(cache)
    n_hat = float(np.sum(w8 * cache.theta_m * cache.theta))
    n_t = float(np.sum(w8 * cache.theta * (cache.theta_m - cache.theta)))
    j_t = float(np.sum(2.0 * w8 * 2.0 * np.log(cache.rho)))
    return NTerms(n_t=n_t, n_hat_t=n_hat, j_t=j_t)


def n_t_double_integral(cache: KernelCache) -> float:
    """n_t evaluated from the double-sum form -2 sum w8 w8' theta theta' G[m]."""
    gm = massive_green(cache)
    if cache.grid.n_cells == 0:
        return 0.0
    w8t = _weights8(cache) * cache.theta
    return float(-2.0 * w8t @ gm @ w8t)


@dataclass(frozen=True)
class PartitionReport:
    """Log-space partition data at one chain state.

    z4_log is net of reference_log (0 unless a t=0 reference was
    subtracted); the raw value satisfies exactly

        z4_log + reference_log = log_zbar + j_term / 2 + y_log.
    """

    log_zbar: float
    j_term: float
    y_log: float
    z4_log: float
    n_t: float
    n_hat_t: float
    tau_nodes: tuple
    reference_log: float = 0.0


def z4(cache: KernelCache, n_tau: int = 8,
       reference: PartitionReport | None = None,
       normalized: bool = False) -> PartitionReport:
    """Partition report for the kappa=4 massive martingale.

    The raw z4_log is log_zbar - sum (m2 A / 8pi) phi Phi[m], assembled as
    log_zbar + j_term/2 + y_log so the stored parts recombine exactly. Pass
    normalized=True with the t=0 report of the same mass profile to anchor
    the martingale at 1.
    """
    massive_green(cache)
    taus, ws = tau_quadrature(n_tau)
    lz = log_zbar(cache, n_tau)
    w8 = _weights8(cache)
    if cache.grid.n_cells:
        j_term = float(np.sum(2.0 * w8 * 2.0 * np.log(cache.rho)))
        y = float(-np.sum(w8 * (cache.phi * cache.phi_m + 2.0 * np.log(cache.rho))))
    else:
        j_term = 0.0
        y = 0.0
    nt = n_terms(cache)
    ref = 0.0
    if normalized:
        if reference is None:
            raise MissingReference(
                "normalized z4 needs the t=0 report of this mass profile"
            )
        ref = reference.z4_log + reference.reference_log
    return PartitionReport(
        log_zbar=lz,
        j_term=j_term,
        y_log=y,
        z4_log=lz + 0.5 * j_term + y - ref,
        n_t=nt.n_t,
        n_hat_t=nt.n_hat_t,
        tau_nodes=tuple(zip(taus.tolist(), ws.tolist())),
        reference_log=ref,
    )


def drift4(cache: KernelCache, first_order: bool = False) -> float:
    """Off-critical kappa=4 drift -2 sqrt(2) sum (m2 A / 4pi) Theta[m] phi.

    first_order=True drops the transport (the O(m^2) form); the full drift
    differs from it at O(m^4).
    """
    massive_green(cache)
    if cache.grid.n_cells == 0:
        return 0.0
    w4 = cache.grid.mass_weights / FOUR_PI
    field = cache.phi if first_order else cache.phi_m
    return float(-2.0 * LAMBDA_C * np.sum(w4 * cache.theta * field))


def drift4_forms(cache: KernelCache) -> tuple[float, float]:
    """Both symmetric writings of drift4; equal because M A^{-1} is symmetric."""
    massive_green(cache)
    if cache.grid.n_cells == 0:
        return 0.0, 0.0
    w4 = cache.grid.mass_weights / FOUR_PI
    via_phi_m = float(-2.0 * LAMBDA_C * np.sum(w4 * cache.theta * cache.phi_m))
    via_theta_m = float(-2.0 * LAMBDA_C * np.sum(w4 * cache.theta_m * cache.phi))
    return via_phi_m, via_theta_m


def z2(cache: KernelCache, marks: MarkedBoundary, n_tau: int = 8) -> float:
    """log of the chordal kappa=2 martingale: determinant ratio (power +1)
    times the massive two-mark functional, -2 log_zbar + log gamma_m."""
    g = gamma_m(cache, marks)
    if g <= 0.0:
        raise SingularSystem(
            f"gamma_m = {g} is not positive; mass too strong for the log form"
        )
    return float(-2.0 * log_zbar(cache, n_tau) + np.log(g))


def xi_gradient_gamma_m(cache: KernelCache, marks: MarkedBoundary) -> float:
    """Closed-form d/dxi of gamma_m: the massless part differentiates to
    gamma0 F0 / 2 and the transported correction to its q-kernel analog."""
    massive_green(cache)
    base = gamma0(cache.chain, marks) * drift0_dipolar(cache.chain, marks, kappa=2.0) / 2.0
    if cache.grid.n_cells == 0:
        return float(base)
    g = cache.g_images
    psi = np.angle((g - marks.b_t) / (g - marks.a_t))
    corr = float(np.sum(cache.grid.mass_weights * cache.q_m * psi)) / (2.0 * np.pi)
    return float(base - corr)


def drift2(cache: KernelCache, marks: MarkedBoundary) -> float:
    """Off-critical kappa=2 drift 2 d/dxi log gamma_m."""
    g = gamma_m(cache, marks)
    if g == 0.0:
        raise SingularSystem("gamma_m vanished; drift undefined")
    return float(2.0 * xi_gradient_gamma_m(cache, marks) / g)

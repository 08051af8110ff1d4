"""Massive kernels on a quadrature grid by a Nystrom solve.

The massive Green function solves the second-kind integral equation

    (I + (1/4pi) G0 M) G[m] = G0,      M = diag(m^2 * area),

and every massive transport is f[m] = f - (1/4pi) G[m] M f. The diagonal of
G0 is regularized by the disk-equivalent cell average of the log singularity
plus the smooth image term, (1 - 2 log r) + 2 log rho, r = sqrt(area/pi);
this is the same point-splitting subtraction that defines the squared field,
so the regularized diagonal obeys the same Hadamard time derivative as the
off-diagonal entries (d/dt 2 log rho = -2 theta^2). That makes the drift
identities checked downstream exact on the grid, up to finite differencing.

Off-grid evaluation never interpolates: a probe p outside the grid uses the
pure transport identity f[m](p) = f(p) - (1/4pi) sum_k G0(p,c_k) m2_k A_k
f[m](c_k), which is exact for the discrete system.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import CoincidentPoints, HullCollision, SingularSystem, SwallowedPoint
from .loewner import (
    EPS_SWALLOW,
    LAMBDA_C,
    MarkedBoundary,
    SlitMapChain,
    eval_h_dg_array,
    gamma0,
    green_half_plane,
)

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class MassProfile:
    """Quadrature cells carrying m^2(z) >= 0 on compact support in H."""

    centers: np.ndarray
    areas: np.ndarray
    m2: np.ndarray
    support_box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=complex)
        a = np.asarray(self.areas, dtype=float)
        m = np.asarray(self.m2, dtype=float)
        if not (c.ndim == a.ndim == m.ndim == 1 and len(c) == len(a) == len(m)):
            raise ValueError("centers, areas, m2 must be 1-d arrays of equal length")
        if np.any(m < 0):
            raise ValueError("m2 must be nonnegative")
        if len(c) and np.min(c.imag) <= 0:
            raise ValueError("cell centers must lie strictly in the upper half plane")
        if np.any(a <= 0):
            raise ValueError("cell areas must be positive")
        if self.support_box is not None and len(c):
            x0, y0, x1, y1 = self.support_box
            if y0 <= 0:
                raise ValueError("support box must lie strictly in the upper half plane")
            box_area = (x1 - x0) * (y1 - y0)
            if abs(np.sum(a) - box_area) > 1e-12 * max(1.0, box_area):
                raise ValueError("cells must tile the support box")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "areas", a)
        object.__setattr__(self, "m2", m)
        for arr in (c, a, m):
            arr.flags.writeable = False

    @property
    def n_cells(self) -> int:
        return len(self.centers)

    @property
    def mass_weights(self) -> np.ndarray:
        """m^2 * area per cell (the diagonal of M)."""
        return self.m2 * self.areas

    def scaled(self, factor: float) -> "MassProfile":
        return MassProfile(self.centers, self.areas, self.m2 * float(factor), self.support_box)

    @classmethod
    def empty(cls) -> "MassProfile":
        return cls(np.empty(0, complex), np.empty(0), np.empty(0), None)

    @classmethod
    def square_grid(cls, box: tuple[float, float, float, float], nx: int, ny: int,
                    m2) -> "MassProfile":
        """Uniform nx-by-ny tiling of box = (x0, y0, x1, y1).

        m2 may be a scalar, a callable z -> m^2(z), or an (ny, nx) array
        (row-major, bottom-up, matching the massgrid file layout).
        """
        x0, y0, x1, y1 = box
        dx, dy = (x1 - x0) / nx, (y1 - y0) / ny
        xs = x0 + dx * (np.arange(nx) + 0.5)
        ys = y0 + dy * (np.arange(ny) + 0.5)
        zz = (xs[None, :] + 1j * ys[:, None]).ravel()
        if callable(m2):
            vals = np.array([float(m2(z)) for z in zz])
        else:
            arr = np.asarray(m2, dtype=float)
            vals = np.full(nx * ny, float(arr)) if arr.ndim == 0 else arr.reshape(ny * nx)
        return cls(zz, np.full(nx * ny, dx * dy), vals, (x0, y0, x1, y1))

    @classmethod
    def from_grid_file(cls, path) -> "MassProfile":
        """Read `# massgrid x0 y0 dx dy nx ny` followed by nx*ny m^2 values."""
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        return cls.from_grid_text(text)

    @classmethod
    def from_grid_text(cls, text: str) -> "MassProfile":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].lstrip().startswith("# massgrid"):
            raise ValueError("missing '# massgrid x0 y0 dx dy nx ny' header")
        parts = lines[0].split()[2:]
        if len(parts) != 6:
            raise ValueError("massgrid header needs 6 fields: x0 y0 dx dy nx ny")
        x0, y0, dx, dy = map(float, parts[:4])
        nx, ny = int(parts[4]), int(parts[5])
        vals = np.loadtxt(io.StringIO("\n".join(lines[1:]))).ravel()
        if len(vals) != nx * ny:
            raise ValueError(f"expected {nx * ny} values, found {len(vals)}")
        box = (x0, y0, x0 + nx * dx, y0 + ny * dy)
        return cls.square_grid(box, nx, ny, vals.reshape(ny, nx))

    def to_grid_text(self) -> str:
        if self.support_box is None:
            raise ValueError("only box-tiled profiles serialize to massgrid text")
        x0, y0, x1, y1 = self.support_box
        xs = np.unique(self.centers.real)
        ys = np.unique(self.centers.imag)
        nx, ny = len(xs), len(ys)
        dx, dy = (x1 - x0) / nx, (y1 - y0) / ny
        header = f"# massgrid {x0:.17g} {y0:.17g} {dx:.17g} {dy:.17g} {nx} {ny}"
        rows = self.m2.reshape(ny, nx)
        body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in rows)
        return header + "\n" + body + "\n"


@dataclass
class KernelCache:
    """Per-state kernel tables over the mass grid.

    Built single-writer by assemble + massive_green, then treated as
    immutable. g0 carries the regularized diagonal; gm is the symmetrized
    Nystrom solution; theta_m, phi_m, q_m are the massive transports of
    theta, phi, q0.
    """

    chain: SlitMapChain
    grid: MassProfile
    marks: MarkedBoundary | None
    h: np.ndarray
    dg: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    q0: np.ndarray
    rho: np.ndarray
    g0: np.ndarray
    psi0_ab: np.ndarray | None = None
    gm: np.ndarray | None = None
    theta_m: np.ndarray | None = None
    phi_m: np.ndarray | None = None
    q_m: np.ndarray | None = None
    asym_residual: float = 0.0
    _lu: tuple | None = field(default=None, repr=False)

    @property
    def xi(self) -> float:
        return self.chain.xi_current

    @property
    def g_images(self) -> np.ndarray:
        return self.h + self.xi


def _psi0_vector(g_images: np.ndarray, marks: MarkedBoundary) -> np.ndarray:
    return np.angle((g_images - marks.b_t) / (g_images - marks.a_t))


def _g0_matrix(h: np.ndarray, rho: np.ndarray, areas: np.ndarray) -> np.ndarray:
    n = len(h)
    if n == 0:
        return np.empty((0, 0))
    d = h[:, None] - h[None, :]
    dbar = h[:, None] - np.conj(h)[None, :]
    np.fill_diagonal(d, 1.0)
    g0 = -2.0 * np.log(np.abs(d) / np.abs(dbar))
    r = np.sqrt(areas / np.pi)
    np.fill_diagonal(g0, (1.0 - 2.0 * np.log(r)) + 2.0 * np.log(rho))
    return g0


def assemble(chain: SlitMapChain, grid: MassProfile,
             marks: MarkedBoundary | None = None,
             eps_swallow: float = EPS_SWALLOW) -> KernelCache:
    """Tabulate the massless kernels of the current state on the grid."""
    h, dg, sw = eval_h_dg_array(chain, grid.centers, eps_swallow)
    if np.any(sw):
        raise HullCollision(f"{int(np.sum(sw))} grid cell(s) swallowed by the hull")
    theta = 2.0 * h.imag / np.abs(h) ** 2
    phi = LAMBDA_C * np.angle(h)
    q0v = -2.0 * (1.0 / h**2).imag
    rho = 2.0 * h.imag / np.abs(dg)
    cache = KernelCache(
        chain=chain, grid=grid, marks=marks, h=h, dg=dg,
        theta=theta, phi=phi, q0=q0v, rho=rho,
        g0=_g0_matrix(h, rho, grid.areas),
    )
    if marks is not None:
        cache.psi0_ab = _psi0_vector(cache.g_images, marks)
    return cache


def assemble_from_images(grid: MassProfile, h: np.ndarray, dg: np.ndarray,
                         xi: float,
                         marks: MarkedBoundary | None = None) -> KernelCache:
    """Cache from precomputed cell images h = g(z) - xi and derivatives dg.

    For states reconstructed from stored drivings (batch replay) where no
    slit-map chain is kept. The carrier chain is hull-free with the given
    driving value, so off-grid probes are trustworthy only at cell centers;
    everything tabulated on the grid is exact.
    """
    h = np.asarray(h, complex)
    dg = np.asarray(dg, complex)
    if np.any(h.imag <= 0.0):
        raise HullCollision("image below the real axis; state is past a swallow")
    chain = SlitMapChain((), (), xi_current=float(xi))
    theta = 2.0 * h.imag / np.abs(h) ** 2
    phi = LAMBDA_C * np.angle(h)
    q0v = -2.0 * (1.0 / h**2).imag
    rho = 2.0 * h.imag / np.abs(dg)
    cache = KernelCache(
        chain=chain, grid=grid, marks=marks, h=h, dg=dg,
        theta=theta, phi=phi, q0=q0v, rho=rho,
        g0=_g0_matrix(h, rho, grid.areas),
    )
    if marks is not None:
        cache.psi0_ab = _psi0_vector(cache.g_images, marks)
    return cache


def reassemble_with_xi(cache: KernelCache, xi: float) -> KernelCache:
    """Shift the driving value only: the hull, g0, gm and rho are invariant
    under real translation, so only the h-based vectors are recomputed."""
    chain = cache.chain.with_xi(xi)
    h = cache.h + (cache.xi - xi)
    theta = 2.0 * h.imag / np.abs(h) ** 2
    phi = LAMBDA_C * np.angle(h)
    q0v = -2.0 * (1.0 / h**2).imag
    out = KernelCache(
        chain=chain, grid=cache.grid, marks=cache.marks, h=h, dg=cache.dg,
        theta=theta, phi=phi, q0=q0v, rho=cache.rho, g0=cache.g0,
        psi0_ab=cache.psi0_ab, gm=cache.gm,
        asym_residual=cache.asym_residual, _lu=cache._lu,
    )
    if out.gm is not None:
        out.theta_m = massive_transport(out, theta)
        out.phi_m = massive_transport(out, phi)
        out.q_m = massive_transport(out, q0v)
    return out


def massive_green(cache: KernelCache) -> np.ndarray:
    """Solve the Nystrom system for G[m]; stores gm and the transports."""
    if cache.gm is not None:
        return cache.gm
    n = cache.grid.n_cells
    if n == 0:
        cache.gm = np.empty((0, 0))
        cache.theta_m = np.empty(0)
        cache.phi_m = np.empty(0)
        cache.q_m = np.empty(0)
        return cache.gm
    mw = cache.grid.mass_weights
    a_matrix = np.eye(n) + cache.g0 * (mw / FOUR_PI)[None, :]
    try:
        lu = lu_factor(a_matrix)
        raw = lu_solve(lu, cache.g0)
    except Exception as exc:  # LinAlgError or ill-posed factorization
        raise SingularSystem(f"massive Green solve failed: {exc}") from exc
    if not np.all(np.isfinite(raw)):
        raise SingularSystem("massive Green solve produced non-finite entries")
    scale = np.max(np.abs(raw)) or 1.0
    cache.asym_residual = float(np.max(np.abs(raw - raw.T)) / scale)
    cache.gm = 0.5 * (raw + raw.T)
    cache._lu = lu
    cache.theta_m = massive_transport(cache, cache.theta)
    cache.phi_m = massive_transport(cache, cache.phi)
    cache.q_m = massive_transport(cache, cache.q0)
    return cache.gm


def massive_transport(cache: KernelCache, f: np.ndarray) -> np.ndarray:
    """Apply f -> f - (1/4pi) G[m] M f on grid vectors."""
    gm = massive_green(cache)
    f = np.asarray(f, dtype=float)
    if cache.grid.n_cells == 0:
        return f.copy()
    return f - gm @ (cache.grid.mass_weights * f) / FOUR_PI


def gamma_m(cache: KernelCache, marks: MarkedBoundary) -> float:
    """Massive two-mark functional Gamma0 - (1/2pi) sum m2 A Theta[m] Psi0."""
    massive_green(cache)
    base = gamma0(cache.chain, marks)
    if cache.grid.n_cells == 0:
        return base
    psi = cache.psi0_ab if _marks_match(cache, marks) else _psi0_vector(cache.g_images, marks)
    corr = float(np.sum(cache.grid.mass_weights * cache.theta_m * psi)) / (2.0 * np.pi)
    return base - corr


def _marks_match(cache: KernelCache, marks: MarkedBoundary) -> bool:
    return (
        cache.marks is not None
        and cache.psi0_ab is not None
        and cache.marks.a_t == marks.a_t
        and cache.marks.b_t == marks.b_t
    )


# off-grid evaluation: exact transport against the grid, no interpolation


def point_row(cache: KernelCache, p: complex, eps_swallow: float = EPS_SWALLOW):
    """(h_p, dg_p, g0 row) of an off-grid probe against the grid cells.

    A probe that coincides with a cell center reuses that cell's regularized
    row, so center probes and off-center probes share one code path.
    """
    if cache.grid.n_cells:
        hit = np.where(np.abs(cache.grid.centers - p) <= 1e-12 * max(1.0, abs(p)))[0]
        if len(hit):
            i = int(hit[0])
            return cache.h[i], cache.dg[i], cache.g0[i].copy()
    h, dg, sw = eval_h_dg_array(cache.chain, np.array([p]), eps_swallow)
    if sw[0]:
        raise SwallowedPoint(f"probe {p} swallowed by the hull")
    row = green_half_plane(h[0], cache.h) if cache.grid.n_cells else np.empty(0)
    return complex(h[0]), complex(dg[0]), row


def theta_at(cache: KernelCache, p: complex) -> float:
    h, _, _ = point_row(cache, p)
    return float(2.0 * np.imag(h) / abs(h) ** 2)


def transport_at(cache: KernelCache, p: complex, f_at_p: float, f_m_grid: np.ndarray) -> float:
    """f[m](p) from the massless value at p and the transported grid vector."""
    massive_green(cache)
    if cache.grid.n_cells == 0:
        return float(f_at_p)
    _, _, row = point_row(cache, p)
    return float(f_at_p - row @ (cache.grid.mass_weights * f_m_grid) / FOUR_PI)


def theta_m_at(cache: KernelCache, p: complex) -> float:
    massive_green(cache)
    return transport_at(cache, p, theta_at(cache, p), cache.theta_m)


def phi_m_at(cache: KernelCache, p: complex) -> float:
    massive_green(cache)
    h, _, _ = point_row(cache, p)
    return transport_at(cache, p, float(LAMBDA_C * np.angle(h)), cache.phi_m)


def green_m_at(cache: KernelCache, p: complex, q: complex) -> float:
    """G[m](p, q) for arbitrary points via one extra solve."""
    massive_green(cache)
    if abs(p - q) <= 1e-12 * max(1.0, abs(p), abs(q)):
        raise CoincidentPoints(f"green_m_at arguments coincide: {p}, {q}")
    hp, _, row_p = point_row(cache, p)
    hq, _, row_q = point_row(cache, q)
    base = float(green_half_plane(hp, hq))
    if cache.grid.n_cells == 0:
        return base
    col = lu_solve(cache._lu, row_q)
    return base - float(row_p @ (cache.grid.mass_weights * col)) / FOUR_PI


def green_m_reg_at(cache: KernelCache, p: complex) -> float:
    """Point-split regularized diagonal G[m](p, p): 2 log rho minus the
    regular mass correction (the log singularity is t-independent and
    dropped, matching the g0 diagonal convention without the cell term)."""
    massive_green(cache)
    hp, dgp, row_p = point_row(cache, p)
    base = float(2.0 * np.log(2.0 * np.imag(hp) / abs(dgp)))
    if cache.grid.n_cells == 0:
        return base
    col = lu_solve(cache._lu, row_p)
    return base - float(row_p @ (cache.grid.mass_weights * col)) / FOUR_PI


def fermion_correlator(cache: KernelCache, zs, ws) -> float:
    """Wick determinant of massive kernels.

    With N+1 points zs and N points ws, the matrix has rows indexed by zs,
    entries G[m](zs[i], ws[j]) for j < N and last column Theta[m](zs[i]);
    N = 0 reduces to Theta[m](zs[0]). The two families may be passed in
    either order: G[m] is symmetric, so swapping them transposes the matrix
    and leaves the determinant unchanged.
    """
    zs = [complex(z) for z in np.atleast_1d(np.asarray(zs, dtype=complex))]
    ws = [complex(w) for w in np.atleast_1d(np.asarray(ws, dtype=complex))] if ws is not None else []
    if len(ws) == len(zs) + 1:
        zs, ws = ws, zs
    if len(zs) != len(ws) + 1:
        raise ValueError("need N+1 points in one family and N in the other")
    for z in zs:
        for w in ws:
            if abs(z - w) <= 1e-12 * max(1.0, abs(z), abs(w)):
                raise CoincidentPoints(f"cross-family coincidence at {z}")
    massive_green(cache)
    n = len(ws)
    if n == 0:
        return theta_m_at(cache, zs[0])
    mat = np.empty((n + 1, n + 1))
    for i, z in enumerate(zs):
        for j, w in enumerate(ws):
            mat[i, j] = green_m_at(cache, z, w)
        mat[i, n] = theta_m_at(cache, z)
    return float(np.linalg.det(mat))

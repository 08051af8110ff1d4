"""Killed random walks, loop erasure and exact exit solves on Z^2 patches.

A domain is a dense code grid: blocked sites, interior sites, and boundary
sites labeled by arc id. The decay density rho >= 0 weights every visit to
an interior site w by exp(-a^2 rho(w)); a walk from the start site to its
first boundary hit carries the product of those factors, so the weighted
exit probability through an arc solves

    u(x) = exp(-a^2 rho(x)) (1/4) sum_nbr u(y),   u = 1_S on the boundary.

exit_density computes the weighted exit probability of every boundary site
at once from one transposed sparse solve, which keeps arc probabilities
exactly additive in the site partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .errors import ConfigError, EmptyArc, SingularSystem, StepLimit

CODE_BLOCKED = -2
CODE_INTERIOR = -1

_ARC_CHARS = "0123456789abcdefghijklmnopqrstuvwxyz"
STEP_CAP_DEFAULT = 10_000_000


def _adjacent(u, v) -> bool:
    """Lattice adjacency; non-pair sites are opaque graph vertices."""
    if isinstance(u, tuple) and isinstance(v, tuple):
        return abs(u[0] - v[0]) + abs(u[1] - v[1]) == 1
    return True


@dataclass(frozen=True)
class Walk:
    """Site sequence, consecutive sites adjacent; sites may repeat.

    Lattice sites are integer pairs and are adjacency-checked; any other
    hashable site type is treated as a vertex of an unknown graph."""

    sites: tuple

    def __post_init__(self):
        sites = tuple(self.sites)
        if len(sites) == 0:
            raise ValueError("walk must contain at least one site")
        for u, v in zip(sites, sites[1:]):
            if not _adjacent(u, v):
                raise ValueError(f"sites {u} and {v} are not adjacent")
        object.__setattr__(self, "sites", sites)

    def __len__(self):
        return len(self.sites)


@dataclass(frozen=True)
class SimplePath(Walk):
    """Walk without repeated sites."""

    def __post_init__(self):
        super().__post_init__()
        if len(set(self.sites)) != len(self.sites):
            raise ValueError("simple path must not repeat sites")


def _erase_last_visit(sites: tuple) -> tuple:
    last = {}
    for m, s in enumerate(sites):
        last[s] = m
    out = [sites[0]]
    n = last[sites[0]]
    while n < len(sites) - 1:
        s = sites[n + 1]
        out.append(s)
        n = last[s]
    return tuple(out)


def loop_erase(walk: Walk) -> SimplePath:
    """Loop-erase by last visits: jump to the final occurrence of each site.

    gamma_0 = W_0 with n_0 = max{m : W_m = W_0}; then repeatedly
    gamma_{j+1} = W_{n_j + 1} with n_{j+1} = max{m : W_m = gamma_{j+1}}.
    """
    return SimplePath(_erase_last_visit(walk.sites))


def loop_erase_chronological(walk: Walk) -> SimplePath:
    """Loop-erase in walk order: drop each loop the moment it closes."""
    path = []
    where = {}
    for s in walk.sites:
        if s in where:
            for dropped in path[where[s] + 1:]:
                del where[dropped]
            del path[where[s] + 1:]
        else:
            where[s] = len(path)
            path.append(s)
    return SimplePath(tuple(path))


@dataclass(frozen=True)
class LatticeDomain:
    """Code grid over sites origin + (ix, iy), 0 <= ix < nx, 0 <= iy < ny.

    codes[iy, ix] is CODE_BLOCKED, CODE_INTERIOR, or an arc id indexing
    arc_names. rho holds the decay density at each site (used on interior
    sites only). Sites are integer pairs in absolute lattice coordinates;
    the physical position of site (ix, iy) is (a ix, a iy).
    """

    a: float
    codes: np.ndarray
    origin: tuple
    arc_names: tuple
    rho: np.ndarray
    start: tuple

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("spacing a must be positive")
        codes = np.asarray(self.codes, dtype=np.int16)
        rho = np.asarray(self.rho, dtype=float)
        if codes.ndim != 2 or rho.shape != codes.shape:
            raise ValueError("codes and rho must be 2-d arrays of equal shape")
        if codes.max(initial=CODE_BLOCKED) >= len(self.arc_names):
            raise ValueError("arc id exceeds arc_names")
        interior = codes == CODE_INTERIOR
        if np.any(rho[interior] < 0):
            raise ValueError("rho must be nonnegative")
        if not np.any(interior):
            raise ValueError("domain has no interior sites")
        padded = np.full((codes.shape[0] + 2, codes.shape[1] + 2), CODE_BLOCKED,
                         np.int16)
        padded[1:-1, 1:-1] = codes
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nbr = padded[1 + dy:padded.shape[0] - 1 + dy,
                         1 + dx:padded.shape[1] - 1 + dx]
            if np.any(interior & (nbr == CODE_BLOCKED)):
                raise ValueError("interior site with a blocked neighbor")
        used = np.unique(codes[codes >= 0])
        if len(used) != len(self.arc_names):
            raise ValueError("every named arc must own at least one site")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))
        object.__setattr__(self, "start", (int(self.start[0]), int(self.start[1])))
        object.__setattr__(self, "arc_names", tuple(self.arc_names))
        codes.flags.writeable = False
        rho.flags.writeable = False
        if self.code_at(self.start) != CODE_INTERIOR:
            raise ValueError("start must be an interior site")

    @property
    def shape(self):
        return self.codes.shape

    def index(self, site) -> tuple:
        return site[1] - self.origin[1], site[0] - self.origin[0]

    def site(self, iy: int, ix: int) -> tuple:
        return ix + self.origin[0], iy + self.origin[1]

    def code_at(self, site) -> int:
        iy, ix = self.index(site)
        if 0 <= iy < self.codes.shape[0] and 0 <= ix < self.codes.shape[1]:
            return int(self.codes[iy, ix])
        return CODE_BLOCKED

    def rho_at(self, site) -> float:
        iy, ix = self.index(site)
        return float(self.rho[iy, ix])

    def physical(self, site) -> tuple:
        return self.a * site[0], self.a * site[1]

    @staticmethod
    def neighbors(site):
        x, y = site
        return (x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)

    def interior_sites(self) -> list:
        ys, xs = np.nonzero(self.codes == CODE_INTERIOR)
        return [self.site(iy, ix) for iy, ix in zip(ys, xs)]

    def boundary_sites(self) -> list:
        ys, xs = np.nonzero(self.codes >= 0)
        return [self.site(iy, ix) for iy, ix in zip(ys, xs)]

    def arc_sites(self, name: str) -> list:
        if name not in self.arc_names:
            raise EmptyArc(f"unknown arc {name!r}; have {self.arc_names}")
        aid = self.arc_names.index(name)
        ys, xs = np.nonzero(self.codes == aid)
        return [self.site(iy, ix) for iy, ix in zip(ys, xs)]


def with_rho(dom: LatticeDomain, rho) -> LatticeDomain:
    """Domain with a new decay density: scalar, callable on physical (x, y),
    or array matching the code grid."""
    if callable(rho):
        ny, nx = dom.shape
        xs = dom.a * (np.arange(nx) + dom.origin[0])
        ys = dom.a * (np.arange(ny) + dom.origin[1])
        grid = np.array([[float(rho(x, y)) for x in xs] for y in ys])
    elif np.isscalar(rho):
        grid = np.full(dom.shape, float(rho))
    else:
        grid = np.asarray(rho, dtype=float)
    return replace(dom, rho=grid)


def half_disk_domain(radius: float, a: float, rho=0.0) -> LatticeDomain:
    """Upper half-disk of the given physical radius with start site (0, 1).

    Interior: sites with iy >= 1 inside the disk. Boundary arcs: "left" and
    "right" are the real-axis rows x < 0 and x > 0, "root" is the origin
    site under the start, "circle" is everything else on the fringe.
    """
    if radius <= 2 * a:
        raise ValueError("radius must exceed two lattice spacings")
    n = int(math.floor(radius / a)) + 1
    nx, ny = 2 * n + 1, n + 1
    origin = (-n, 0)
    codes = np.full((ny, nx), CODE_BLOCKED, np.int16)
    ix = np.arange(nx) + origin[0]
    iy = np.arange(ny) + origin[1]
    xx, yy = np.meshgrid(ix, iy)
    interior = (yy >= 1) & ((xx * a) ** 2 + (yy * a) ** 2 < radius**2)
    codes[interior] = CODE_INTERIOR
    arc_names = ("left", "root", "right", "circle")
    fringe = np.zeros_like(interior)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        shifted = np.zeros_like(interior)
        src = interior[max(0, -dy):ny - max(0, dy), max(0, -dx):nx - max(0, dx)]
        shifted[max(0, dy):ny - max(0, -dy), max(0, dx):nx - max(0, -dx)] = src
        fringe |= shifted
    fringe &= ~interior
    on_axis = fringe & (yy == 0)
    codes[on_axis & (xx < 0)] = 0
    codes[on_axis & (xx == 0)] = 1
    codes[on_axis & (xx > 0)] = 2
    codes[fringe & (yy > 0)] = 3
    dom = LatticeDomain(a=a, codes=codes, origin=origin, arc_names=arc_names,
                        rho=np.zeros((ny, nx)), start=(0, 1))
    return with_rho(dom, rho) if not (np.isscalar(rho) and rho == 0.0) else dom


# exact exit solves


def _interior_system(dom: LatticeDomain):
    """Sparse M = I - E P over interior sites plus index bookkeeping."""
    ny, nx = dom.shape
    interior = dom.codes == CODE_INTERIOR
    idx = -np.ones((ny, nx), np.int64)
    ys, xs = np.nonzero(interior)
    idx[ys, xs] = np.arange(len(ys))
    survival = np.exp(-dom.a**2 * dom.rho[ys, xs])
    rows, cols, vals = [], [], []
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ny2, nx2 = ys + dy, xs + dx
        nbr_interior = interior[ny2, nx2]
        rows.append(idx[ys, xs][nbr_interior])
        cols.append(idx[ny2, nx2][nbr_interior])
        vals.append(-0.25 * survival[nbr_interior])
    n = len(ys)
    m = coo_matrix(
        (np.concatenate(vals + [np.ones(n)]),
         (np.concatenate(rows + [np.arange(n)]),
          np.concatenate(cols + [np.arange(n)]))),
        shape=(n, n)).tocsc()
    return m, idx, ys, xs, survival


def exit_density(dom: LatticeDomain) -> np.ndarray:
    """Weighted exit probability of every boundary site, as a grid.

    One transposed solve of the interior system gives the whole density;
    summing entries over a site partition of the boundary is then exactly
    additive. Row sums over all arcs give E[exp(-sum a^2 rho)] <= 1.
    """
    m, idx, ys, xs, survival = _interior_system(dom)
    e_start = np.zeros(m.shape[0])
    e_start[idx[dom.index(dom.start)]] = 1.0
    try:
        v = splu(m).solve(e_start, trans="T")
    except RuntimeError as exc:  # pragma: no cover - rho >= 0 keeps M regular
        raise SingularSystem(f"exit solve failed: {exc}") from exc
    if not np.all(np.isfinite(v)):
        raise SingularSystem("exit solve produced non-finite values")
    q = np.zeros(dom.shape)
    contrib = v * 0.25 * survival
    boundary = dom.codes >= 0
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        by, bx = ys + dy, xs + dx
        onto = boundary[by, bx]
        np.add.at(q, (by[onto], bx[onto]), contrib[onto])
    return q


def _resolve_arc(dom: LatticeDomain, arc) -> list:
    """Arc argument resolved to [(site, weight)] pairs.

    A named arc or an iterable of boundary sites selects with weight 1. A
    pair of reals (lo, hi) selects the closed physical interval [lo, hi] on
    the y = 0 boundary row with half weight at sites exactly on lo or hi;
    the symmetric endpoint rule makes adjacent intervals exactly additive
    and the continuum correspondence second order in the spacing."""
    if isinstance(arc, str):
        return [(s, 1.0) for s in dom.arc_sites(arc)]
    if (isinstance(arc, tuple) and len(arc) == 2
            and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in arc)):
        lo, hi = float(arc[0]), float(arc[1])
        tol = 1e-9 * max(1.0, abs(lo), abs(hi), dom.a)
        pairs = []
        for s in dom.boundary_sites():
            if s[1] != 0:
                continue
            x = dom.a * s[0]
            if lo - tol <= x <= hi + tol:
                at_end = abs(x - lo) <= tol or abs(x - hi) <= tol
                pairs.append((s, 0.5 if at_end else 1.0))
        if not pairs:
            raise EmptyArc(f"arc {arc!r} selects no boundary sites")
        return pairs
    sites = [tuple(s) for s in arc]
    for s in sites:
        if dom.code_at(s) < 0:
            raise ValueError(f"site {s} is not on the boundary")
    if not sites:
        raise EmptyArc(f"arc {arc!r} selects no boundary sites")
    return [(s, 1.0) for s in sites]


def exit_distribution(dom: LatticeDomain, arc, density: np.ndarray | None = None) -> float:
    """Weighted probability of exiting through the arc, from the start site."""
    q = exit_density(dom) if density is None else density
    return math.fsum(w * q[dom.index(s)] for s, w in _resolve_arc(dom, arc))


def subinterval_probability(dom: LatticeDomain, sub, arc,
                            density: np.ndarray | None = None) -> float:
    """Exit probability of sub conditioned on exiting through arc."""
    q = exit_density(dom) if density is None else density
    arc_pairs = _resolve_arc(dom, arc)
    sub_pairs = _resolve_arc(dom, sub)
    if not {s for s, _ in sub_pairs} <= {s for s, _ in arc_pairs}:
        raise ValueError("sub must be contained in arc")
    denom = math.fsum(w * q[dom.index(s)] for s, w in arc_pairs)
    if denom <= 0.0:
        raise ValueError("arc has zero weighted exit probability")
    return math.fsum(w * q[dom.index(s)] for s, w in sub_pairs) / denom


# samplers


@dataclass(frozen=True)
class WalkSample:
    """One sampled walk with its importance weight.

    weight is exp(-sum a^2 rho) over visited interior sites in weight mode;
    in kill mode weight is 1 for survivors and 0 with killed = True."""

    walk: Walk
    weight: float
    killed: bool = False


def sample_walk(dom: LatticeDomain, rng, mode: str = "weight",
                step_cap: int = STEP_CAP_DEFAULT) -> WalkSample:
    """Simple random walk from the start site to its first boundary hit."""
    if mode not in ("weight", "kill"):
        raise ValueError("mode must be 'weight' or 'kill'")
    a2 = dom.a**2
    site = dom.start
    sites = [site]
    log_w = -a2 * dom.rho_at(site)
    if mode == "kill" and rng.random() >= math.exp(-a2 * dom.rho_at(site)):
        return WalkSample(Walk(tuple(sites)), 0.0, killed=True)
    moves = ((1, 0), (-1, 0), (0, 1), (0, -1))
    buf = rng.integers(0, 4, size=2048)
    pos = 0
    for step in range(step_cap):
        if pos == len(buf):
            buf = rng.integers(0, 4, size=2048)
            pos = 0
        dx, dy = moves[buf[pos]]
        pos += 1
        site = (site[0] + dx, site[1] + dy)
        sites.append(site)
        code = dom.code_at(site)
        if code >= 0:
            w = math.exp(log_w) if mode == "weight" else 1.0
            return WalkSample(Walk(tuple(sites)), w)
        log_w -= a2 * dom.rho_at(site)
        if mode == "kill" and rng.random() >= math.exp(-a2 * dom.rho_at(site)):
            return WalkSample(Walk(tuple(sites)), 0.0, killed=True)
    raise StepLimit(f"walk exceeded {step_cap} steps")


@dataclass(frozen=True)
class LerwSample:
    """Weighted loop-erased samples conditioned to exit through one arc."""

    paths: tuple
    weights: np.ndarray
    n_proposed: int
    n_offtarget: int
    n_killed: int
    n_step_limited: int

    def exit_sites(self) -> list:
        return [p.sites[-1] for p in self.paths]


def sample_lerw(dom: LatticeDomain, arc, rng, n: int, mode: str = "weight",
                step_cap: int = STEP_CAP_DEFAULT) -> LerwSample:
    """n proposal walks, kept when exiting in arc, loop-erased and weighted.

    Walks run in lockstep over a batch; draw i consumes only the i-th
    spawned child generator, so each walk is deterministic in (seed, i)
    regardless of batch composition.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in ("weight", "kill"):
        raise ValueError("mode must be 'weight' or 'kill'")
    # sampler conditioning is set membership: endpoint half weights in the
    # exact interval quadrature do not apply to individual walks
    target = {s for s, _ in _resolve_arc(dom, arc)}
    a2 = dom.a**2
    ny, nx = dom.shape
    codes_flat = np.append(dom.codes.ravel(), CODE_BLOCKED)
    rho_flat = np.append(dom.rho.ravel(), 0.0)
    surv_flat = np.exp(-a2 * rho_flat)

    children = rng.spawn(n)
    if mode == "kill":
        pairs = [c.spawn(2) for c in children]
        dir_rngs = [p[0] for p in pairs]
        kill_rngs = [p[1] for p in pairs]
    else:
        dir_rngs = children
        kill_rngs = None

    sy, sx = dom.index(dom.start)
    start_flat = sy * nx + sx
    pos = np.full(n, start_flat, np.int64)
    log_w = np.full(n, -a2 * rho_flat[start_flat])
    alive = np.ones(n, bool)
    killed = np.zeros(n, bool)
    limited = np.zeros(n, bool)
    exit_flat = np.full(n, -1, np.int64)

    chunk = 4096
    dir_buf = np.empty((n, chunk), np.int8)
    kill_buf = np.empty((n, chunk)) if mode == "kill" else None
    for i in range(n):
        dir_buf[i] = dir_rngs[i].integers(0, 4, size=chunk)
        if mode == "kill":
            kill_buf[i] = kill_rngs[i].random(chunk)
    if mode == "kill":
        first = kill_buf[:, 0] >= surv_flat[start_flat]
        killed |= first
        alive &= ~first

    hist = np.empty((n, 512), np.int64)
    hist[:, 0] = start_flat
    lengths = np.ones(n, np.int64)
    deltas = np.array([1, -1, nx, -nx], np.int64)
    col = 0
    kill_col = 1  # column 0 consumed by the start-site survival check
    step = 0
    while np.any(alive):
        if step >= step_cap:
            limited |= alive
            alive[:] = False
            break
        if col == chunk:
            rows = np.where(alive)[0]
            for i in rows:
                dir_buf[i] = dir_rngs[i].integers(0, 4, size=chunk)
            col = 0
        if mode == "kill" and kill_col == chunk:
            rows = np.where(alive)[0]
            for i in rows:
                kill_buf[i] = kill_rngs[i].random(chunk)
            kill_col = 0
        rows = np.where(alive)[0]
        new_pos = pos[rows] + deltas[dir_buf[rows, col]]
        col += 1
        if lengths.max(initial=0) + 1 > hist.shape[1]:
            grown = np.empty((n, hist.shape[1] * 2), np.int64)
            grown[:, :hist.shape[1]] = hist
            hist = grown
        hist[rows, lengths[rows]] = new_pos
        lengths[rows] += 1
        pos[rows] = new_pos
        code = codes_flat[new_pos]
        exited = code >= 0
        if np.any(exited):
            done = rows[exited]
            exit_flat[done] = new_pos[exited]
            alive[done] = False
        interior = ~exited
        log_w[rows[interior]] -= a2 * rho_flat[new_pos[interior]]
        if mode == "kill":
            ku = kill_buf[rows, kill_col]
            kill_col += 1
            die = interior & (ku >= surv_flat[new_pos])
            if np.any(die):
                dead = rows[die]
                killed[dead] = True
                alive[dead] = False
        step += 1

    paths, weights = [], []
    n_offtarget = 0
    for i in range(n):
        if killed[i] or limited[i] or exit_flat[i] < 0:
            continue
        iy, ix = divmod(int(exit_flat[i]), nx)
        if dom.site(iy, ix) not in target:
            n_offtarget += 1
            continue
        flat_sites = tuple(int(f) for f in hist[i, :lengths[i]])
        erased = _erase_last_visit(flat_sites)
        path = SimplePath(tuple(dom.site(*divmod(f, nx)) for f in erased))
        assert path.sites[0] == dom.start and path.sites[-1] == dom.site(iy, ix)
        paths.append(path)
        weights.append(math.exp(log_w[i]) if mode == "weight" else 1.0)
    return LerwSample(
        paths=tuple(paths),
        weights=np.array(weights),
        n_proposed=n,
        n_offtarget=n_offtarget,
        n_killed=int(killed.sum()),
        n_step_limited=int(limited.sum()),
    )


# domain file format: '# lattice a nx ny' then ny rows bottom-up, one char
# per site ('#' blocked, '.' interior, 0-9a-z arc id)


def domain_to_text(dom: LatticeDomain) -> str:
    if len(dom.arc_names) > len(_ARC_CHARS):
        raise ValueError("too many arcs for the text format")
    ny, nx = dom.shape
    lines = [f"# lattice {dom.a:.17g} {nx} {ny}",
             f"# origin {dom.origin[0]} {dom.origin[1]}",
             f"# start {dom.start[0]} {dom.start[1]}"]
    for aid, name in enumerate(dom.arc_names):
        lines.append(f"# arc {aid} {name}")
    for iy in range(ny):
        row = []
        for ix in range(nx):
            c = dom.codes[iy, ix]
            if c == CODE_BLOCKED:
                row.append("#")
            elif c == CODE_INTERIOR:
                row.append(".")
            else:
                row.append(_ARC_CHARS[c])
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


def domain_from_text(text: str, rho=0.0) -> LatticeDomain:
    a = nx = ny = None
    origin = (0, 0)
    start = None
    arc_ids = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line:
            continue
        # header lines are '# key ...'; grid rows never contain spaces, so a
        # row of blocked sites starting with '#' stays a row
        if line.startswith("# "):
            parts = line[1:].split()
            if not parts:
                continue
            kind = parts[0]
            try:
                if kind == "lattice":
                    a, nx, ny = float(parts[1]), int(parts[2]), int(parts[3])
                elif kind == "origin":
                    origin = (int(parts[1]), int(parts[2]))
                elif kind == "start":
                    start = (int(parts[1]), int(parts[2]))
                elif kind == "arc":
                    arc_ids[int(parts[1])] = parts[2]
            except (IndexError, ValueError) as exc:
                raise ConfigError(f"bad domain header: {raw!r}", line=lineno) from exc
            continue
        rows.append((lineno, line))
    if a is None:
        raise ConfigError("missing '# lattice a nx ny' header")
    if start is None:
        raise ConfigError("missing '# start ix iy' header")
    if len(rows) != ny:
        raise ConfigError(f"expected {ny} grid rows, got {len(rows)}")
    codes = np.full((ny, nx), CODE_BLOCKED, np.int16)
    for iy, (lineno, line) in enumerate(rows):
        if len(line) != nx:
            raise ConfigError(f"expected {nx} site codes", line=lineno)
        for ix, ch in enumerate(line):
            if ch == "#":
                continue
            if ch == ".":
                codes[iy, ix] = CODE_INTERIOR
            elif ch in _ARC_CHARS:
                codes[iy, ix] = _ARC_CHARS.index(ch)
            else:
                raise ConfigError(f"unknown site code {ch!r}", line=lineno)
    n_arcs = int(codes.max(initial=-1)) + 1
    names = tuple(arc_ids.get(k, f"arc{k}") for k in range(n_arcs))
    dom = LatticeDomain(a=a, codes=codes, origin=origin, arc_names=names,
                        rho=np.zeros((ny, nx)), start=start)
    return with_rho(dom, rho) if not (np.isscalar(rho) and rho == 0.0) else dom

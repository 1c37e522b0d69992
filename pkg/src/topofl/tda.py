"""
Vietoris-Rips persistent homology and the 48-dimensional client descriptor.

H0 is exact (Kruskal + union-find, elder rule). H1 is exact on the Rips
2-skeleton truncated at a maximum scale, computed by persistent cohomology
with clearing and the apparent-pair shortcut over Z/2.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist, squareform

from .errors import ConfigError, InputError

DESCRIPTOR_DIM = 48
BETTI_RESOLUTION = 20
MAX_H1_POINTS = 200
ENTROPY_EPS = 1e-10

# fixed layout of the descriptor vector
SCALAR_FIELDS = (
    "beta0", "beta1", "h0_entropy", "h1_entropy",
    "h0_amplitude", "h1_amplitude", "h0_n_persistent", "h1_n_persistent",
)
B0_SLICE = slice(8, 8 + BETTI_RESOLUTION)
B1_SLICE = slice(8 + BETTI_RESOLUTION, 8 + 2 * BETTI_RESOLUTION)


@dataclass(frozen=True)
class PersistenceDiagram:
    """Birth-death pairs tagged with their homology dimension.

    ``pairs`` is an (m, 2) float array of (birth, death); ``dims`` holds the
    homology dimension of each row. Essential classes have death = inf.
    """

    pairs: np.ndarray
    dims: np.ndarray

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=float).reshape(-1, 2)
        dims = np.asarray(self.dims, dtype=int).reshape(-1)
        if len(pairs) != len(dims):
            raise InputError("pairs and dims must have equal length")
        if np.any(pairs[:, 1] < pairs[:, 0]):
            raise InputError("death must be >= birth")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=int))

    @classmethod
    def from_pairs(cls, pairs, dim):
        pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(pairs, np.full(len(pairs), dim, dtype=int))

    def __len__(self):
        return len(self.pairs)

    def __add__(self, other):
        return PersistenceDiagram(
            np.vstack([self.pairs, other.pairs]),
            np.concatenate([self.dims, other.dims]),
        )

    @property
    def homology_dims_present(self):
        return set(int(d) for d in np.unique(self.dims))

    def of_dim(self, dim):
        return self.pairs[self.dims == dim]

    def finite(self, dim):
        p = self.of_dim(dim)
        return p[np.isfinite(p[:, 1])]

    def persistence(self, dim):
        """Lifetimes of the finite pairs in ``dim``."""
        p = self.finite(dim)
        return p[:, 1] - p[:, 0]


def as_point_cloud(points):
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InputError(f"point cloud must be a non-empty (n, d) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("point cloud contains non-finite coordinates")
    return x


def pairwise_distances(points):
    """Euclidean distance matrix of an (n, d) point cloud."""
    x = as_point_cloud(points)
    if len(x) == 1:
        return np.zeros((1, 1))
    return squareform(pdist(x))


def _check_distance_matrix(dist):
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1] or dist.shape[0] < 1:
        raise InputError("distance matrix must be square and non-empty")
    if not np.all(np.isfinite(dist)):
        raise InputError("distance matrix contains non-finite entries")
    return dist


def _sorted_edges(dist, max_scale=np.inf):
    """Upper-triangle edges with weight <= max_scale, in filtration order.

    Ties in weight are broken lexicographically on (i, j) so the order is
    total and deterministic.
    """
    n = len(dist)
    iu, ju = np.triu_indices(n, 1)
    w = dist[iu, ju]
    keep = w <= max_scale
    iu, ju, w = iu[keep], ju[keep], w[keep]
    order = np.lexsort((ju, iu, w))
    return iu[order], ju[order], w[order]


def _kruskal(n, ei, ej):
    """Indices (into the edge order) of the edges that merge components.

    The surviving root of every merge is the component whose minimum vertex
    index is smaller; since every vertex is born at 0 this is the elder rule
    with a deterministic tie-break.
    """
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    merging = []
    for pos in range(len(ei)):
        ri, rj = find(int(ei[pos])), find(int(ej[pos]))
        if ri == rj:
            continue
        # roots are always the minimum index of their component
        if ri < rj:
            parent[rj] = ri
        else:
            parent[ri] = rj
        merging.append(pos)
        if len(merging) == n - 1:
            break
    return merging


def h0_persistence(dist):
    """Zero-dimensional persistence of the Rips filtration on ``dist``.

    Returns n pairs: n-1 finite pairs (0, w) for the minimum-spanning-tree
    edge weights w and one essential pair (0, inf).
    """
    dist = _check_distance_matrix(dist)
    n = len(dist)
    ei, ej, w = _sorted_edges(dist)
    merging = _kruskal(n, ei, ej)
    deaths = np.concatenate([w[merging], [np.inf]])
    return PersistenceDiagram.from_pairs(np.column_stack([np.zeros(n), deaths]), 0)


def _triangles(n, edge_rank):
    """All triangles whose three edges are present, as edge-rank triples."""
    rows = []
    for i in range(n - 2):
        j, k = np.triu_indices(n - i - 1, 1)
        j, k = j + i + 1, k + i + 1
        e_ij, e_ik, e_jk = edge_rank[i, j], edge_rank[i, k], edge_rank[j, k]
        ok = (e_ij >= 0) & (e_ik >= 0) & (e_jk >= 0)
        if np.any(ok):
            rows.append(np.column_stack([e_ij[ok], e_ik[ok], e_jk[ok]]))
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    return np.vstack(rows).astype(np.int64)


def h1_persistence(dist, max_scale, max_points=MAX_H1_POINTS):
    """One-dimensional persistence of the Rips 2-skeleton up to ``max_scale``.

    Classes still alive at ``max_scale`` are reported with death = max_scale.
    Pairs of zero persistence are dropped.
    """
    dist = _check_distance_matrix(dist)
    n = len(dist)
    if n > max_points:
        raise InputError(f"{n} points exceeds the H1 cap of {max_points}; subsample first")
    if not max_scale > 0:
        raise ConfigError("max_scale must be positive")
    ei, ej, ew = _sorted_edges(dist, max_scale)
    n_edges = len(ew)
    if n_edges == 0 or n < 3:
        return PersistenceDiagram.from_pairs(np.zeros((0, 2)), 1)

    edge_rank = np.full((n, n), -1, dtype=np.int64)
    edge_rank[ei, ej] = np.arange(n_edges)
    edge_rank[ej, ei] = np.arange(n_edges)

    tri = _triangles(n, edge_rank)
    tri.sort(axis=1)
    # triangle value is the weight of its latest edge; ties broken by the
    # edge ranks in reverse lexicographic order
    t_order = np.lexsort((tri[:, 0], tri[:, 1], tri[:, 2]))
    tri = tri[t_order]
    tri_val = ew[tri[:, 2]] if len(tri) else np.zeros(0)
    tri_latest = tri[:, 2]

    # coboundary of every edge as the ranks of the triangles containing it
    flat_e = tri.reshape(-1)
    flat_t = np.repeat(np.arange(len(tri)), 3)
    by_edge = np.argsort(flat_e, kind="stable")
    flat_e, flat_t = flat_e[by_edge], flat_t[by_edge]
    starts = np.searchsorted(flat_e, np.arange(n_edges + 1))

    negative = np.zeros(n_edges, dtype=bool)
    negative[_kruskal(n, ei, ej)] = True

    pivot_col = {}  # triangle rank -> reduced column (bitset) or None
    cache = {}
    pairs = []

    def coboundary(e):
        col = 0
        for t in flat_t[starts[e]:starts[e + 1]]:
            col |= 1 << int(t)
        return col

    for e in range(n_edges - 1, -1, -1):
        if negative[e]:
            continue  # clearing: paired in dimension 0
        lo, hi = starts[e], starts[e + 1]
        if lo == hi:
            pairs.append((ew[e], max_scale))
            continue
        piv = int(flat_t[lo:hi].min())
        if tri_latest[piv] == e:
            # apparent pair; no other column can ever reach this pivot
            pivot_col[piv] = None
            pairs.append((ew[e], tri_val[piv]))
            continue
        col = coboundary(e)
        while col:
            piv = (col & -col).bit_length() - 1
            if piv not in pivot_col:
                break
            other = pivot_col[piv]
            if other is None:
                other = cache.setdefault(piv, coboundary(int(tri_latest[piv])))
            col ^= other
        if col:
            pivot_col[piv] = col
            pairs.append((ew[e], tri_val[piv]))
        else:
            pairs.append((ew[e], max_scale))

    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    arr = arr[arr[:, 1] > arr[:, 0]]
    arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
    return PersistenceDiagram.from_pairs(arr, 1)


def betti_curve(diag, dim, L=BETTI_RESOLUTION):
    """Count of finite pairs with death > t on L thresholds from 0 to p95(deaths)."""
    if L < 1:
        raise ConfigError("L must be >= 1")
    deaths = diag.finite(dim)[:, 1]
    if len(deaths) == 0:
        return np.zeros(L)
    thresholds = np.linspace(0.0, np.percentile(deaths, 95), L)
    return (deaths[None, :] > thresholds[:, None]).sum(axis=1).astype(float)


def persistence_entropy(diag, dim):
    pers = diag.persistence(dim)
    total = pers.sum()
    if len(pers) <= 1 or total <= 0:
        return 0.0
    p = pers / total
    # the log offset can push a one-lifetime diagram a hair below zero
    return max(0.0, float(-np.sum(p * np.log(p + ENTROPY_EPS))))


def amplitude(diag, dim):
    """l2 norm of the finite lifetimes."""
    pers = diag.persistence(dim)
    return float(np.sqrt(np.sum(pers ** 2)))


def n_persistent(diag, dim):
    """Number of finite pairs whose lifetime is strictly above the median."""
    pers = diag.persistence(dim)
    if len(pers) == 0 or pers.sum() <= 0:
        return 0
    return int(np.sum(pers > np.median(pers)))


def diagrams(points, n_sub=80, rng=None):
    """H0 and H1 diagrams of a (possibly subsampled) point cloud.

    Returns ``(h0, h1, sample)`` where ``sample`` is the cloud actually used.
    H1 is truncated at the 95th percentile of the pairwise distances.
    """
    x = as_point_cloud(points)
    if n_sub < 2:
        raise ConfigError("n_sub must be >= 2")
    if len(x) > n_sub:
        rng = np.random.default_rng(rng)
        x = x[np.sort(rng.choice(len(x), n_sub, replace=False))]
    dist = pairwise_distances(x)
    h0 = h0_persistence(dist)
    h1 = PersistenceDiagram.from_pairs(np.zeros((0, 2)), 1)
    if len(x) >= 3:
        max_scale = float(np.percentile(dist[np.triu_indices(len(x), 1)], 95))
        if max_scale > 0:
            h1 = h1_persistence(dist, max_scale)
    return h0, h1, x


def descriptor_from_diagrams(h0, h1, L=BETTI_RESOLUTION):
    h0_pairs = h0.of_dim(0)
    beta0 = float(np.sum(np.isinf(h0_pairs[:, 1])))
    beta1 = float(np.sum(h1.persistence(1) > 0))
    scalars = [
        beta0, beta1,
        persistence_entropy(h0, 0), persistence_entropy(h1, 1),
        amplitude(h0, 0), amplitude(h1, 1),
        float(n_persistent(h0, 0)), float(n_persistent(h1, 1)),
    ]
    return np.concatenate([scalars, betti_curve(h0, 0, L), betti_curve(h1, 1, L)])


def descriptor(points, n_sub=80, L=BETTI_RESOLUTION, rng=None):
    """Topological descriptor of a client's feature matrix.

    Layout: [beta0, beta1, H0 entropy, H1 entropy, A0, A1, n0, n1,
    b0 curve (L), b1 curve (L)], i.e. 48 values for L = 20. If the cloud
    has more than ``n_sub`` points, ``n_sub`` of them are drawn uniformly
    without replacement from ``rng``.
    """
    h0, h1, _ = diagrams(points, n_sub=n_sub, rng=rng)
    return descriptor_from_diagrams(h0, h1, L)


def descriptor_fields(desc):
    """Named view of a descriptor vector (for logging and CSV output)."""
    desc = np.asarray(desc, dtype=float)
    out = {name: float(desc[i]) for i, name in enumerate(SCALAR_FIELDS)}
    L = (len(desc) - len(SCALAR_FIELDS)) // 2
    out["b0_curve"] = desc[8:8 + L].copy()
    out["b1_curve"] = desc[8 + L:8 + 2 * L].copy()
    return out


def descriptor_to_bytes(desc):
    """Wire payload: the descriptor as little-endian IEEE-754 doubles."""
    return np.asarray(desc, dtype="<f8").tobytes()


def descriptor_from_bytes(payload):
    return np.frombuffer(payload, dtype="<f8").copy()


def _diagonal_cost(pairs, p):
    return ((pairs[:, 1] - pairs[:, 0]) / np.sqrt(2.0)) ** p


def _matching_costs(a, b, p):
    """Augmented (m_a + m_b) square cost matrix for the partial matching."""
    ma, mb = len(a), len(b)
    size = ma + mb
    big = np.inf
    cost = np.zeros((size, size))
    if ma and mb:
        cost[:ma, :mb] = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2) ** p
    cost[:ma, mb:] = big
    cost[ma:, :mb] = big
    if ma:
        cost[np.arange(ma), mb + np.arange(ma)] = _diagonal_cost(a, p)
    if mb:
        cost[ma + np.arange(mb), np.arange(mb)] = _diagonal_cost(b, p)
    return cost


def wasserstein_distance(a, b, dim, p=2.0):
    """p-Wasserstein distance between the finite pairs of two diagrams.

    Points may be matched to each other (Euclidean ground cost) or to their
    projection on the diagonal. ``p = inf`` gives the bottleneck value of the
    same matching problem, found by thresholding the assignment solver.
    """
    if not p >= 1:
        raise ConfigError("p must be >= 1")
    pa, pb = a.finite(dim), b.finite(dim)
    if len(pa) + len(pb) == 0:
        return 0.0
    if np.isinf(p):
        return _bottleneck(pa, pb)
    cost = _matching_costs(pa, pb, p)
    finite = np.where(np.isinf(cost), 1e300, cost)
    rows, cols = linear_sum_assignment(finite)
    # fsum is order independent, which keeps the distance exactly symmetric
    return math.fsum(cost[rows, cols].tolist()) ** (1.0 / p)


def _bottleneck(pa, pb):
    cost = _matching_costs(pa, pb, 1.0)
    candidates = np.unique(cost[np.isfinite(cost)])
    lo, hi = 0, len(candidates) - 1
    # smallest threshold that still admits a perfect matching
    while lo < hi:
        mid = (lo + hi) // 2
        blocked = (cost > candidates[mid]).astype(float)
        rows, cols = linear_sum_assignment(blocked)
        if blocked[rows, cols].sum() == 0:
            hi = mid
        else:
            lo = mid + 1
    return float(candidates[lo])


def descriptor_barycenter(descs, weights=None):
    """Weighted entrywise mean of descriptor vectors (Frechet mean in R^m)."""
    descs = np.asarray(descs, dtype=float)
    if descs.ndim != 2 or len(descs) == 0:
        raise InputError("need a non-empty list of descriptors")
    if weights is None:
        weights = np.full(len(descs), 1.0 / len(descs))
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(descs) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise InputError("weights must be non-negative, one per descriptor, and sum to 1")
    return weights @ descs

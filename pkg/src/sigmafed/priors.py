"""Exact samplers and densities for the dependent priors being approximated:
a GP with RBF kernel on a 1-d grid and the proper CAR prior on a graph,
plus client partitioning and the on-disk dataset/graph formats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf

from .errors import FormatError, NumericError, ShapeError
from .nn import SeededRng

RBF_JITTER = 1e-8

__all__ = [
    "Grid1D",
    "RbfSpec",
    "AdjacencyGraph",
    "PcarSpec",
    "ClientPartition",
    "rbf_kernel",
    "rbf_cross",
    "cholesky_lower",
    "sample_mvn_from_cov",
    "sample_mvn_from_precision",
    "pcar_precision",
    "pcar_covariance",
    "sample_pcar",
    "pcar_conditional",
    "partition_grid",
    "partition_graph",
    "lattice_graph",
    "quadrant_labels",
    "generate_training_set",
    "save_dataset",
    "load_dataset",
    "load_graph",
    "save_graph",
]


@dataclass(frozen=True)
class Grid1D:
    """Strictly increasing 1-d evaluation points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size == 0:
            raise ShapeError("grid points must be a non-empty 1-d array")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def equidistant(cls, n: int, low: float = 0.0, high: float = 1.0) -> "Grid1D":
        return cls(np.linspace(low, high, n))

    @property
    def n(self) -> int:
        return self.points.size


@dataclass(frozen=True)
class RbfSpec:
    """RBF kernel hyperparameters: k(x, x') = variance * exp(-(x-x')^2 / (2 l^2))."""

    lengthscale: float
    variance: float = 1.0

    def __post_init__(self):
        if self.lengthscale <= 0 or self.variance <= 0:
            raise ValueError("lengthscale and variance must be positive")


class AdjacencyGraph:
    """Symmetric 0/1 neighbor structure with per-node degrees.

    Nodes are 0-based. Every node must have at least one neighbor; the
    conditional CAR variance sigma^2 / m_i is undefined otherwise.
    """

    def __init__(self, n: int, neighbors: list[np.ndarray]):
        if n <= 0 or len(neighbors) != n:
            raise ShapeError("neighbor list length must equal node count")
        self.n = n
        self.neighbors = [np.asarray(sorted(set(int(j) for j in nb)), dtype=np.intp) for nb in neighbors]
        for i, nb in enumerate(self.neighbors):
            if nb.size == 0:
                raise ValueError(f"node {i} has no neighbors")
            if np.any(nb < 0) or np.any(nb >= n):
                raise ValueError(f"node {i} has a neighbor outside 0..{n - 1}")
            if i in nb:
                raise ValueError(f"node {i} lists itself as a neighbor")
            for j in nb:
                if i not in self.neighbors[int(j)]:
                    raise ValueError(f"asymmetric adjacency: {i}->{j} without {j}->{i}")
        self.degrees = np.array([nb.size for nb in self.neighbors], dtype=np.float64)

    @classmethod
    def from_edges(cls, n: int, edges) -> "AdjacencyGraph":
        """Build from a directed edge list that must already be symmetric.

        Asymmetric input is rejected rather than silently symmetrized.
        """
        pairs = set()
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) outside 0..{n - 1}")
            pairs.add((i, j))
        for i, j in pairs:
            if (j, i) not in pairs:
                raise ValueError(f"asymmetric adjacency: ({i}, {j}) without ({j}, {i})")
        nb = [[] for _ in range(n)]
        for i, j in pairs:
            nb[i].append(j)
        return cls(n, [np.asarray(x, dtype=np.intp) for x in nb])

    def adjacency_matrix(self) -> np.ndarray:
        w = np.zeros((self.n, self.n))
        for i, nb in enumerate(self.neighbors):
            w[i, nb] = 1.0
        return w

    def edge_list(self) -> list[list[int]]:
        """Both orientations of every edge, lexicographically sorted."""
        edges = []
        for i, nb in enumerate(self.neighbors):
            for j in nb:
                edges.append([i, int(j)])
        return sorted(edges)

    def is_connected(self) -> bool:
        seen = np.zeros(self.n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            i = stack.pop()
            for j in self.neighbors[i]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        return bool(seen.all())


@dataclass(frozen=True)
class PcarSpec:
    """Proper CAR hyperparameters: theta ~ N(0, sigma2 * (D - alpha W)^-1)."""

    alpha: float
    sigma2: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie strictly inside (0, 1)")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")


@dataclass(frozen=True)
class ClientPartition:
    """Ordered disjoint index blocks covering 0..n-1, one block per client."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.intp) for b in self.blocks)
        if len(blocks) < 1:
            raise ValueError("partition needs at least one client")
        total = np.concatenate(blocks) if blocks else np.array([], dtype=np.intp)
        n = total.size
        for k, b in enumerate(blocks):
            if b.size == 0:
                raise ValueError(f"client {k} has an empty block")
        if np.unique(total).size != n or total.min() != 0 or total.max() != n - 1:
            raise ValueError("blocks must be disjoint and cover 0..n-1")
        object.__setattr__(self, "blocks", blocks)

    @property
    def J(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(b.size) for b in self.blocks)

    @property
    def n(self) -> int:
        return int(sum(self.dims))


def rbf_kernel(grid: Grid1D, spec: RbfSpec) -> np.ndarray:
    """Dense RBF kernel over the grid with RBF_JITTER added to the diagonal."""
    x = grid.points
    d = x[:, None] - x[None, :]
    k = spec.variance * np.exp(-(d * d) / (2.0 * spec.lengthscale**2))
    k[np.diag_indices_from(k)] += RBF_JITTER
    return k


def rbf_cross(x1: np.ndarray, x2: np.ndarray, spec: RbfSpec) -> np.ndarray:
    """Cross-kernel between two point sets (no jitter)."""
    d = np.asarray(x1)[:, None] - np.asarray(x2)[None, :]
    return spec.variance * np.exp(-(d * d) / (2.0 * spec.lengthscale**2))


def cholesky_lower(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises NumericError naming the failing pivot."""
    c, info = dpotrf(mat, lower=1, overwrite_a=0)
    if info > 0:
        raise NumericError(f"matrix is not positive definite at pivot {info - 1}")
    if info < 0:
        raise NumericError(f"cholesky: illegal argument at position {-info}")
    return np.tril(c)


def sample_mvn_from_cov(rng: SeededRng, cov: np.ndarray) -> np.ndarray:
    """One draw from N(0, cov) via the lower Cholesky factor of cov."""
    lower = cholesky_lower(cov)
    z = rng.normal(cov.shape[0])
    return lower @ z


def sample_mvn_from_precision(rng: SeededRng, precision: np.ndarray) -> np.ndarray:
    """One draw from N(0, precision^-1).

    Solves U x = z with U the upper Cholesky factor of the precision, so
    Cov(x) = U^-1 U^-T = precision^-1 without forming any inverse.
    """
    lower = cholesky_lower(precision)
    z = rng.normal(precision.shape[0])
    return solve_triangular(lower.T, z, lower=False)


def pcar_precision(graph: AdjacencyGraph, alpha: float) -> np.ndarray:
    """Unit-variance CAR precision D - alpha * W (singular at alpha = 1)."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    p = -alpha * graph.adjacency_matrix()
    p[np.diag_indices_from(p)] = graph.degrees
    return p


def pcar_covariance(graph: AdjacencyGraph, spec: PcarSpec) -> np.ndarray:
    """Dense covariance sigma2 * (D - alpha W)^-1."""
    prec = pcar_precision(graph, spec.alpha) / spec.sigma2
    lower = cholesky_lower(prec)
    inv_l = solve_triangular(lower, np.eye(graph.n), lower=True)
    return inv_l.T @ inv_l


def sample_pcar(rng: SeededRng, graph: AdjacencyGraph, spec: PcarSpec) -> np.ndarray:
    """One draw from the proper CAR prior N(0, sigma2 (D - alpha W)^-1)."""
    precision = pcar_precision(graph, spec.alpha) / spec.sigma2
    return sample_mvn_from_precision(rng, precision)


def pcar_conditional(
    graph: AdjacencyGraph,
    spec: PcarSpec,
    i: int,
    theta_minus_i: np.ndarray,
) -> tuple[float, float]:
    """Conditional law of node i given its neighbors.

    mean = alpha * (1/m_i) * sum of neighbor values, variance = sigma2 / m_i.
    theta_minus_i is a full-length vector; the entry at i is ignored but
    every neighbor entry must be finite.
    """
    if not (0 <= i < graph.n):
        raise ShapeError(f"node index {i} outside 0..{graph.n - 1}")
    theta = np.asarray(theta_minus_i, dtype=np.float64)
    if theta.shape != (graph.n,):
        raise ShapeError("theta_minus_i must have one entry per node")
    nb = graph.neighbors[i]
    vals = theta[nb]
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"missing neighbor values for node {i}")
    m_i = graph.degrees[i]
    mean = spec.alpha * float(vals.sum()) / m_i
    return mean, spec.sigma2 / m_i


def partition_grid(grid: Grid1D, boundaries) -> ClientPartition:
    """Contiguous blocks split at interior boundary locations.

    Point x goes to the first block with x < boundary; boundaries must be
    strictly increasing and strictly inside the grid range.
    """
    bounds = [float(b) for b in boundaries]
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ValueError("boundaries must be strictly increasing")
    x = grid.points
    if bounds and (bounds[0] <= x[0] or bounds[-1] > x[-1]):
        raise ValueError("boundaries must lie inside the grid domain")
    labels = np.searchsorted(np.asarray(bounds), x, side="right")
    blocks = [np.flatnonzero(labels == j) for j in range(len(bounds) + 1)]
    return ClientPartition(tuple(blocks))


def partition_graph(graph: AdjacencyGraph, region_labels) -> ClientPartition:
    """Label-defined blocks; block order follows sorted unique labels."""
    labels = list(region_labels)
    if len(labels) != graph.n:
        raise ShapeError("need exactly one label per node")
    uniq = sorted(set(labels))
    arr = np.asarray([uniq.index(l) for l in labels])
    blocks = [np.flatnonzero(arr == k) for k in range(len(uniq))]
    return ClientPartition(tuple(blocks))


def lattice_graph(rows: int, cols: int) -> AdjacencyGraph:
    """4-neighborhood lattice, row-major node order."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges += [[i, i + 1], [i + 1, i]]
            if r + 1 < rows:
                edges += [[i, i + cols], [i + cols, i]]
    return AdjacencyGraph.from_edges(rows * cols, edges)


def quadrant_labels(rows: int, cols: int) -> list[int]:
    """Four client labels splitting a lattice into quadrants."""
    labels = []
    for r in range(rows):
        for c in range(cols):
            labels.append((0 if r < (rows + 1) // 2 else 2) + (0 if c < (cols + 1) // 2 else 1))
    return labels


class GpPrior:
    """GP prior over a fixed grid, conditional on the RBF lengthscale."""

    def __init__(self, grid: Grid1D, variance: float = 1.0):
        self.grid = grid
        self.variance = variance

    @property
    def dim(self) -> int:
        return self.grid.n

    def covariance(self, phi: float) -> np.ndarray:
        return rbf_kernel(self.grid, RbfSpec(lengthscale=phi, variance=self.variance))

    def sample(self, rng: SeededRng, phi: float) -> np.ndarray:
        return sample_mvn_from_cov(rng, self.covariance(phi))


class PcarPrior:
    """Proper CAR prior over a fixed graph, conditional on alpha."""

    def __init__(self, graph: AdjacencyGraph, sigma2: float = 1.0):
        if not graph.is_connected():
            raise ValueError("PCAR sampling requires a connected graph")
        self.graph = graph
        self.sigma2 = sigma2

    @property
    def dim(self) -> int:
        return self.graph.n

    def covariance(self, phi: float) -> np.ndarray:
        return pcar_covariance(self.graph, PcarSpec(alpha=phi, sigma2=self.sigma2))

    def sample(self, rng: SeededRng, phi: float) -> np.ndarray:
        # alpha = 0 or 1 can occur at the edges of a U(0, 1) hyperprior range;
        # nudge inside the proper-CAR domain rather than failing the draw.
        phi = min(max(phi, 1e-12), 1.0 - 1e-9)
        return sample_pcar(rng, self.graph, PcarSpec(alpha=phi, sigma2=self.sigma2))


def generate_training_set(
    rng: SeededRng,
    prior,
    phi_range: tuple[float, float],
    n_draws: int,
) -> tuple[np.ndarray, np.ndarray]:
    """i.i.d. (phi, theta) pairs with phi ~ U(phi_range) and theta ~ prior(phi).

    The stream is split per draw index, so draw i is reproducible in
    isolation and the set is independent of generation order.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    lo, hi = float(phi_range[0]), float(phi_range[1])
    if hi <= lo:
        raise ValueError("phi range must satisfy lo < hi")
    phis = np.empty(n_draws)
    thetas = np.empty((n_draws, prior.dim))
    for i in range(n_draws):
        draw_rng = rng.derive(i)
        phi = float(draw_rng.uniform(lo, hi))
        phis[i] = phi
        thetas[i] = prior.sample(draw_rng, phi)
    return phis.reshape(-1, 1), thetas


def _format_row(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_dataset(path, phi: np.ndarray, theta: np.ndarray) -> None:
    """Write the dataset format: one JSON header line, then one CSV row per
    draw with the phi columns first."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.shape[0] == 1 and theta.shape[0] != 1:
        phi = phi.T
    if phi.shape[0] != theta.shape[0]:
        raise ShapeError("phi and theta row counts differ")
    header = {"n_draws": int(theta.shape[0]), "dim": int(theta.shape[1]), "phi_dim": int(phi.shape[1])}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(theta.shape[0]):
            fh.write(_format_row(np.concatenate([phi[i], theta[i]])) + "\n")


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the dataset format back into (phi, theta) arrays."""
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
            n_draws = int(header["n_draws"])
            dim = int(header["dim"])
            phi_dim = int(header["phi_dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad dataset header in {path}: {exc}") from exc
        rows = np.empty((n_draws, phi_dim + dim))
        for i in range(n_draws):
            line = fh.readline()
            if not line:
                raise FormatError(f"dataset {path} truncated at row {i}")
            vals = line.rstrip("\n").split(",")
            if len(vals) != phi_dim + dim:
                raise FormatError(f"dataset {path} row {i} has {len(vals)} fields, expected {phi_dim + dim}")
            rows[i] = [float(v) for v in vals]
    return rows[:, :phi_dim].copy(), rows[:, phi_dim:].copy()


def load_graph(path) -> tuple[AdjacencyGraph, list | None]:
    """Read the graph JSON format: {n, edges, labels?}."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise FormatError(f"malformed graph file {path}: {exc}") from exc
    try:
        n = int(doc["n"])
        edges = doc["edges"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"graph file {path} missing n/edges: {exc}") from exc
    labels = doc.get("labels")
    if labels is not None and len(labels) != n:
        raise FormatError(f"graph file {path} has {len(labels)} labels for {n} nodes")
    try:
        graph = AdjacencyGraph.from_edges(n, edges)
    except ValueError as exc:
        raise FormatError(f"invalid graph in {path}: {exc}") from exc
    return graph, labels


def save_graph(path, graph: AdjacencyGraph, labels=None) -> None:
    doc = {"n": graph.n, "edges": graph.edge_list()}
    if labels is not None:
        doc["labels"] = list(labels)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")

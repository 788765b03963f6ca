"""Power-network topology, PMU-restricted K-hop operators and impedance edge features."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_SHUNT_EPS = 1e-2


class GridError(ValueError):
    pass


class GridParseError(GridError):
    pass


class DisconnectedGridError(GridError):
    pass


class DuplicateEdgeError(GridError):
    pass


class PmuIndexError(GridError):
    pass


class SingularAdmittanceError(GridError):
    pass


@dataclass(frozen=True)
class GridGraph:
    n_bus: int
    edges: tuple  # ((i, j, g, b), ...) with i < j
    pmu_nodes: tuple
    name: str = ""

    @property
    def n_pmu(self) -> int:
        return len(self.pmu_nodes)

    def adjacency_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_bus)]
        for i, j, _, _ in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def with_full_observability(self) -> "GridGraph":
        """Same network with a PMU at every bus."""
        return replace(self, pmu_nodes=tuple(range(self.n_bus)), name=f"{self.name}-full")


def _is_connected(n_bus: int, edges) -> bool:
    adj: list[list[int]] = [[] for _ in range(n_bus)]
    for i, j, *_ in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n_bus


def grid_from_dict(obj: dict, source: str = "<dict>") -> GridGraph:
    """Validate a parsed grid description and build a :class:`GridGraph`."""
    try:
        n_bus = int(obj["n_bus"])
        raw_edges = [(int(e[0]), int(e[1]), float(e[2]), float(e[3])) for e in obj["edges"]]
        pmu = [int(p) for p in obj["pmu_nodes"]]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise GridParseError(f"{source}: malformed grid description ({exc!r})") from exc
    if n_bus < 1:
        raise GridParseError(f"{source}: n_bus must be positive, got {n_bus}")

    edges = []
    seen = set()
    for i, j, g, b in raw_edges:
        if i == j:
            raise GridParseError(f"{source}: self-edge at bus {i}")
        if not (0 <= i < n_bus and 0 <= j < n_bus):
            raise GridParseError(f"{source}: edge ({i}, {j}) references a bus outside 0..{n_bus - 1}")
        i, j = min(i, j), max(i, j)
        if (i, j) in seen:
            raise DuplicateEdgeError(f"{source}: duplicate edge ({i}, {j})")
        seen.add((i, j))
        edges.append((i, j, g, b))
    edges.sort()

    if not pmu:
        raise PmuIndexError(f"{source}: pmu_nodes is empty")
    bad = [p for p in pmu if not 0 <= p < n_bus]
    if bad:
        raise PmuIndexError(f"{source}: pmu index out of range: {bad} (n_bus={n_bus})")
    if any(b <= a for a, b in zip(pmu, pmu[1:])):
        raise PmuIndexError(f"{source}: pmu_nodes must be strictly increasing")

    if not _is_connected(n_bus, edges):
        raise DisconnectedGridError(f"{source}: grid graph is not connected")
    return GridGraph(n_bus=n_bus, edges=tuple(edges), pmu_nodes=tuple(pmu), name=str(obj.get("name", "")))


def load_grid(path) -> GridGraph:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise GridParseError(f"{path}: cannot parse grid file ({exc})") from exc
    return grid_from_dict(obj, source=str(path))


def bundled_grid_path(name: str) -> Path:
    """Path of a bundled fixture: ``case39``, ``fig3`` or ``toy6``."""
    return Path(str(resources.files("pmurecon") / "data" / f"{name}.json"))


def load_bundled(name: str) -> GridGraph:
    return load_grid(bundled_grid_path(name))


# --------------------------------------------------------------------------
# K-hop operators
# --------------------------------------------------------------------------


def bfs_distances(g: GridGraph, source: int) -> np.ndarray:
    """Hop distance from ``source`` to every bus (-1 when unreachable)."""
    adj = g.adjacency_lists()
    dist = np.full(g.n_bus, -1, dtype=int)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


@dataclass(frozen=True)
class KHopOperatorSet:
    """Per-hop adjacency, degree and normalized operators over the PMU nodes.

    ``A[k-1]`` holds the hop-k adjacency with unit diagonal, ``S[k-1]`` the
    symmetric normalization ``D^-1/2 A D^-1/2``.  ``hop_mask[k-1]`` is the
    off-diagonal support of ``A[k-1]`` (the neighbor sets as a boolean matrix).
    """

    K: int
    order: tuple
    dist: np.ndarray  # PMU x PMU shortest-path distance in the full graph
    A: np.ndarray  # (K, N, N)
    D: np.ndarray  # (K, N) diagonal of the degree matrices
    S: np.ndarray  # (K, N, N)
    hop_mask: np.ndarray  # (K, N, N) bool

    @property
    def n(self) -> int:
        return len(self.order)

    def neighbors(self, i: int, k: int) -> list[int]:
        """Positions (in ``order``) of the hop-``k`` PMU neighbors of position ``i``."""
        return [int(j) for j in np.flatnonzero(self.hop_mask[k - 1, i])]

    def neighbor_sets(self) -> list[list[list[int]]]:
        return [[self.neighbors(i, k) for k in range(1, self.K + 1)] for i in range(self.n)]

    def any_hop_mask(self) -> np.ndarray:
        return self.hop_mask.any(axis=0)

    def permuted(self, perm) -> "KHopOperatorSet":
        """Operator set with PMU positions reordered so that new[i] = old[perm[i]]."""
        p = np.asarray(perm)
        return KHopOperatorSet(
            K=self.K,
            order=tuple(self.order[i] for i in p),
            dist=self.dist[np.ix_(p, p)],
            A=self.A[:, p][:, :, p],
            D=self.D[:, p],
            S=self.S[:, p][:, :, p],
            hop_mask=self.hop_mask[:, p][:, :, p],
        )


def build_khop_operators(g: GridGraph, K: int = DEFAULT_K) -> KHopOperatorSet:
    """Hop-k PMU adjacencies, k = 1..K, from full-graph shortest-path distances."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    pmu = np.asarray(g.pmu_nodes)
    n = len(pmu)
    dist = np.stack([bfs_distances(g, int(p))[pmu] for p in pmu])
    eye = np.eye(n, dtype=bool)
    hop_mask = np.stack([(dist == k) & ~eye for k in range(1, K + 1)])
    A = hop_mask.astype(np.float64) + eye
    D = A.sum(axis=2)
    inv_sqrt = 1.0 / np.sqrt(D)
    S = inv_sqrt[:, :, None] * A * inv_sqrt[:, None, :]
    isolated = ~hop_mask.any(axis=(0, 2))
    if isolated.any():
        log.warning("PMU nodes %s have no PMU neighbor within %d hops; they attend only to themselves",
                    [int(pmu[i]) for i in np.flatnonzero(isolated)], K)
    return KHopOperatorSet(K=K, order=tuple(int(p) for p in pmu), dist=dist, A=A, D=D, S=S,
                           hop_mask=hop_mask)


# --------------------------------------------------------------------------
# impedance edge features
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeFeatureMatrix:
    values: np.ndarray
    order: tuple


def bus_admittance(g: GridGraph) -> np.ndarray:
    Y = np.zeros((g.n_bus, g.n_bus), dtype=complex)
    for i, j, gij, bij in g.edges:
        y = complex(gij, bij)
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def impedance_edge_features(g: GridGraph, shunt_eps: float = DEFAULT_SHUNT_EPS,
                            max_cond: float = 1e12) -> EdgeFeatureMatrix:
    """``|(Y + eps I)^-1|`` restricted to the PMU buses."""
    if shunt_eps <= 0:
        raise ValueError("shunt_eps must be positive")
    Y = bus_admittance(g) + shunt_eps * np.eye(g.n_bus)
    cond = np.linalg.cond(Y)
    if not np.isfinite(cond) or cond > max_cond:
        raise SingularAdmittanceError(
            f"regularized admittance matrix is numerically singular (condition estimate {cond:.3e})")
    Z = np.linalg.inv(Y)
    pmu = list(g.pmu_nodes)
    E = np.abs(Z)[np.ix_(pmu, pmu)]
    return EdgeFeatureMatrix(values=E, order=tuple(pmu))

"""Graph data model, synthetic generators, and on-disk formats.

Graphs are undirected, weighted, and dense: small enough here that an n x n
float64 adjacency is simpler and faster than sparse bookkeeping.  All
randomness flows through ``Rng``, a counter-based stream keyed by
(seed, purpose tag, trial index), so concurrent trials draw from disjoint
reproducible streams.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELED = -1


class GraphFormatError(ValueError):
    """Malformed graph directory contents."""


def _tag_int(tag: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "big")


@dataclass(frozen=True)
class Rng:
    """Reproducible stream id: same (seed, stream, trial) gives the same draws."""

    seed: int
    stream: str = "root"
    trial: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & (2 ** 64 - 1),
                                     _tag_int(self.stream), self.trial])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream: str, trial: int = 0) -> "Rng":
        # the parent's trial index folds into the path so that siblings of
        # different trials never share grandchildren
        return Rng(self.seed, f"{self.stream}#{self.trial}/{stream}", trial)


class Graph:
    """Undirected weighted graph with node features and optional labels.

    ``labels`` entries are class ids; UNLABELED (-1) marks nodes without one.
    The adjacency must be symmetric and nonnegative with a zero diagonal.
    """

    __slots__ = ("X", "A", "labels", "domain")

    def __init__(self, X, A, labels=None, domain: str = ""):
        self.X = np.asarray(X, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.domain = str(domain)
        self._validate()

    def _validate(self) -> None:
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {self.X.shape}")
        n = self.X.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A shape {self.A.shape} does not match {n} nodes")
        if not np.array_equal(self.A, self.A.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(self.A < 0):
            raise ValueError("adjacency weights must be nonnegative")
        if np.any(np.diag(self.A) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.A)):
            raise ValueError("graph contains non-finite values")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ValueError("labels length must equal node count")
            if np.any(self.labels < UNLABELED):
                raise ValueError("labels must be class ids or -1 (unlabeled)")

    @property
    def num_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        valid = self.labels[self.labels >= 0]
        return int(valid.max()) + 1 if valid.size else 0

    def edge_list(self) -> list[tuple[int, int, float]]:
        """Each undirected edge once, (u, v, w) with u < v, sorted."""
        iu, ju = np.nonzero(np.triu(self.A, k=1))
        return [(int(u), int(v), float(self.A[u, v])) for u, v in zip(iu, ju)]

    def copy(self) -> "Graph":
        return Graph(self.X.copy(), self.A.copy(),
                     None if self.labels is None else self.labels.copy(),
                     self.domain)

    def __repr__(self) -> str:
        return (f"Graph(n={self.num_nodes}, d={self.feature_dim}, "
                f"edges={int(np.count_nonzero(self.A)) // 2}, domain={self.domain!r})")


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture around m fixed centroids scaled by centroid_scale."""

    m: int
    centroid_scale: float
    noise_sigma: float
    n_per_class: int
    dim: int

    def validate(self) -> None:
        if self.m < 2:
            raise ValueError("mixture needs at least 2 classes")
        if self.centroid_scale < 1.0:
            raise ValueError("centroid_scale must be >= 1")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


@dataclass(frozen=True)
class SbmSpec:
    """Multi-domain stochastic block model with mixture features."""

    num_domains: int
    classes_per_domain: int
    nodes_per_class: int
    p_in: float
    p_out: float
    feature_dim: int
    feature_centroid_scale: float = 1.0
    feature_noise: float = 0.5

    def validate(self) -> None:
        if self.num_domains < 1 or self.classes_per_domain < 1 or self.nodes_per_class < 1:
            raise ValueError("domain, class, and node counts must be >= 1")
        if not (0.0 <= self.p_out < self.p_in <= 1.0):
            raise ValueError("need 0 <= p_out < p_in <= 1")
        if self.feature_dim < self.classes_per_domain - 1:
            raise ValueError("feature_dim too small for class simplex")
        if self.feature_noise < 0.0:
            raise ValueError("feature_noise must be >= 0")


def sym_normalize(A) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2}; isolated nodes keep self-weight 1."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(A < 0):
        raise ValueError("adjacency weights must be nonnegative")
    with_loops = A + np.eye(A.shape[0])
    inv_sqrt = 1.0 / np.sqrt(with_loops.sum(axis=1))
    # outer product keeps the result bit-symmetric (commutativity, not associativity)
    return with_loops * np.outer(inv_sqrt, inv_sqrt)


def ego_subgraph(g: Graph, v: int, min_size: int, max_size: int,
                 rng: Rng | None = None) -> tuple[Graph, int]:
    """Breadth-first ball around v, truncated at max_size nodes.

    Frontier ties break by ascending node id; when a frontier overflows the
    budget, lowest ids are kept.  A connected component smaller than min_size
    is returned whole.  Returns the induced subgraph and v's local index.
    """
    del rng  # expansion is deterministic; parameter kept for interface parity
    n = g.num_nodes
    if not (1 <= min_size <= max_size <= n):
        raise ValueError(f"need 1 <= min_size <= max_size <= {n}")
    if not (0 <= v < n):
        raise ValueError(f"node id {v} out of range")

    visited = np.zeros(n, dtype=bool)
    visited[v] = True
    order = [v]
    frontier = [v]
    while frontier and len(order) < max_size:
        nxt: list[int] = []
        for u in frontier:
            for w in np.nonzero(g.A[u])[0]:
                if not visited[w]:
                    visited[w] = True
                    nxt.append(int(w))
        nxt.sort()
        room = max_size - len(order)
        order.extend(nxt[:room])
        frontier = nxt[:room]

    idx = np.array(order, dtype=np.intp)
    sub = Graph(g.X[idx], g.A[np.ix_(idx, idx)],
                None if g.labels is None else g.labels[idx], g.domain)
    return sub, 0


def simplex_centroids(m: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """m unit-separated points (regular simplex vertices) in R^dim, scaled.

    Built from e_i/sqrt(2) in R^m, centered, and rotated by a Householder
    reflection so the all-ones direction vanishes; the simplex then lives in
    the first m-1 coordinates and is zero-padded to dim.
    """
    if m < 2:
        raise ValueError("need at least 2 centroids")
    if dim < m - 1:
        raise ValueError(f"dim={dim} cannot embed a {m}-vertex simplex")
    pts = (np.eye(m) - 1.0 / m) / np.sqrt(2.0)  # centered; pairwise distance 1
    u = np.ones(m) / np.sqrt(m)
    w = u - np.eye(m)[m - 1]
    wn = np.dot(w, w)
    reflected = pts if wn < 1e-30 else pts - 2.0 * np.outer(pts @ w, w) / wn
    out = np.zeros((m, dim))
    out[:, : m - 1] = reflected[:, : m - 1]
    return out * float(scale)


def mixture_centroids(m: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """Fixed centroid layout whose pairwise distances all scale with `scale`.

    The regular simplex when it fits; for dim < m-1, m points evenly spaced
    on a circle in the first two coordinates (adjacent distance = scale) or
    on a line when dim == 1.
    """
    if dim >= m - 1:
        return simplex_centroids(m, dim, scale)
    if dim >= 2:
        theta = 2.0 * np.pi * np.arange(m) / m
        out = np.zeros((m, dim))
        radius = scale / (2.0 * np.sin(np.pi / m))
        out[:, 0] = radius * np.cos(theta)
        out[:, 1] = radius * np.sin(theta)
        return out
    return (np.arange(m) - (m - 1) / 2.0)[:, None] * float(scale)


def gen_gaussian_mixture(spec: MixtureSpec, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Class-major points: centroid + isotropic Gaussian noise."""
    spec.validate()
    centroids = mixture_centroids(spec.m, spec.dim, spec.centroid_scale)
    labels = np.repeat(np.arange(spec.m), spec.n_per_class)
    noise = rng.generator().normal(size=(labels.size, spec.dim)) * spec.noise_sigma
    return centroids[labels] + noise, labels


def gen_sbm(spec: SbmSpec, rng: Rng) -> list[Graph]:
    """One block-model graph per domain, features from a class simplex."""
    spec.validate()
    graphs = []
    for d in range(spec.num_domains):
        gen = rng.child("sbm-domain", d).generator()
        labels = np.repeat(np.arange(spec.classes_per_domain), spec.nodes_per_class)
        n = labels.size
        centroids = simplex_centroids(max(spec.classes_per_domain, 2), spec.feature_dim,
                                      spec.feature_centroid_scale)
        X = centroids[labels] + gen.normal(size=(n, spec.feature_dim)) * spec.feature_noise
        same = labels[:, None] == labels[None, :]
        prob = np.where(same, spec.p_in, spec.p_out)
        draw = gen.random(size=(n, n))
        upper = np.triu(draw < prob, k=1)
        A = (upper | upper.T).astype(np.float64)
        graphs.append(Graph(X, A, labels, domain=f"domain{d}"))
    return graphs


# ------------------------------------------------------------------- disk IO


def save_graph(g: Graph, path) -> None:
    """Write the directory layout: meta, nodes.csv, edges.csv."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = [
        f"name {path.name}",
        f"num_nodes {g.num_nodes}",
        f"feature_dim {g.feature_dim}",
        f"num_classes {g.num_classes}",
        f"domain {g.domain}",
    ]
    (path / "meta").write_text("\n".join(meta) + "\n")

    with open(path / "nodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "label"] + [f"f{j}" for j in range(g.feature_dim)])
        for i in range(g.num_nodes):
            label = UNLABELED if g.labels is None else int(g.labels[i])
            writer.writerow([i, label] + [f"{v:.17g}" for v in g.X[i]])

    with open(path / "edges.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for u, v, w in g.edge_list():
            writer.writerow([u, v, f"{w:.17g}"])


def _fail(name: str, line: int, msg: str):
    raise GraphFormatError(f"{name}, line {line}: {msg}")


def load_graph(path) -> Graph:
    path = Path(path)
    meta: dict[str, str] = {}
    for lineno, raw in enumerate((path / "meta").read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split(maxsplit=1)
        if len(parts) != 2:
            _fail("meta", lineno, f"expected 'key value', got {raw!r}")
        meta[parts[0]] = parts[1]
    for key in ("num_nodes", "feature_dim", "num_classes"):
        if key not in meta:
            _fail("meta", 0, f"missing key {key!r}")
    n = int(meta["num_nodes"])
    d = int(meta["feature_dim"])
    num_classes = int(meta["num_classes"])

    X = np.zeros((n, d))
    labels = np.full(n, UNLABELED, dtype=np.int64)
    with open(path / "nodes.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["node_id", "label"]:
        _fail("nodes.csv", 1, "bad header")
    if len(rows) - 1 != n:
        _fail("nodes.csv", len(rows), f"expected {n} node rows, found {len(rows) - 1}")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2 + d:
            _fail("nodes.csv", lineno, f"expected {2 + d} columns, got {len(row)}")
        try:
            nid = int(row[0])
            label = int(row[1])
            feats = [float(v) for v in row[2:]]
        except ValueError:
            _fail("nodes.csv", lineno, "non-numeric entry")
        if not (0 <= nid < n):
            _fail("nodes.csv", lineno, f"node id {nid} out of range")
        if label != UNLABELED and not (0 <= label < num_classes):
            _fail("nodes.csv", lineno, f"label {label} out of range")
        X[nid] = feats
        labels[nid] = label

    A = np.zeros((n, n))
    with open(path / "edges.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["src", "dst"]:
        _fail("edges.csv", 1, "bad header")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) not in (2, 3):
            _fail("edges.csv", lineno, f"expected 2 or 3 columns, got {len(row)}")
        try:
            u, v = int(row[0]), int(row[1])
            w = float(row[2]) if len(row) == 3 else 1.0
        except ValueError:
            _fail("edges.csv", lineno, "non-numeric entry")
        if not (0 <= u < n and 0 <= v < n):
            _fail("edges.csv", lineno, f"edge ({u},{v}) out of range")
        if u == v:
            _fail("edges.csv", lineno, "self-loops are not allowed")
        if w < 0:
            _fail("edges.csv", lineno, "negative weight")
        if A[u, v] != 0.0:
            _fail("edges.csv", lineno,
                  f"edge ({u},{v}) already listed; each undirected edge appears once")
        A[u, v] = w
        A[v, u] = w

    all_unlabeled = bool(np.all(labels == UNLABELED))
    return Graph(X, A, None if all_unlabeled else labels,
                 domain=meta.get("domain", ""))

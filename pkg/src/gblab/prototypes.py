"""Farthest-point sampling over embeddings and a Monte Carlo check that
larger class separation makes the sample cover more classes.

The sampler is the greedy max-min rule: start from a seed point, then pick
whichever point lies farthest from everything chosen so far.  Ties break to
the lowest index, and already-chosen points are excluded, so the result is
always a list of k distinct indices.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, node_embedding
from .graphcore import Graph, MixtureSpec, Rng, ego_subgraph, gen_gaussian_mixture


@dataclass
class PrototypeSet:
    """Anchor embeddings with provenance back to (graph id, node id)."""

    embeddings: np.ndarray
    sources: list[tuple[int, int]]
    k: int
    seed_index: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.embeddings.shape[0] != self.k or len(self.sources) != self.k:
            raise ValueError("embeddings and sources must both have k entries")


@dataclass(frozen=True)
class CoverageEstimate:
    """Per-separation estimates of P(classes covered >= r)."""

    lambdas: tuple[float, ...]
    successes: tuple[int, ...]
    trials: int
    r: int
    k: int
    slack: float

    @property
    def p_hat(self) -> tuple[float, ...]:
        return tuple(s / self.trials for s in self.successes)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "trials", "successes", "p_hat"])
            for lam, s, p in zip(self.lambdas, self.successes, self.p_hat):
                writer.writerow([f"{lam:.17g}", self.trials, s, f"{p:.17g}"])


def fps(points, k: int, seed_index: int) -> list[int]:
    """Greedy max-min selection of k distinct point indices."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    if not (0 <= seed_index < n):
        raise ValueError(f"seed index {seed_index} out of range")
    selected = [int(seed_index)]
    min_dist = np.linalg.norm(pts - pts[seed_index], axis=1)
    min_dist[seed_index] = -1.0  # chosen points never win the argmax
    for _ in range(k - 1):
        nxt = int(np.argmax(min_dist))  # first maximum = lowest index on ties
        selected.append(nxt)
        np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1), out=min_dist)
        min_dist[nxt] = -1.0
    return selected


def default_k(total_nodes: int) -> int:
    """Desk-scale anchor budget: 2% of nodes, but never fewer than 8."""
    return max(8, -(-total_nodes // 50))


def ego_embeddings(params: EncoderParams, graphs: list[Graph],
                   min_size: int = 15, max_size: int = 30,
                   ) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Embed every node inside its own breadth-first neighborhood."""
    rows = []
    sources = []
    for gid, g in enumerate(graphs):
        lo = min(min_size, g.num_nodes)
        hi = min(max_size, g.num_nodes)
        for v in range(g.num_nodes):
            sub, local = ego_subgraph(g, v, lo, hi)
            rows.append(node_embedding(params, sub, local))
            sources.append((gid, v))
    return np.array(rows), sources


def build_prototype_set(params: EncoderParams, graphs: list[Graph], k: int,
                        rng: Rng, min_size: int = 15, max_size: int = 30,
                        ) -> PrototypeSet:
    """Farthest-point sample of k node embeddings across all graphs."""
    emb, sources = ego_embeddings(params, graphs, min_size, max_size)
    total = emb.shape[0]
    if not (1 <= k <= total):
        raise ValueError(f"k={k} must lie in [1, {total}]")
    seed_index = int(rng.child("fps-seed").generator().integers(total))
    order = fps(emb, k, seed_index)
    return PrototypeSet(emb[order], [sources[i] for i in order], k, seed_index)


def coverage_count(selected_indices, labels) -> int:
    labels = np.asarray(labels)
    return int(np.unique(labels[np.asarray(selected_indices, dtype=np.intp)]).size)


def verify_fps_separation_monotonicity(spec_base: MixtureSpec, lambdas, k: int,
                                       r: int, trials: int, rng: Rng,
                                       ) -> tuple[CoverageEstimate, bool]:
    """Estimate P(coverage >= r) at each separation scale and test that the
    estimates are nondecreasing up to Hoeffding slack.

    Trials are coupled: trial t reuses the same noise stream and the same
    seed point across every scale, so only the centroid geometry varies.
    """
    lambdas = [float(v) for v in lambdas]
    if any(b < a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambdas must be sorted ascending")
    if trials < 100:
        raise ValueError("need at least 100 trials")
    n = spec_base.m * spec_base.n_per_class
    seed_points = [int(rng.child("fps-seed", t).generator().integers(n))
                   for t in range(trials)]
    successes = []
    for lam in lambdas:
        spec = dataclasses.replace(spec_base, centroid_scale=lam)
        hits = 0
        for t in range(trials):
            pts, labels = gen_gaussian_mixture(spec, rng.child("mix-noise", t))
            if coverage_count(fps(pts, k, seed_points[t]), labels) >= r:
                hits += 1
        successes.append(hits)
    delta = 0.05
    slack = 2.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * trials))
    est = CoverageEstimate(tuple(lambdas), tuple(successes), trials, r, k, slack)
    p = est.p_hat
    verdict = all(p[i + 1] >= p[i] - slack for i in range(len(p) - 1))
    return est, verdict

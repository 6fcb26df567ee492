"""Node-adaptive trigger generation and the attack training loop.

The trigger is a 3-node clique whose shared feature vector comes from a
small MLP conditioned on the victim node's features and a sampled anchor
embedding.  Training pushes the victim's embedding in the triggered graph
toward that anchor (effectiveness) while keeping the trigger feature close
to the victim's own features (stealth); an optional third term from the
persistence module rewards surviving encoder perturbation.

The encoder is never updated here.  Its weights enter every forward pass as
constants, and a bit-identity check of that is part of the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, gcn_apply
from .graphcore import UNLABELED, Graph, Rng, ego_subgraph, sym_normalize

log = logging.getLogger(__name__)

TRIGGER_NODES = 3
GENERATOR_HIDDEN = 128


@dataclass
class TriggerGeneratorParams:
    """Two-layer perceptron mapping [victim features, anchor] to a trigger
    feature vector.  Hidden width is fixed at 128."""

    Wa: np.ndarray
    ba: np.ndarray
    Wb: np.ndarray
    bb: np.ndarray

    def __post_init__(self):
        self.Wa = np.asarray(self.Wa, dtype=np.float64)
        self.ba = np.asarray(self.ba, dtype=np.float64)
        self.Wb = np.asarray(self.Wb, dtype=np.float64)
        self.bb = np.asarray(self.bb, dtype=np.float64)
        if self.Wa.shape[1] != GENERATOR_HIDDEN:
            raise ValueError(f"generator hidden width must be {GENERATOR_HIDDEN}")
        if self.ba.shape != (GENERATOR_HIDDEN,) or self.Wb.shape[0] != GENERATOR_HIDDEN:
            raise ValueError("generator layer shapes are inconsistent")
        if self.bb.shape != (self.Wb.shape[1],):
            raise ValueError("output bias does not match output width")
        for arr in (self.Wa, self.ba, self.Wb, self.bb):
            if not np.all(np.isfinite(arr)):
                raise ValueError("generator parameters must be finite")

    @property
    def input_width(self) -> int:
        return self.Wa.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.Wb.shape[1]

    def items(self):
        return [("Wa", self.Wa), ("ba", self.ba), ("Wb", self.Wb), ("bb", self.bb)]

    @staticmethod
    def from_items(named: dict) -> "TriggerGeneratorParams":
        return TriggerGeneratorParams(named["Wa"], named["ba"], named["Wb"], named["bb"])


@dataclass
class StaticTrigger:
    """Ablation stand-in: one free feature vector shared by every node."""

    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 1:
            raise ValueError("static trigger must be a flat feature vector")

    def items(self):
        return [("static_x", self.x)]

    @staticmethod
    def from_items(named: dict) -> "StaticTrigger":
        return StaticTrigger(named["static_x"])


@dataclass(frozen=True)
class AttackTrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    epochs: int = 20
    lr: float = 0.01
    random_target_instead_of_fps: bool = False
    static_trigger: bool = False
    disable_persistence: bool = False
    readout: str = "node"  # "node" or "pooled" victim embedding

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr <= 0 or self.epochs < 0:
            raise ValueError("lr must be positive and epochs nonnegative")
        if self.readout not in ("node", "pooled"):
            raise ValueError("readout must be 'node' or 'pooled'")


@dataclass
class TriggeredGraph:
    """A graph with the 3-node trigger appended at the end."""

    graph: Graph
    target_index: int
    prototype_id: int = -1

    def __post_init__(self):
        n = self.graph.num_nodes - TRIGGER_NODES
        if n < 1 or not (0 <= self.target_index < n):
            raise ValueError("target index must point into the original block")
        A, X = self.graph.A, self.graph.X
        tri = range(n, n + TRIGGER_NODES)
        for a in tri:
            for b in tri:
                if a != b and A[a, b] != 1.0:
                    raise ValueError("trigger nodes must form a unit-weight clique")
            if A[a, self.target_index] != 1.0:
                raise ValueError("every trigger node must attach to the target")
        if not (np.array_equal(X[n], X[n + 1]) and np.array_equal(X[n], X[n + 2])):
            raise ValueError("trigger nodes must share one feature vector")

    @property
    def original_size(self) -> int:
        return self.graph.num_nodes - TRIGGER_NODES


def default_alpha_beta_grid() -> list[float]:
    """Five log-spaced loss-weight candidates on [1e-2, 1e0]."""
    return [float(v) for v in np.logspace(-2.0, 0.0, 5)]


def init_generator(feature_dim: int, embed_dim: int, rng: Rng) -> TriggerGeneratorParams:
    gen = rng.generator()
    width = feature_dim + embed_dim

    def glorot(n_in, n_out):
        a = np.sqrt(6.0 / (n_in + n_out))
        return gen.uniform(-a, a, size=(n_in, n_out))

    return TriggerGeneratorParams(
        glorot(width, GENERATOR_HIDDEN), np.zeros(GENERATOR_HIDDEN),
        glorot(GENERATOR_HIDDEN, feature_dim), np.zeros(feature_dim))


def trigger_apply(wa: ad.Tensor, ba: ad.Tensor, wb: ad.Tensor, bb: ad.Tensor,
                  x_row: ad.Tensor, e_row: ad.Tensor) -> ad.Tensor:
    """Differentiable trigger feature: MLP over the concatenated inputs."""
    joint = ad.concat(x_row, e_row, axis=1)
    hidden = ad.relu(ad.add_bias(ad.matmul(joint, wa), ba))
    return ad.add_bias(ad.matmul(hidden, wb), bb)


def generate_trigger_feature(gen: TriggerGeneratorParams, x_i, e_j) -> np.ndarray:
    """Trigger feature values for one (victim, anchor) pair."""
    x_i = np.asarray(x_i, dtype=np.float64).reshape(1, -1)
    e_j = np.asarray(e_j, dtype=np.float64).reshape(1, -1)
    if x_i.shape[1] + e_j.shape[1] != gen.input_width:
        raise ValueError(f"input widths {x_i.shape[1]}+{e_j.shape[1]} != "
                         f"generator width {gen.input_width}")
    out = trigger_apply(ad.constant(gen.Wa), ad.constant(gen.ba),
                        ad.constant(gen.Wb), ad.constant(gen.bb),
                        ad.constant(x_i), ad.constant(e_j))
    return out.values[0]


def triggered_adjacency(A: np.ndarray, target: int) -> np.ndarray:
    """Adjacency with the 3-clique appended and wired to the target."""
    n = A.shape[0]
    out = np.zeros((n + TRIGGER_NODES, n + TRIGGER_NODES))
    out[:n, :n] = A
    tri = range(n, n + TRIGGER_NODES)
    for a in tri:
        for b in tri:
            if a != b:
                out[a, b] = 1.0
        out[a, target] = out[target, a] = 1.0
    return out


def inject_trigger(g: Graph, x_tri, target: int, prototype_id: int = -1) -> TriggeredGraph:
    """Append the trigger clique; the original block is copied unchanged."""
    if not (0 <= target < g.num_nodes):
        raise ValueError(f"target {target} out of range")
    x_tri = np.asarray(x_tri, dtype=np.float64).reshape(-1)
    if x_tri.shape != (g.feature_dim,):
        raise ValueError(f"trigger feature dim {x_tri.shape} != {g.feature_dim}")
    X = np.vstack([g.X, np.tile(x_tri, (TRIGGER_NODES, 1))])
    A = triggered_adjacency(g.A, target)
    labels = None
    if g.labels is not None:
        labels = np.concatenate([g.labels, np.full(TRIGGER_NODES, UNLABELED)])
    return TriggeredGraph(Graph(X, A, labels, g.domain), target, prototype_id)


def _readout_row(z: ad.Tensor, target: int, readout: str) -> ad.Tensor:
    if readout == "pooled":
        return ad.mean(z, axis=0)
    return ad.gather_rows(z, [target])


def loss_eff_t(enc: EncoderParams, ahat: np.ndarray, x_full: ad.Tensor,
               target: int, e_row: ad.Tensor, readout: str = "node") -> ad.Tensor:
    """Differentiable effectiveness loss: -cos(victim embedding, anchor)."""
    z = gcn_apply(ahat, x_full, ad.constant(enc.W1), ad.constant(enc.W2))
    emb = _readout_row(z, target, readout)
    return ad.scale(ad.mean(ad.cosine(emb, e_row)), -1.0)


def loss_eff(enc: EncoderParams, tg: TriggeredGraph, e_j, readout: str = "node") -> float:
    e_row = ad.constant(np.asarray(e_j, dtype=np.float64).reshape(1, -1))
    ahat = sym_normalize(tg.graph.A)
    out = loss_eff_t(enc, ahat, ad.constant(tg.graph.X), tg.target_index, e_row, readout)
    return out.item()


def loss_ste_t(x_row: ad.Tensor, x_tri_row: ad.Tensor) -> ad.Tensor:
    """Differentiable stealth loss: -cos(victim features, trigger features)."""
    return ad.scale(ad.mean(ad.cosine(x_row, x_tri_row)), -1.0)


def loss_ste(x_i, x_tri) -> float:
    a = ad.constant(np.asarray(x_i, dtype=np.float64).reshape(1, -1))
    b = ad.constant(np.asarray(x_tri, dtype=np.float64).reshape(1, -1))
    return loss_ste_t(a, b).item()


@dataclass
class _NodeSite:
    graph_id: int
    node_id: int
    x_sub: np.ndarray
    local: int
    ahat_tri: np.ndarray


def _prepare_sites(graphs: list[Graph], min_size: int, max_size: int) -> list[_NodeSite]:
    sites = []
    for gid, g in enumerate(graphs):
        lo, hi = min(min_size, g.num_nodes), min(max_size, g.num_nodes)
        for v in range(g.num_nodes):
            sub, local = ego_subgraph(g, v, lo, hi)
            ahat_tri = sym_normalize(triggered_adjacency(sub.A, local))
            sites.append(_NodeSite(gid, v, sub.X, local, ahat_tri))
    return sites


def train_attack(gen, enc: EncoderParams, graphs: list[Graph],
                 target_embeddings: np.ndarray, persistence_ctx,
                 cfg: AttackTrainConfig, rng: Rng,
                 min_size: int = 15, max_size: int = 30):
    """Optimize the trigger against a frozen encoder.

    One epoch visits every node of every graph inside its ego subgraph,
    samples an anchor embedding, and takes one gradient step on
    effectiveness + alpha * stealth + beta * persistence.  Returns the
    trained generator (or static trigger) and per-epoch mean losses as
    (l_eff, l_ste, l_per, total) tuples.
    """
    cfg.validate()
    if not graphs:
        raise ValueError("no graphs to attack")
    targets = np.asarray(target_embeddings, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] < 1:
        raise ValueError("target embeddings must be a nonempty matrix")
    use_per = cfg.beta > 0 and not cfg.disable_persistence
    if use_per and persistence_ctx is None:
        raise ValueError("beta > 0 requires a prepared persistence context")
    if cfg.random_target_instead_of_fps:
        # ablation: one Gaussian target replaces the whole anchor set
        draw = rng.child("random-target").generator().normal(size=targets.shape[1])
        targets = draw[None, :]

    sites = _prepare_sites(graphs, min_size, max_size)
    feature_dim = graphs[0].feature_dim
    if cfg.static_trigger:
        if not isinstance(gen, StaticTrigger):
            gen = StaticTrigger(rng.child("static-init").generator()
                                .normal(size=feature_dim) * 0.1)
        state = {"static_x": gen.x.copy()[None, :]}  # kept as a (1, d) row
    else:
        if not isinstance(gen, TriggerGeneratorParams):
            raise TypeError("expected TriggerGeneratorParams for the adaptive attack")
        state = {name: arr.copy() for name, arr in gen.items()}

    enc_before = np.concatenate([enc.W1.ravel(), enc.W2.ravel()])
    pick = rng.child("anchor-pick").generator()
    lr = cfg.lr
    trace: list[tuple[float, float, float, float]] = []
    prev_total = np.inf

    for epoch in range(cfg.epochs):
        if use_per and hasattr(persistence_ctx, "refresh"):
            persistence_ctx.refresh(epoch)  # fresh noise, same sensitive set
        sums = np.zeros(4)
        for site in sites:
            j = int(pick.integers(targets.shape[0]))
            try:
                parts = _site_step(state, enc, site, targets[j], cfg,
                                   persistence_ctx if use_per else None, lr)
            except ad.NumericError as e:
                raise ad.NumericError(
                    f"attack diverged at graph {site.graph_id}, node {site.node_id}, "
                    f"anchor {j}: {e}") from e
            sums += parts
        means = sums / len(sites)
        trace.append(tuple(float(v) for v in means))
        # anchor resampling makes epoch means noisy; only a clear rise
        # (beyond 1% of the running value) shrinks the step
        if means[3] > prev_total + 0.01 * abs(prev_total):
            lr *= 0.5
            log.info("epoch %d: mean loss rose (%.6f > %.6f), halving lr to %g",
                     epoch, means[3], prev_total, lr)
        prev_total = means[3]

    enc_after = np.concatenate([enc.W1.ravel(), enc.W2.ravel()])
    if not np.array_equal(enc_before, enc_after):
        raise RuntimeError("encoder parameters changed during the attack")
    trained = (StaticTrigger(state["static_x"][0]) if cfg.static_trigger
               else TriggerGeneratorParams(state["Wa"], state["ba"],
                                           state["Wb"], state["bb"]))
    return trained, trace


def _site_step(state: dict, enc: EncoderParams, site: _NodeSite, e_j: np.ndarray,
               cfg: AttackTrainConfig, persistence_ctx, lr: float) -> np.ndarray:
    """One gradient step at one victim node; returns the four loss values."""
    ad.reset_tape()
    leaves = {name: ad.tensor(arr, requires_grad=True) for name, arr in state.items()}
    x_const = ad.constant(site.x_sub)
    x_row = ad.gather_rows(x_const, [site.local])
    e_row = ad.constant(e_j[None, :])

    if "static_x" in leaves:
        x_tri = leaves["static_x"]
    else:
        x_tri = trigger_apply(leaves["Wa"], leaves["ba"], leaves["Wb"], leaves["bb"],
                              x_row, e_row)

    tri_rows = ad.gather_rows(x_tri, [0] * TRIGGER_NODES)
    x_full = ad.concat(x_const, tri_rows, axis=0)
    l_eff = loss_eff_t(enc, site.ahat_tri, x_full, site.local, e_row, cfg.readout)
    l_ste = loss_ste_t(x_row, x_tri)
    total = l_eff
    if cfg.alpha > 0:
        total = ad.add(total, ad.scale(l_ste, cfg.alpha))
    if persistence_ctx is not None and cfg.beta > 0:
        l_per = persistence_ctx.loss_per(site.ahat_tri, x_full, site.local, e_row,
                                         cfg.readout)
        total = ad.add(total, ad.scale(l_per, cfg.beta))
        per_value = l_per.item()
    else:
        per_value = 0.0
    values = np.array([l_eff.item(), l_ste.item(), per_value, total.item()])
    ad.backward(total)
    for name, leaf in leaves.items():
        if leaf.grad is not None:
            state[name] -= lr * leaf.grad
    return values

"""Two-layer GCN encoder, contrastive pre-training, and downstream heads.

The encoder computes Z = N relu(N X W1) W2 with N the symmetrically
normalized adjacency.  Attacks in this package treat a pre-trained encoder
as frozen: ``EncoderParams`` arrays are read-only snapshots, and every
training routine returns fresh copies instead of mutating its inputs.

``gcn_apply`` is the differentiable core shared by pre-training, attack
optimization, and fine-tuning; the convenience wrappers return embeddings
for a concrete graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphcore import Graph, Rng, sym_normalize


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass
class EncoderParams:
    """Weights (W1: d x h1, W2: h1 x h2), flattenable to a fixed-order vector."""

    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        self.W1 = _frozen(self.W1)
        self.W2 = _frozen(self.W2)
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W1.shape[1] != self.W2.shape[0]:
            raise ValueError(f"incompatible weight shapes {self.W1.shape}, {self.W2.shape}")
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))):
            raise ValueError("encoder weights must be finite")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.W2.ravel()])

    def unflatten(self, theta: np.ndarray) -> "EncoderParams":
        theta = np.asarray(theta, dtype=np.float64)
        n1 = self.W1.size
        if theta.shape != (n1 + self.W2.size,):
            raise ValueError("flattened vector has the wrong length")
        return EncoderParams(theta[:n1].reshape(self.W1.shape),
                             theta[n1:].reshape(self.W2.shape))

    def items(self):
        return [("W1", self.W1), ("W2", self.W2)]

    @staticmethod
    def from_items(named: dict) -> "EncoderParams":
        return EncoderParams(named["W1"], named["W2"])


@dataclass
class LinearHead:
    """Multinomial logistic classifier on top of embeddings."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = _frozen(self.W)
        self.b = _frozen(self.b)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError(f"incompatible head shapes {self.W.shape}, {self.b.shape}")

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def items(self):
        return [("head_W", self.W), ("head_b", self.b)]

    @staticmethod
    def from_items(named: dict) -> "LinearHead":
        return LinearHead(named["head_W"], named["head_b"])


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 0.0001
    max_epochs: int = 10000
    patience: int = 20
    temperature: float = 0.5
    edge_drop_p: float = 0.2
    feature_mask_p: float = 0.2
    batch: int = 8

    def validate(self) -> None:
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")
        if not (0 <= self.edge_drop_p < 1 and 0 <= self.feature_mask_p < 1):
            raise ValueError("augmentation probabilities must lie in [0, 1)")
        if self.max_epochs < 0 or self.patience < 0 or self.batch < 2:
            raise ValueError("max_epochs, patience >= 0 and batch >= 2 required")


def init_params(feature_dim: int, hidden1: int = 64, hidden2: int = 64,
                rng: Rng | None = None) -> EncoderParams:
    """Seeded uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    gen = (rng or Rng(0)).generator()

    def glorot(n_in, n_out):
        a = np.sqrt(6.0 / (n_in + n_out))
        return gen.uniform(-a, a, size=(n_in, n_out))

    return EncoderParams(glorot(feature_dim, hidden1), glorot(hidden1, hidden2))


def gcn_apply(ahat: np.ndarray, x: ad.Tensor, w1: ad.Tensor, w2: ad.Tensor) -> ad.Tensor:
    """Differentiable Z = N relu(N x w1) w2 for a fixed normalized adjacency."""
    prop = ad.constant(ahat)
    hidden = ad.relu(ad.matmul(ad.matmul(prop, x), w1))
    return ad.matmul(ad.matmul(prop, hidden), w2)


def gcn_forward(params: EncoderParams, g: Graph, x: ad.Tensor | None = None,
                ahat: np.ndarray | None = None) -> ad.Tensor:
    """Node embeddings for g.  Pass x as a Tensor to differentiate through
    node features; weights enter as constants (the encoder stays frozen)."""
    if x is None:
        x = ad.constant(g.X)
    elif not isinstance(x, ad.Tensor):
        x = ad.constant(x)
    if x.shape[1] != params.W1.shape[0]:
        raise ValueError(f"feature dim {x.shape[1]} != encoder input {params.W1.shape[0]}")
    if ahat is None:
        ahat = sym_normalize(g.A)
    return gcn_apply(ahat, x, ad.constant(params.W1), ad.constant(params.W2))


def node_embedding(params: EncoderParams, g: Graph, v: int) -> np.ndarray:
    if not (0 <= v < g.num_nodes):
        raise ValueError(f"node id {v} out of range")
    return gcn_forward(params, g).values[v]


def graph_embedding(params: EncoderParams, g: Graph) -> np.ndarray:
    return gcn_forward(params, g).values.mean(axis=0)


def nt_xent_loss(embeddings: ad.Tensor, temperature: float) -> ad.Tensor:
    """Normalized temperature-scaled cross entropy over paired rows.

    Rows (2i, 2i+1) are positive pairs; every other row in the batch is a
    negative.  Cosine similarities, self-similarity masked out additively.
    """
    m = embeddings.shape[0]
    if m < 4 or m % 2 != 0:
        raise ValueError("need an even number of rows and at least 2 pairs")
    sims = ad.scale(ad.cosine(embeddings, embeddings), 1.0 / temperature)
    masked = ad.add(sims, ad.constant(-1e9 * np.eye(m)))
    logprob = ad.row_log_softmax(masked)
    anchors = np.arange(m)
    picked = ad.take_pairs(logprob, anchors, anchors ^ 1)  # partner of 2i is 2i+1
    return ad.scale(ad.sum(picked), -1.0 / m)


def _augment(g: Graph, edge_drop_p: float, feature_mask_p: float,
             gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One stochastic view: drop whole edges, zero whole feature columns."""
    edges = np.argwhere(np.triu(g.A, k=1) > 0)
    A = np.zeros_like(g.A)
    if len(edges):
        keep = gen.random(len(edges)) >= edge_drop_p
        for (u, v) in edges[keep]:
            A[u, v] = A[v, u] = g.A[u, v]
    X = g.X.copy()
    masked_cols = gen.random(g.feature_dim) < feature_mask_p
    X[:, masked_cols] = 0.0
    return sym_normalize(A), X


def pretrain_contrastive(graphs: list[Graph], cfg: PretrainConfig, rng: Rng,
                         hidden1: int = 64, hidden2: int = 64,
                         ) -> tuple[EncoderParams, list[float]]:
    """Self-supervised pre-training on a pool of (sub)graphs.

    Each epoch samples a batch, builds two augmented views per member,
    mean-pools their embeddings, and descends the paired contrastive loss.
    Stops at max_epochs or after `patience` epochs without a new best loss.
    Returns the trained parameters and the per-epoch loss trace.
    """
    cfg.validate()
    if len(graphs) < 2:
        raise ValueError("pre-training needs at least 2 subgraphs")
    dims = {g.feature_dim for g in graphs}
    if len(dims) != 1:
        raise ValueError(f"subgraphs disagree on feature dim: {sorted(dims)}")

    params = init_params(dims.pop(), hidden1, hidden2, rng.child("init"))
    w1v, w2v = params.W1.copy(), params.W2.copy()
    gen = rng.child("pretrain").generator()
    trace: list[float] = []
    best = np.inf
    since_best = 0

    for epoch in range(cfg.max_epochs):
        take = min(cfg.batch, len(graphs))
        batch = gen.choice(len(graphs), size=take, replace=False)
        ad.reset_tape()
        w1 = ad.tensor(w1v, requires_grad=True)
        w2 = ad.tensor(w2v, requires_grad=True)
        pooled = None
        for gi in batch:
            for _ in range(2):
                ahat, xv = _augment(graphs[gi], cfg.edge_drop_p, cfg.feature_mask_p, gen)
                z = gcn_apply(ahat, ad.constant(xv), w1, w2)
                row = ad.mean(z, axis=0)
                pooled = row if pooled is None else ad.concat(pooled, row, axis=0)
        try:
            loss = nt_xent_loss(pooled, cfg.temperature)
            ad.backward(loss)
        except ad.NumericError as e:
            raise ad.NumericError(f"pre-training diverged at epoch {epoch}: {e}") from e
        value = loss.item()
        trace.append(value)
        w1v -= cfg.lr * w1.grad
        w2v -= cfg.lr * w2.grad
        if value < best:
            best = value
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    return EncoderParams(w1v, w2v), trace


def few_shot_indices(labels: np.ndarray, shots: int, rng: Rng | None = None) -> np.ndarray:
    """`shots` seeded picks per class (ascending class order, sorted within)."""
    labels = np.asarray(labels)
    if shots < 1:
        raise ValueError("shots must be >= 1")
    classes = np.unique(labels[labels >= 0])
    if classes.size < 2:
        raise ValueError("need at least 2 labeled classes")
    gen = (rng or Rng(0)).generator()
    chosen: list[int] = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        if pool.size < shots:
            raise ValueError(f"class {c} has {pool.size} labeled nodes, need {shots}")
        chosen.extend(sorted(gen.choice(pool, size=shots, replace=False)))
    return np.array(chosen)


def train_head(embeddings: np.ndarray, labels: np.ndarray, shots: int = 5,
               rng: Rng | None = None, lr: float = 0.5, epochs: int = 300,
               ) -> LinearHead:
    """Few-shot logistic regression: `shots` labeled nodes per class,
    full-batch gradient descent from a zero initialization."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    idx = few_shot_indices(labels, shots, rng)
    classes = np.unique(labels[labels >= 0])
    E, y = embeddings[idx], labels[idx]
    num_classes = int(classes.max()) + 1

    Wv = np.zeros((embeddings.shape[1], num_classes))
    bv = np.zeros(num_classes)
    rows = np.arange(len(y))
    for _ in range(epochs):
        ad.reset_tape()
        W = ad.tensor(Wv, requires_grad=True)
        b = ad.tensor(bv, requires_grad=True)
        logprob = ad.row_log_softmax(ad.add_bias(ad.matmul(ad.constant(E), W), b))
        loss = ad.scale(ad.sum(ad.take_pairs(logprob, rows, y)), -1.0 / len(y))
        ad.backward(loss)
        Wv -= lr * W.grad
        bv -= lr * b.grad
    return LinearHead(Wv, bv)


def logits(head: LinearHead, embeddings: np.ndarray) -> np.ndarray:
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if E.shape[1] != head.W.shape[0]:
        raise ValueError(f"embedding dim {E.shape[1]} != head input {head.W.shape[0]}")
    return E @ head.W + head.b


def predict(head: LinearHead, embedding: np.ndarray) -> int:
    # np.argmax takes the first maximum, which is the lowest class id
    return int(np.argmax(logits(head, embedding)[0]))


def predict_many(head: LinearHead, embeddings: np.ndarray) -> np.ndarray:
    return np.argmax(logits(head, embeddings), axis=1)


def finetune(params: EncoderParams, labeled_graphs: list[Graph], head: LinearHead,
             lr: float = 0.001, epochs: int = 500, rng: Rng | None = None,
             ) -> tuple[EncoderParams, LinearHead, list[float]]:
    """Joint cross-entropy descent of encoder and head on labeled nodes.

    Full-batch over every labeled node of every graph; inputs are left
    untouched and updated copies are returned with the loss trace.
    """
    del rng  # full-batch updates are deterministic
    prepared = []
    for g in labeled_graphs:
        if g.labels is None:
            raise ValueError("finetune requires labeled graphs")
        idx = np.flatnonzero(g.labels >= 0)
        if idx.size:
            prepared.append((sym_normalize(g.A), g.X, idx, g.labels[idx]))
    if not prepared:
        raise ValueError("no labeled nodes to fine-tune on")
    total = sum(len(y) for *_rest, y in prepared)

    w1v, w2v = params.W1.copy(), params.W2.copy()
    Wv, bv = head.W.copy(), head.b.copy()
    trace: list[float] = []
    for epoch in range(epochs):
        ad.reset_tape()
        w1 = ad.tensor(w1v, requires_grad=True)
        w2 = ad.tensor(w2v, requires_grad=True)
        W = ad.tensor(Wv, requires_grad=True)
        b = ad.tensor(bv, requires_grad=True)
        parts = None
        for ahat, X, idx, y in prepared:
            z = gcn_apply(ahat, ad.constant(X), w1, w2)
            emb = ad.gather_rows(z, idx)
            logprob = ad.row_log_softmax(ad.add_bias(ad.matmul(emb, W), b))
            picked = ad.sum(ad.take_pairs(logprob, np.arange(len(y)), y))
            parts = picked if parts is None else ad.add(parts, picked)
        try:
            loss = ad.scale(parts, -1.0 / total)
            ad.backward(loss)
        except ad.NumericError as e:
            raise ad.NumericError(f"fine-tuning diverged at epoch {epoch}: {e}") from e
        trace.append(loss.item())
        w1v -= lr * w1.grad
        w2v -= lr * w2.grad
        Wv -= lr * W.grad
        bv -= lr * b.grad
    return EncoderParams(w1v, w2v), LinearHead(Wv, bv), trace

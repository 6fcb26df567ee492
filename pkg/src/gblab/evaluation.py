"""Attack-quality measurement.

Two reporting scenarios.  Uncontrolled: the attacker only wants triggered
nodes to collapse into one consistent class, so the rate is the largest
class share among triggered predictions.  Controlled: a specific class was
chosen up front (via trial queries against the deployed model), so the rate
is the share predicted as exactly that class.  The controlled rate can
never exceed the uncontrolled one on the same predictions.

Also here: the cosine purification defense, fine-tuning persistence
measurement, and the update-magnitude histogram used to argue that
adaptation touches only a thin slice of the encoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .encoder import (
    EncoderParams,
    LinearHead,
    few_shot_indices,
    finetune,
    node_embedding,
    predict,
    train_head,
)
from .graphcore import Graph, Rng, ego_subgraph
from .prototypes import ego_embeddings
from .trigger import StaticTrigger, generate_trigger_feature, inject_trigger

UNCONTROLLED = "uncontrolled"
CONTROLLED = "controlled"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    prototype_id: int = 0
    target_class: int = -1  # controlled only
    query_budget: int = 1

    def validate(self) -> None:
        if self.kind not in (UNCONTROLLED, CONTROLLED):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == CONTROLLED and self.target_class < 0:
            raise ValueError("controlled scenario needs a valid target class")
        if self.query_budget < 1:
            raise ValueError("query budget must be >= 1")


@dataclass
class EvalReport:
    asr: float
    acc: float
    asr_purified: float
    asr_after_finetune: float
    class_histogram: np.ndarray
    seeds: tuple[int, ...] = ()
    config_digest: str = ""

    def __post_init__(self):
        self.class_histogram = np.asarray(self.class_histogram, dtype=np.int64)
        for name in ("asr", "acc", "asr_purified", "asr_after_finetune"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_text(self) -> str:
        lines = [
            f"asr {self.asr:.17g}",
            f"acc {self.acc:.17g}",
            f"asr_purified {self.asr_purified:.17g}",
            f"asr_after_ft {self.asr_after_finetune:.17g}",
            "class_histogram " + " ".join(str(int(c)) for c in self.class_histogram),
            "seeds " + " ".join(str(s) for s in self.seeds),
            f"config_digest {self.config_digest}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_header() -> str:
        return "seed,alpha,beta,scenario,asr,acc,asr_purified,asr_after_ft"

    def csv_row(self, seed: int, alpha: float, beta: float, scenario: str) -> str:
        return (f"{seed},{alpha:.17g},{beta:.17g},{scenario},"
                f"{self.asr:.17g},{self.acc:.17g},"
                f"{self.asr_purified:.17g},{self.asr_after_finetune:.17g}")


def config_digest(pairs: dict) -> str:
    blob = "\n".join(f"{k}={pairs[k]}" for k in sorted(pairs))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _clamped_ego(g: Graph, v: int, min_size: int, max_size: int):
    lo = min(min_size, g.num_nodes)
    hi = min(max_size, g.num_nodes)
    return ego_subgraph(g, v, lo, hi)


def trigger_feature_for(gen, x_i: np.ndarray, e_j: np.ndarray) -> np.ndarray:
    if isinstance(gen, StaticTrigger):
        return gen.x
    return generate_trigger_feature(gen, x_i, e_j)


def clean_accuracy(params_enc: EncoderParams, head: LinearHead, test_nodes,
                   min_size: int = 15, max_size: int = 30) -> float:
    """Share of labeled test nodes classified correctly from their ego view."""
    if not test_nodes:
        raise ValueError("empty test set")
    hits = 0
    for g, v in test_nodes:
        if g.labels is None or g.labels[v] < 0:
            raise ValueError(f"test node {v} has no label")
        sub, local = _clamped_ego(g, v, min_size, max_size)
        if predict(head, node_embedding(params_enc, sub, local)) == g.labels[v]:
            hits += 1
    return hits / len(test_nodes)


def triggered_predictions(params_enc: EncoderParams, head: LinearHead, gen,
                          test_nodes, e_j: np.ndarray,
                          min_size: int = 15, max_size: int = 30,
                          purify_tau: float | None = None) -> np.ndarray:
    """Predicted class per test node after injecting its generated trigger.

    With purify_tau set, the defender's edge filter runs on the triggered
    subgraph before embedding.
    """
    if not test_nodes:
        raise ValueError("empty test set")
    preds = []
    for g, v in test_nodes:
        sub, local = _clamped_ego(g, v, min_size, max_size)
        x_tri = trigger_feature_for(gen, sub.X[local], e_j)
        tg = inject_trigger(sub, x_tri, local)
        graph = tg.graph if purify_tau is None else purify(tg.graph, purify_tau)
        preds.append(predict(head, node_embedding(params_enc, graph, local)))
    return np.array(preds, dtype=np.int64)


def asr_from_predictions(preds: np.ndarray, scenario: ScenarioSpec) -> float:
    scenario.validate()
    preds = np.asarray(preds)
    if preds.size == 0:
        raise ValueError("no predictions")
    if scenario.kind == CONTROLLED:
        return float(np.mean(preds == scenario.target_class))
    return float(np.bincount(preds).max() / preds.size)


def asr(params_enc: EncoderParams, head: LinearHead, gen, test_nodes,
        scenario: ScenarioSpec, target_embeddings: np.ndarray,
        min_size: int = 15, max_size: int = 30,
        purify_tau: float | None = None) -> float:
    """Attack success rate under the given scenario."""
    scenario.validate()
    e_j = np.asarray(target_embeddings)[scenario.prototype_id]
    preds = triggered_predictions(params_enc, head, gen, test_nodes, e_j,
                                  min_size, max_size, purify_tau)
    return asr_from_predictions(preds, scenario)


def class_histogram(preds: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(preds), minlength=num_classes)


@dataclass(frozen=True)
class TrialQueryResult:
    prototype_id: int | None
    queries: int

    @property
    def aligned(self) -> bool:
        return self.prototype_id is not None


def trial_query_select(params_enc: EncoderParams, head: LinearHead, gen,
                       target_embeddings: np.ndarray, target_class: int,
                       probe_nodes, budget: int,
                       min_size: int = 15, max_size: int = 30) -> TrialQueryResult:
    """Find a prototype that steers probe predictions to target_class.

    Walks prototypes in selection order; each probe injection costs one
    query.  Stops early once the budget cannot cover another probe round.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not probe_nodes:
        raise ValueError("no probe nodes")
    targets = np.asarray(target_embeddings)
    queries = 0
    per_round = len(probe_nodes)
    for j in range(targets.shape[0]):
        if queries + per_round > budget:
            break
        preds = triggered_predictions(params_enc, head, gen, probe_nodes,
                                      targets[j], min_size, max_size)
        queries += per_round
        majority = int(np.bincount(preds).argmax())
        if majority == target_class:
            return TrialQueryResult(j, queries)
    return TrialQueryResult(None, queries)


def purify(g: Graph, tau: float = 0.1) -> Graph:
    """Drop edges whose endpoint features have cosine similarity below tau
    (strictly); nodes and features stay."""
    norms = np.linalg.norm(g.X, axis=1)
    denom = np.maximum(np.outer(norms, norms), 1e-12)
    cos = (g.X @ g.X.T) / denom
    keep = cos >= tau
    A = np.where(keep, g.A, 0.0)
    A = np.minimum(A, A.T)  # keep symmetry exactly
    return Graph(g.X, A, g.labels, g.domain)


@dataclass(frozen=True)
class FinetuneEvalConfig:
    lr: float = 0.001
    epochs: int = 500
    shots: int = 5


@dataclass
class PersistenceOutcome:
    asr_before: float
    asr_after: float
    params_before: EncoderParams
    params_after: EncoderParams
    head_before: LinearHead
    head_after: LinearHead


def persistence_eval(params_enc: EncoderParams, gen, downstream_graphs,
                     scenario: ScenarioSpec, target_embeddings: np.ndarray,
                     ft_cfg: FinetuneEvalConfig, rng: Rng,
                     min_size: int = 15, max_size: int = 30) -> PersistenceOutcome:
    """ASR before and after the victim fine-tunes on its few-shot split.

    A head is trained on the few-shot nodes, ASR measured, then encoder and
    head copies are jointly fine-tuned on the same few-shot nodes and ASR is
    re-measured with the unchanged trigger generator.  Test nodes are the
    labeled nodes outside the few-shot split.
    """
    emb_all, sources = ego_embeddings(params_enc, downstream_graphs, min_size, max_size)
    labels_all = np.array([downstream_graphs[gid].labels[v]
                           if downstream_graphs[gid].labels is not None else -1
                           for gid, v in sources])
    shot_rng = rng.child("fewshot")
    head = train_head(emb_all, labels_all, ft_cfg.shots, shot_rng)
    shot_idx = set(int(i) for i in few_shot_indices(labels_all, ft_cfg.shots, shot_rng))

    test_nodes = [(downstream_graphs[gid], v)
                  for flat, (gid, v) in enumerate(sources)
                  if labels_all[flat] >= 0 and flat not in shot_idx]
    asr_before = asr(params_enc, head, gen, test_nodes, scenario,
                     target_embeddings, min_size, max_size)

    # labels masked down to the few-shot picks: that's all the victim trains on
    masked = []
    for gid, g in enumerate(downstream_graphs):
        lab = np.full(g.num_nodes, -1, dtype=np.int64)
        for flat in shot_idx:
            sgid, v = sources[flat]
            if sgid == gid:
                lab[v] = labels_all[flat]
        masked.append(Graph(g.X, g.A, lab, g.domain))
    tuned_enc, tuned_head, _ = finetune(params_enc, masked, head,
                                        lr=ft_cfg.lr, epochs=ft_cfg.epochs)
    asr_after = asr(tuned_enc, tuned_head, gen, test_nodes, scenario,
                    target_embeddings, min_size, max_size)
    return PersistenceOutcome(asr_before, asr_after, params_enc, tuned_enc,
                              head, tuned_head)


def update_magnitude_histogram(params_before: EncoderParams,
                               params_after: EncoderParams,
                               num_bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of |theta_after - theta_before| over equal-width bins."""
    if (params_before.W1.shape != params_after.W1.shape
            or params_before.W2.shape != params_after.W2.shape):
        raise ValueError("parameter layouts differ")
    if num_bins < 1:
        raise ValueError("need at least one bin")
    deltas = np.abs(params_after.flatten() - params_before.flatten())
    top = float(deltas.max())
    counts, edges = np.histogram(deltas, bins=num_bins,
                                 range=(0.0, top if top > 0 else 1.0))
    return counts, edges

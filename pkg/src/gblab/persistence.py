"""Perturbation-persistence machinery for the attack.

Three pieces.  First, graph mixup: pairs of graphs are blended through a
soft node alignment so the blend set can stand in for "data the victim
might adapt on".  Second, parameter-sensitivity scoring: a first-order
importance score per encoder weight, using one finite-difference
Hessian-vector product instead of an explicit Hessian.  Third, the
persistence loss itself: the attack's effectiveness loss is re-evaluated
under m independently perturbed encoder copies and summarized as
variance + mean, rewarding triggers that keep working when the most
sensitive weights move.

``check_first_order_insensitivity`` is the numeric counterpart of the
claim that motivates all this: along directions orthogonal to the row
space of the sensitivity map's Jacobian, the map changes only at second
order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import COSINE_GUARD as _GUARD
from .encoder import EncoderParams, PretrainConfig, _augment, nt_xent_loss
from .graphcore import Graph, Rng, sym_normalize
from .trigger import loss_eff_t


@dataclass(frozen=True)
class PerturbationConfig:
    s: float = 0.2            # fraction of most-sensitive weights to perturb
    sigma: float = 0.1        # std of the multiplicative Gaussian noise
    m_perturb: int = 5        # number of perturbed encoder copies
    lambda_mix: float = 0.5   # mixup ratio
    hvp_eps: float = 1e-4     # relative finite-difference step

    def validate(self) -> None:
        if not (0.0 < self.s <= 1.0):
            raise ValueError("s must lie in (0, 1]")
        if self.sigma < 0.0 or self.hvp_eps <= 0.0:
            raise ValueError("sigma >= 0 and hvp_eps > 0 required")
        if self.m_perturb < 1:
            raise ValueError("need at least one perturbed copy")
        if not (0.0 <= self.lambda_mix <= 1.0):
            raise ValueError("lambda_mix must lie in [0, 1]")


@dataclass
class SensitivityReport:
    """Per-weight importance scores in flattened parameter order."""

    theta: np.ndarray
    g: np.ndarray
    hvp_theta: np.ndarray
    scores: np.ndarray
    selected: np.ndarray
    names: list[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        chosen = set(int(i) for i in self.selected)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["param_index", "name", "theta", "g",
                            "hvp_theta", "score", "selected"])
            for k in range(self.scores.size):
                name = self.names[k] if self.names else ""
                writer.writerow([k, name, f"{self.theta[k]:.17g}",
                                 f"{self.g[k]:.17g}", f"{self.hvp_theta[k]:.17g}",
                                 f"{self.scores[k]:.17g}", int(k in chosen)])


def propagate2(g: Graph) -> np.ndarray:
    """Two parameter-free propagation rounds of the features."""
    ahat = sym_normalize(g.A)
    return ahat @ (ahat @ g.X)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return (a @ b.T) / np.maximum(np.outer(na, nb), _GUARD)


def align_matrix(r_i: np.ndarray, r_j: np.ndarray) -> np.ndarray:
    """Row-stochastic soft assignment from rows of r_i to rows of r_j."""
    r_i = np.asarray(r_i, dtype=np.float64)
    r_j = np.asarray(r_j, dtype=np.float64)
    if r_i.shape[1] != r_j.shape[1]:
        raise ValueError(f"feature dims differ: {r_i.shape} vs {r_j.shape}")
    sims = _cosine_matrix(r_i, r_j)
    shifted = np.exp(sims - sims.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def mixup(g_i: Graph, g_j: Graph, lambda_mix: float) -> Graph:
    """Blend g_j into g_i through the soft alignment of propagated features.

    The result has g_i's node count.  Projection self-weights land on the
    diagonal and are dropped (normalization re-adds unit self-loops later).
    """
    if g_i.feature_dim != g_j.feature_dim:
        raise ValueError("mixup requires matching feature dims")
    lam = float(lambda_mix)
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda_mix must lie in [0, 1]")
    M = align_matrix(propagate2(g_i), propagate2(g_j))
    projected = M @ g_j.A @ M.T
    projected = 0.5 * (projected + projected.T)  # bit-symmetric
    np.fill_diagonal(projected, 0.0)
    A = lam * g_i.A + (1.0 - lam) * projected
    X = lam * g_i.X + (1.0 - lam) * (M @ g_j.X)
    return Graph(X, A, None, domain="mixed")


def mixed_set(graphs: list[Graph], lambda_mix: float, limit: int, rng: Rng) -> list[Graph]:
    """All ordered pairs blended, or a seeded sample of `limit` pairs."""
    n = len(graphs)
    if n < 2:
        raise ValueError("need at least 2 graphs to mix")
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    if len(pairs) > limit:
        gen = rng.child("mixed-pairs").generator()
        keep = gen.choice(len(pairs), size=limit, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    return [mixup(graphs[i], graphs[j], lambda_mix) for i, j in pairs]


# ----------------------------------------------------- sensitivity scoring


def scores_from(theta: np.ndarray, g: np.ndarray, hvp_theta: np.ndarray) -> np.ndarray:
    """Importance per weight: (g_k theta_k - 1/2 theta_k (H Theta)_k)^2."""
    theta = np.asarray(theta, dtype=np.float64)
    return (g * theta - 0.5 * theta * hvp_theta) ** 2


def hvp_central(grad_fn, theta: np.ndarray, eps: float) -> np.ndarray:
    """H @ theta by central differences of the gradient in direction theta."""
    theta = np.asarray(theta, dtype=np.float64)
    plus = grad_fn(theta * (1.0 + eps))
    minus = grad_fn(theta * (1.0 - eps))
    return (plus - minus) / (2.0 * eps)


def select_top(scores: np.ndarray, s: float) -> np.ndarray:
    """Indices of the top ceil(s * n) scores, ties to the lower index."""
    n = scores.size
    count = math.ceil(s * n)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count])


def _contrastive_grad_fn(template: EncoderParams, views, view_cfg: PretrainConfig):
    """Gradient of the contrastive loss over frozen views as a function of
    the flattened parameter vector."""

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        params = template.unflatten(theta)
        ad.reset_tape()
        w1 = ad.tensor(params.W1.copy(), requires_grad=True)
        w2 = ad.tensor(params.W2.copy(), requires_grad=True)
        pooled = None
        for ahat, xv in views:
            prop = ad.constant(ahat)
            hid = ad.relu(ad.matmul(ad.matmul(prop, ad.constant(xv)), w1))
            row = ad.mean(ad.matmul(ad.matmul(prop, hid), w2), axis=0)
            pooled = row if pooled is None else ad.concat(pooled, row, axis=0)
        loss = nt_xent_loss(pooled, view_cfg.temperature)
        ad.backward(loss)
        return np.concatenate([w1.grad.ravel(), w2.grad.ravel()])

    return grad_fn


def sensitivity_scores(params_enc: EncoderParams, mixed: list[Graph],
                       cfg: PerturbationConfig, rng: Rng | None = None,
                       view_cfg: PretrainConfig | None = None) -> SensitivityReport:
    """Score every encoder weight on the mixed-graph contrastive loss.

    The two stochastic views of each mixed graph are drawn once and then
    frozen, so the three gradient evaluations (center and the two
    Hessian-vector probes) see the same deterministic objective.
    """
    cfg.validate()
    if not mixed:
        raise ValueError("mixed set is empty")
    view_cfg = view_cfg or PretrainConfig()
    gen = (rng or Rng(0, "sensitivity-views")).generator()
    views = []
    for g in mixed:
        for _ in range(2):
            views.append(_augment(g, view_cfg.edge_drop_p, view_cfg.feature_mask_p, gen))

    theta = params_enc.flatten()
    grad_fn = _contrastive_grad_fn(params_enc, views, view_cfg)
    g_vec = grad_fn(theta)
    hvp = hvp_central(grad_fn, theta, cfg.hvp_eps)
    if not (np.all(np.isfinite(g_vec)) and np.all(np.isfinite(hvp))):
        raise ad.NumericError("sensitivity scoring produced non-finite gradients")
    scores = scores_from(theta, g_vec, hvp)
    names = (["W1"] * params_enc.W1.size) + (["W2"] * params_enc.W2.size)
    return SensitivityReport(theta, g_vec, hvp, scores, select_top(scores, cfg.s), names)


def perturbed_param_sets(params_enc: EncoderParams, report: SensitivityReport,
                         cfg: PerturbationConfig, rng: Rng) -> list[EncoderParams]:
    """m copies with multiplicative Gaussian noise on the selected weights."""
    cfg.validate()
    theta = params_enc.flatten()
    if report.scores.size != theta.size:
        raise ValueError("report does not match the parameter count")
    sel = np.asarray(report.selected, dtype=np.intp)
    copies = []
    for c in range(cfg.m_perturb):
        draw = rng.child("perturb", c).generator().normal(size=sel.size) * cfg.sigma
        modified = theta.copy()
        modified[sel] += draw * np.abs(modified[sel])
        copies.append(params_enc.unflatten(modified))
    return copies


def loss_per(eff_losses) -> ad.Tensor:
    """Population variance plus mean of the per-copy effectiveness losses,
    differentiable through every element."""
    losses = list(eff_losses)
    if not losses:
        raise ValueError("no losses to combine")
    stacked = ad.stack_scalars(losses)
    return ad.add(ad.variance(stacked), ad.mean(stacked))


class PerturbedEnsemble:
    """Attack-facing context: frozen perturbed encoder copies plus the
    combined persistence loss.  ``refresh`` redraws the noise (same
    selected weight set) so each training epoch sees fresh copies."""

    def __init__(self, params_enc: EncoderParams, report: SensitivityReport,
                 cfg: PerturbationConfig, rng: Rng):
        self._base = params_enc
        self._report = report
        self._cfg = cfg
        self._rng = rng
        self.encoders = perturbed_param_sets(params_enc, report, cfg, rng.child("epoch", 0))

    def refresh(self, epoch: int) -> None:
        self.encoders = perturbed_param_sets(
            self._base, self._report, self._cfg, self._rng.child("epoch", epoch))

    def loss_per(self, ahat: np.ndarray, x_full: ad.Tensor, target: int,
                 e_row: ad.Tensor, readout: str = "node") -> ad.Tensor:
        losses = [loss_eff_t(enc, ahat, x_full, target, e_row, readout)
                  for enc in self.encoders]
        return loss_per(losses)


def prepare_persistence(params_enc: EncoderParams, graphs: list[Graph],
                        cfg: PerturbationConfig, rng: Rng,
                        view_cfg: PretrainConfig | None = None,
                        limit: int = 64) -> tuple[PerturbedEnsemble, SensitivityReport]:
    """Mixed set -> sensitivity report -> perturbed ensemble, in one call."""
    mixed = mixed_set(graphs, cfg.lambda_mix, limit, rng.child("mix"))
    report = sensitivity_scores(params_enc, mixed, cfg, rng.child("views"), view_cfg)
    return PerturbedEnsemble(params_enc, report, cfg, rng.child("ensemble")), report


# ------------------------------------------- first-order insensitivity probe


@dataclass(frozen=True)
class CurvatureProbe:
    """One probe direction: distances D(t), decay exponents, and verdict."""

    distances: tuple[float, ...]
    exponents: tuple[float, ...]
    ok: bool
    degenerate: bool = False


def _forward_values(template: EncoderParams, ahat: np.ndarray, X: np.ndarray,
                    theta: np.ndarray) -> np.ndarray:
    p = template.unflatten(theta)
    return (ahat @ np.maximum(ahat @ X @ p.W1, 0.0) @ p.W2).ravel()


def _sensitivity_map(template: EncoderParams, ahat, X, theta, k_index: int,
                     delta: float) -> np.ndarray:
    """d(embeddings)/d(theta_k) by a central difference."""
    step = np.zeros_like(theta)
    step[k_index] = delta
    return (_forward_values(template, ahat, X, theta + step)
            - _forward_values(template, ahat, X, theta - step)) / (2.0 * delta)


def _mgs_orthonormal(rows: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt basis of the row space; near-zero rows dropped."""
    basis = []
    for row in rows:
        v = row.astype(np.float64).copy()
        for b in basis:
            v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > tol:
            basis.append(v / norm)
    return np.array(basis) if basis else np.zeros((0, rows.shape[1]))


def sensitivity_jacobian(params_enc: EncoderParams, g: Graph, k_index: int,
                         delta: float = 1e-4) -> np.ndarray:
    """Rows i: gradient of sensitivity-map component i w.r.t. the full
    parameter vector, all by central finite differences."""
    theta = params_enc.flatten()
    if not (0 <= k_index < theta.size):
        raise ValueError(f"parameter index {k_index} out of range")
    ahat = sym_normalize(g.A)
    cols = []
    for l in range(theta.size):
        step = np.zeros_like(theta)
        step[l] = delta
        plus = _sensitivity_map(params_enc, ahat, g.X, theta + step, k_index, delta)
        minus = _sensitivity_map(params_enc, ahat, g.X, theta - step, k_index, delta)
        cols.append((plus - minus) / (2.0 * delta))
    return np.stack(cols, axis=1)  # (outputs, params)


def curvature_exponents(params_enc: EncoderParams, g: Graph, k_index: int,
                        direction: np.ndarray, t0: float = 1e-2,
                        delta: float = 1e-4) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Distances D(t) = |s(theta + t*dir) - s(theta)| at t0, t0/2, t0/4 and
    the successive log2 decay exponents."""
    theta = params_enc.flatten()
    ahat = sym_normalize(g.A)
    base = _sensitivity_map(params_enc, ahat, g.X, theta, k_index, delta)
    dirn = np.asarray(direction, dtype=np.float64)
    dirn = dirn / max(np.linalg.norm(dirn), 1e-30)
    ts = (t0, t0 / 2.0, t0 / 4.0)
    dist = tuple(float(np.linalg.norm(
        _sensitivity_map(params_enc, ahat, g.X, theta + t * dirn, k_index, delta) - base))
        for t in ts)
    exps = []
    for a, b in zip(dist, dist[1:]):
        if b <= 0.0:
            exps.append(np.inf if a > 0 else 0.0)
        else:
            exps.append(math.log2(a / b) if a > 0 else 0.0)
    return dist, tuple(exps)


ABS_FLOOR = 1e-10
EXPONENT_BAR = 1.8


def check_first_order_insensitivity(params_enc: EncoderParams, g: Graph,
                                    k_index: int, trials: int,
                                    rng: Rng | None = None, t0: float = 1e-2,
                                    delta: float = 1e-4) -> list[CurvatureProbe]:
    """Probe random null-complement directions of the sensitivity map.

    Each trial draws a random direction, removes its row-space component
    (modified Gram-Schmidt against the Jacobian rows), and checks that the
    map moves at second order along the remainder: decay exponents >= 1.8,
    or distances already at the 1e-10 floor.  A direction fully inside the
    row space is reported as degenerate, not as a failure.
    """
    theta = params_enc.flatten()
    outputs = g.num_nodes * params_enc.W2.shape[1]
    if theta.size <= outputs:
        raise ValueError("probe needs more parameters than outputs "
                         f"({theta.size} vs {outputs})")
    jac = sensitivity_jacobian(params_enc, g, k_index, delta)
    basis = _mgs_orthonormal(jac)
    gen = (rng or Rng(0, "insensitivity")).generator()
    probes = []
    for _ in range(trials):
        v = gen.normal(size=theta.size)
        for b in basis:
            v -= (b @ v) * b
        if np.linalg.norm(v) < 1e-8:
            probes.append(CurvatureProbe((), (), ok=False, degenerate=True))
            continue
        dist, exps = curvature_exponents(params_enc, g, k_index, v, t0, delta)
        ok = all(e >= EXPONENT_BAR for e in exps) or all(d < ABS_FLOOR for d in dist)
        probes.append(CurvatureProbe(dist, exps, ok))
    return probes


def rowspace_control_probe(params_enc: EncoderParams, g: Graph, k_index: int,
                           rng: Rng | None = None, t0: float = 1e-2,
                           delta: float = 1e-4) -> CurvatureProbe:
    """Negative control: a direction inside the row space should change the
    sensitivity map at first order (exponent near 1)."""
    jac = sensitivity_jacobian(params_enc, g, k_index, delta)
    basis = _mgs_orthonormal(jac)
    if basis.shape[0] == 0:
        return CurvatureProbe((), (), ok=False, degenerate=True)
    gen = (rng or Rng(0, "insensitivity-control")).generator()
    v = gen.normal(size=basis.shape[0]) @ basis
    dist, exps = curvature_exponents(params_enc, g, k_index, v, t0, delta)
    ok = all(abs(e - 1.0) <= 0.2 for e in exps)
    return CurvatureProbe(dist, exps, ok)

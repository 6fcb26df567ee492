"""Experiment driver: named stages over a shared run directory.

Every stage is a deterministic function of (config, seed).  Artifacts land in
the configured output directory and a manifest records their hashes, so a
rerun with the same config and seed either skips finished stages or rewrites
byte-identical files.  Stages consume upstream artifacts only after checking
them against the manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import shutil
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import (EncoderParams, LinearHead, PretrainConfig,
                      few_shot_indices, pretrain_contrastive, train_head)
from .evaluation import (CONTROLLED, UNCONTROLLED, EvalReport,
                         FinetuneEvalConfig, ScenarioSpec, asr,
                         asr_from_predictions, class_histogram, clean_accuracy,
                         config_digest, persistence_eval, trial_query_select,
                         trigger_feature_for, triggered_predictions,
                         update_magnitude_histogram)
from .graphcore import (Graph, MixtureSpec, Rng, SbmSpec, ego_subgraph,
                        gen_sbm, load_graph, save_graph)
from .persistence import (PerturbationConfig, mixed_set, prepare_persistence,
                          sensitivity_scores)
from .prototypes import (PrototypeSet, build_prototype_set, default_k,
                         ego_embeddings, verify_fps_separation_monotonicity)
from .trigger import (AttackTrainConfig, StaticTrigger, TriggerGeneratorParams,
                      default_alpha_beta_grid, init_generator, train_attack)


class ConfigError(ValueError):
    """Bad config file, unknown key, or missing upstream artifact."""


# Flat key=value schema; the default's Python type fixes the parse type.
SCHEMA: dict[str, object] = {
    "seed": 0,
    "out": "runs/default",
    "data.kind": "sbm",            # sbm | dir
    "data.dir": "",                # source directory when kind=dir
    "data.holdout_domains": 1,     # trailing domains held out for downstream
    "sbm.num_domains": 5,
    "sbm.classes_per_domain": 4,
    "sbm.nodes_per_class": 25,
    "sbm.p_in": 0.3,
    "sbm.p_out": 0.02,
    "sbm.feature_dim": 8,
    "sbm.feature_centroid_scale": 3.0,
    "sbm.feature_noise": 0.5,
    "encoder.hidden1": 64,
    "encoder.hidden2": 32,
    "pretrain.lr": 0.0001,
    "pretrain.max_epochs": 10000,
    "pretrain.patience": 20,
    "pretrain.temperature": 0.5,
    "pretrain.edge_drop_p": 0.2,
    "pretrain.feature_mask_p": 0.2,
    "pretrain.batch": 8,
    "prototypes.k": 0,             # 0 = auto max(8, ceil(n / 50))
    "ego.min_size": 15,
    "ego.max_size": 30,
    "attack.alpha": 0.1,
    "attack.beta": 0.1,
    "attack.lr": 0.01,
    "attack.epochs": 20,
    "attack.random_target_instead_of_fps": False,
    "attack.static_trigger": False,
    "attack.disable_persistence": False,
    "attack.readout": "node",
    "perturb.s": 0.2,
    "perturb.sigma": 0.1,
    "perturb.m": 5,
    "perturb.lambda_mix": 0.5,
    "perturb.hvp_eps": 1e-4,
    "perturb.mixed_limit": 64,
    "eval.shots": 5,
    "eval.scenario": UNCONTROLLED,
    "eval.prototype_id": 0,
    "eval.target_class": -1,
    "eval.query_budget": 0,        # 0 = auto 3 * k
    "eval.probe_count": 3,
    "eval.purify_tau": 0.1,
    "eval.finetune_lr": 0.001,
    "eval.finetune_epochs": 500,
    "fps.m": 4,
    "fps.dim": 2,
    "fps.sigma": 1.0,
    "fps.n_per_class": 8,
    "fps.lambdas": "1,2,4,8",
    "fps.k": 4,
    "fps.r": 4,
    "fps.trials": 2000,
}


def _parse_literal(key: str, raw: str):
    default = SCHEMA[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return raw == "true"
    if isinstance(default, int):
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
        if not np.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return value
    return raw


def _format_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Effective settings for one run, keyed by the flat schema names."""

    values: tuple[tuple[str, object], ...]

    @staticmethod
    def from_dict(values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(SCHEMA)
        merged.update(values)
        return RunConfig(tuple(sorted(merged.items())))

    @staticmethod
    def defaults() -> "RunConfig":
        return RunConfig.from_dict({})

    @staticmethod
    def parse(text: str, origin: str = "<config>") -> dict:
        """Key=value lines to a typed dict; unknown keys and bad literals
        are fatal so typos never fall back to defaults silently."""
        out: dict = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{origin}, line {lineno}: expected key = value")
            key, raw = body.split("=", 1)
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{origin}, line {lineno}: unknown key {key!r}")
            if key in out:
                raise ConfigError(f"{origin}, line {lineno}: duplicate key {key!r}")
            out[key] = _parse_literal(key, raw)
        return out

    @staticmethod
    def load(path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return RunConfig.from_dict(RunConfig.parse(path.read_text(), str(path)))

    def __getitem__(self, key: str):
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def as_dict(self) -> dict:
        return dict(self.values)

    def with_overrides(self, pairs: dict) -> "RunConfig":
        merged = self.as_dict()
        for key, value in pairs.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        return RunConfig.from_dict(merged)

    def with_set_args(self, assignments) -> "RunConfig":
        """Apply `--set key=value` strings on top of this config."""
        pairs: dict = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            pairs[key] = _parse_literal(key, raw)
        return self.with_overrides(pairs)

    def dump(self) -> str:
        return "\n".join(f"{k} = {_format_literal(v)}" for k, v in self.values) + "\n"

    def digest(self) -> str:
        return config_digest({k: _format_literal(v) for k, v in self.values})

    def validate(self) -> None:
        if self["data.kind"] not in ("sbm", "dir"):
            raise ConfigError("data.kind must be sbm or dir")
        if self["eval.scenario"] not in (UNCONTROLLED, CONTROLLED):
            raise ConfigError(f"eval.scenario must be {UNCONTROLLED} or {CONTROLLED}")
        if self["eval.scenario"] == CONTROLLED and self["eval.target_class"] < 0:
            raise ConfigError("controlled scenario needs eval.target_class >= 0")
        if self["attack.readout"] not in ("node", "pooled"):
            raise ConfigError("attack.readout must be node or pooled")
        if not (0 < self["ego.min_size"] <= self["ego.max_size"]):
            raise ConfigError("need 0 < ego.min_size <= ego.max_size")
        if self["data.holdout_domains"] < 1:
            raise ConfigError("data.holdout_domains must be >= 1")
        if self["eval.probe_count"] < 1 or self["eval.shots"] < 1:
            raise ConfigError("eval.probe_count and eval.shots must be >= 1")


# ----------------------------------------------------------------- manifest


@dataclass
class Manifest:
    config_digest: str
    seed: int
    stages: dict[str, str]
    artifacts: dict[str, str]


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(run_dir: Path) -> Manifest | None:
    path = Path(run_dir) / "manifest.txt"
    if not path.exists():
        return None
    digest, seed = "", 0
    stages: dict[str, str] = {}
    artifacts: dict[str, str] = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "config_digest":
            digest = parts[1]
        elif parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "stage":
            stages[parts[1]] = parts[2]
        elif parts[0] == "artifact":
            artifacts[parts[1]] = parts[2]
        else:
            raise ConfigError(f"{path}: unrecognized manifest line {line!r}")
    return Manifest(digest, seed, stages, artifacts)


def write_manifest(run_dir: Path, cfg: RunConfig, stages: dict[str, str]) -> None:
    """Hash every file under the run directory (manifests excluded) and
    rewrite manifest.txt in a fixed order."""
    run_dir = Path(run_dir)
    entries = []
    for path in sorted(run_dir.rglob("*")):
        if path.is_dir() or path.name == "manifest.txt":
            continue
        rel = path.relative_to(run_dir).as_posix()
        entries.append(f"artifact {rel} {_sha256_file(path)}")
    lines = [f"config_digest {cfg.digest()}", f"seed {cfg['seed']}"]
    lines += [f"stage {name} {d}" for name, d in sorted(stages.items())]
    lines += entries
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _record(run_dir: Path, cfg: RunConfig, stage: str) -> None:
    old = read_manifest(run_dir)
    stages = dict(old.stages) if old else {}
    stages[stage] = cfg.digest()
    write_manifest(run_dir, cfg, stages)


def _require(run_dir: Path, rel: str, produced_by: str) -> Path:
    """An upstream artifact must exist and match the manifest hash."""
    path = Path(run_dir) / rel
    if not path.exists():
        raise ConfigError(f"missing artifact {rel}; run the `{produced_by}` "
                          "stage first")
    manifest = read_manifest(run_dir)
    recorded = manifest.artifacts.get(rel) if manifest else None
    if recorded is None:
        raise ConfigError(f"artifact {rel} is not in the manifest; rerun "
                          f"`{produced_by}`")
    if recorded != _sha256_file(path):
        raise ConfigError(f"artifact {rel} does not match the manifest; "
                          f"rerun `{produced_by}`")
    return path


STAGE_OUTPUTS: dict[str, tuple[str, ...]] = {
    "gen-data": ("data/meta",),
    "pretrain": ("encoder.txt", "pretrain_trace.csv"),
    "prototypes": ("prototypes.txt",),
    "attack": ("trigger.txt", "attack_trace.csv"),
    "eval": ("report.txt", "report.csv", "stealth.txt"),
    "purify-eval": ("purify_report.txt",),
    "persist-eval": ("persist_report.txt", "update_hist.csv"),
    "fps-verify": ("coverage.csv", "coverage_control.csv", "verdict.txt"),
    "sensitivity-report": ("sensitivity.csv",),
    "grid": ("grid.csv",),
    "report": ("summary.csv", "summary.txt"),
}


def _finished(run_dir: Path, cfg: RunConfig, stage: str) -> bool:
    manifest = read_manifest(run_dir)
    if manifest is None or manifest.stages.get(stage) != cfg.digest():
        return False
    return all((Path(run_dir) / rel).exists() for rel in STAGE_OUTPUTS[stage])


# ------------------------------------------------------------ artifact I/O


def _load_split(run_dir: Path) -> tuple[list[Graph], list[Graph]]:
    meta = {}
    for line in (Path(run_dir) / "data" / "meta").read_text().splitlines():
        name, count = line.split()
        meta[name] = int(count)
    pretrain = [load_graph(Path(run_dir) / "data" / "pretrain" / f"g{i:03d}")
                for i in range(meta["pretrain"])]
    downstream = [load_graph(Path(run_dir) / "data" / "downstream" / f"g{i:03d}")
                  for i in range(meta["downstream"])]
    return pretrain, downstream


def _load_encoder(run_dir: Path) -> EncoderParams:
    return EncoderParams.from_items(ad.load_tensors(Path(run_dir) / "encoder.txt"))


def _load_trigger(run_dir: Path):
    named = ad.load_tensors(Path(run_dir) / "trigger.txt")
    if "static_x" in named:
        return StaticTrigger.from_items(named)
    return TriggerGeneratorParams.from_items(named)


def _save_prototypes(run_dir: Path, protos: PrototypeSet) -> None:
    ad.save_tensors(Path(run_dir) / "prototypes.txt", [
        ("embeddings", protos.embeddings),
        ("sources", np.array(protos.sources, dtype=np.float64)),
        ("meta", np.array([protos.k, protos.seed_index], dtype=np.float64)),
    ])


def _load_prototypes(run_dir: Path) -> PrototypeSet:
    named = ad.load_tensors(Path(run_dir) / "prototypes.txt")
    sources = [(int(g), int(v)) for g, v in named["sources"]]
    k, seed_index = (int(v) for v in named["meta"])
    return PrototypeSet(named["embeddings"], sources, k, seed_index)


def _write_csv(path: Path, header: str, rows) -> None:
    path.write_text("\n".join([header] + list(rows)) + "\n")


# ----------------------------------------------------------------- stages


def _stage_gen_data(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    holdout = cfg["data.holdout_domains"]
    if cfg["data.kind"] == "sbm":
        spec = SbmSpec(cfg["sbm.num_domains"], cfg["sbm.classes_per_domain"],
                       cfg["sbm.nodes_per_class"], cfg["sbm.p_in"],
                       cfg["sbm.p_out"], cfg["sbm.feature_dim"],
                       cfg["sbm.feature_centroid_scale"],
                       cfg["sbm.feature_noise"])
        graphs = gen_sbm(spec, Rng(cfg["seed"], "data"))
    else:
        src = Path(cfg["data.dir"])
        if not cfg["data.dir"] or not src.is_dir():
            raise ConfigError(f"data.dir {cfg['data.dir']!r} is not a directory")
        graphs = [load_graph(p) for split in ("pretrain", "downstream")
                  for p in sorted((src / split).iterdir()) if p.is_dir()]
        holdout = len([p for p in sorted((src / "downstream").iterdir())
                       if p.is_dir()])
    if holdout < 1:
        raise ConfigError("downstream split is empty")
    if holdout >= len(graphs):
        raise ConfigError("holdout would leave no pre-training domains")
    pre, down = graphs[:-holdout], graphs[-holdout:]
    for i, g in enumerate(pre):
        save_graph(g, run_dir / "data" / "pretrain" / f"g{i:03d}")
    for i, g in enumerate(down):
        save_graph(g, run_dir / "data" / "downstream" / f"g{i:03d}")
    (run_dir / "data" / "meta").write_text(
        f"pretrain {len(pre)}\ndownstream {len(down)}\n")
    return 0


def _stage_pretrain(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    _require(run_dir, "data/meta", "gen-data")
    graphs, _ = _load_split(run_dir)
    pre_cfg = PretrainConfig(cfg["pretrain.lr"], cfg["pretrain.max_epochs"],
                             cfg["pretrain.patience"], cfg["pretrain.temperature"],
                             cfg["pretrain.edge_drop_p"],
                             cfg["pretrain.feature_mask_p"], cfg["pretrain.batch"])
    params, trace = pretrain_contrastive(graphs, pre_cfg, Rng(cfg["seed"], "pretrain"),
                                         cfg["encoder.hidden1"], cfg["encoder.hidden2"])
    ad.save_tensors(run_dir / "encoder.txt", params.items())
    _write_csv(run_dir / "pretrain_trace.csv", "epoch,loss",
               (f"{i},{v:.17g}" for i, v in enumerate(trace)))
    return 0


def _stage_prototypes(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    _require(run_dir, "data/meta", "gen-data")
    _require(run_dir, "encoder.txt", "pretrain")
    graphs, _ = _load_split(run_dir)
    enc = _load_encoder(run_dir)
    total = sum(g.num_nodes for g in graphs)
    k = cfg["prototypes.k"] or default_k(total)
    protos = build_prototype_set(enc, graphs, k, Rng(cfg["seed"], "prototypes"),
                                 cfg["ego.min_size"], cfg["ego.max_size"])
    _save_prototypes(run_dir, protos)
    return 0


def _stage_attack(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    _require(run_dir, "data/meta", "gen-data")
    _require(run_dir, "encoder.txt", "pretrain")
    _require(run_dir, "prototypes.txt", "prototypes")
    graphs, _ = _load_split(run_dir)
    enc = _load_encoder(run_dir)
    protos = _load_prototypes(run_dir)
    rng = Rng(cfg["seed"], "attack")

    attack_cfg = AttackTrainConfig(
        alpha=cfg["attack.alpha"], beta=cfg["attack.beta"],
        epochs=cfg["attack.epochs"], lr=cfg["attack.lr"],
        random_target_instead_of_fps=cfg["attack.random_target_instead_of_fps"],
        static_trigger=cfg["attack.static_trigger"],
        disable_persistence=cfg["attack.disable_persistence"],
        readout=cfg["attack.readout"])

    feature_dim = enc.W1.shape[0]
    if attack_cfg.static_trigger:
        gen = StaticTrigger(np.zeros(feature_dim))
    else:
        gen = init_generator(feature_dim, enc.W2.shape[1], rng.child("gen-init"))

    ctx = None
    if attack_cfg.beta > 0 and not attack_cfg.disable_persistence:
        perturb = PerturbationConfig(cfg["perturb.s"], cfg["perturb.sigma"],
                                     cfg["perturb.m"], cfg["perturb.lambda_mix"],
                                     cfg["perturb.hvp_eps"])
        ctx, report = prepare_persistence(enc, graphs, perturb,
                                          rng.child("persistence"),
                                          limit=cfg["perturb.mixed_limit"])
        report.to_csv(run_dir / "sensitivity.csv")

    trained, trace = train_attack(gen, enc, graphs, protos.embeddings, ctx,
                                  attack_cfg, rng.child("train"),
                                  cfg["ego.min_size"], cfg["ego.max_size"])
    ad.save_tensors(run_dir / "trigger.txt", trained.items())
    _write_csv(run_dir / "attack_trace.csv", "epoch,l_eff,l_ste,l_per,total",
               (f"{i},{e:.17g},{s:.17g},{p:.17g},{t:.17g}"
                for i, (e, s, p, t) in enumerate(trace)))
    return 0


@dataclass
class _EvalContext:
    enc: EncoderParams
    gen: object
    protos: PrototypeSet
    downstream: list[Graph]
    head: LinearHead
    num_classes: int
    test_nodes: list[tuple[Graph, int]]
    probe_nodes: list[tuple[Graph, int]]
    scenario: ScenarioSpec
    e_j: np.ndarray | None
    queries: int
    rng: Rng


def _eval_context(cfg: RunConfig, run_dir: Path) -> _EvalContext:
    for rel, stage in (("data/meta", "gen-data"), ("encoder.txt", "pretrain"),
                       ("prototypes.txt", "prototypes"), ("trigger.txt", "attack")):
        _require(run_dir, rel, stage)
    _, downstream = _load_split(run_dir)
    enc = _load_encoder(run_dir)
    gen = _load_trigger(run_dir)
    protos = _load_prototypes(run_dir)
    rng = Rng(cfg["seed"], "eval")
    lo, hi = cfg["ego.min_size"], cfg["ego.max_size"]

    emb, sources = ego_embeddings(enc, downstream, lo, hi)
    labels = np.array([downstream[gid].labels[v]
                       if downstream[gid].labels is not None else -1
                       for gid, v in sources])
    shot_rng = rng.child("fewshot")
    head = train_head(emb, labels, cfg["eval.shots"], shot_rng)
    shot_idx = set(int(i) for i in
                   few_shot_indices(labels, cfg["eval.shots"], shot_rng))
    eligible = [flat for flat in range(labels.size)
                if labels[flat] >= 0 and flat not in shot_idx]
    if not eligible:
        raise ConfigError("no labeled nodes left outside the few-shot split")

    # probe nodes are spent on trial queries, never counted in test metrics
    perm = rng.child("probes").generator().permutation(len(eligible))
    probe_count = min(cfg["eval.probe_count"], max(len(eligible) - 1, 1))
    probe_flat = sorted(eligible[i] for i in perm[:probe_count])
    test_flat = sorted(set(eligible) - set(probe_flat))
    probe_nodes = [(downstream[sources[f][0]], sources[f][1]) for f in probe_flat]
    test_nodes = [(downstream[sources[f][0]], sources[f][1]) for f in test_flat]

    kind = cfg["eval.scenario"]
    queries = 0
    if kind == CONTROLLED:
        budget = cfg["eval.query_budget"] or 3 * protos.k
        picked = trial_query_select(enc, head, gen, protos.embeddings,
                                    cfg["eval.target_class"], probe_nodes,
                                    budget, lo, hi)
        queries = picked.queries
        pid = picked.prototype_id
        scenario = ScenarioSpec(CONTROLLED, prototype_id=pid if pid is not None else 0,
                                target_class=cfg["eval.target_class"],
                                query_budget=budget)
        e_j = None if pid is None else protos.embeddings[pid]
    else:
        pid = cfg["eval.prototype_id"]
        if not (0 <= pid < protos.k):
            raise ConfigError(f"eval.prototype_id {pid} outside [0, {protos.k})")
        scenario = ScenarioSpec(UNCONTROLLED, prototype_id=pid)
        e_j = protos.embeddings[pid]

    num_classes = int(labels.max()) + 1
    return _EvalContext(enc, gen, protos, downstream, head, num_classes,
                        test_nodes, probe_nodes, scenario, e_j, queries, rng)


def _stealth_score(ctx: _EvalContext, lo: int, hi: int) -> float:
    """Mean cosine between each victim's own features and its trigger."""
    sims = []
    for g, v in ctx.test_nodes:
        sub, local = ego_subgraph(g, v, min(lo, g.num_nodes), min(hi, g.num_nodes))
        x_i = sub.X[local]
        x_tri = trigger_feature_for(ctx.gen, x_i, ctx.e_j)
        denom = max(np.linalg.norm(x_i) * np.linalg.norm(x_tri), 1e-12)
        sims.append(float(np.dot(x_i, x_tri) / denom))
    return float(np.mean(sims))


def _stage_eval(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    ctx = _eval_context(cfg, run_dir)
    lo, hi = cfg["ego.min_size"], cfg["ego.max_size"]
    acc = clean_accuracy(ctx.enc, ctx.head, ctx.test_nodes, lo, hi)

    if ctx.e_j is None:  # no prototype reached the requested class in budget
        rate = rate_purified = rate_after = 0.0
        hist = np.zeros(ctx.num_classes, dtype=np.int64)
        stealth = 0.0
    else:
        preds = triggered_predictions(ctx.enc, ctx.head, ctx.gen, ctx.test_nodes,
                                      ctx.e_j, lo, hi)
        rate = asr_from_predictions(preds, ctx.scenario)
        hist = class_histogram(preds, ctx.num_classes)
        rate_purified = asr(ctx.enc, ctx.head, ctx.gen, ctx.test_nodes,
                            ctx.scenario, ctx.protos.embeddings, lo, hi,
                            purify_tau=cfg["eval.purify_tau"])
        ft = FinetuneEvalConfig(cfg["eval.finetune_lr"],
                                cfg["eval.finetune_epochs"], cfg["eval.shots"])
        outcome = persistence_eval(ctx.enc, ctx.gen, ctx.downstream, ctx.scenario,
                                   ctx.protos.embeddings, ft, ctx.rng.child("persist"),
                                   lo, hi)
        rate_after = outcome.asr_after
        stealth = _stealth_score(ctx, lo, hi)

    report = EvalReport(rate, acc, rate_purified, rate_after, hist,
                        seeds=(cfg["seed"],), config_digest=cfg.digest())
    (run_dir / "report.txt").write_text(report.to_text())
    _write_csv(run_dir / "report.csv", EvalReport.csv_header(),
               [report.csv_row(cfg["seed"], cfg["attack.alpha"],
                               cfg["attack.beta"], ctx.scenario.kind)])
    (run_dir / "stealth.txt").write_text(f"mean_trigger_cosine {stealth:.17g}\n")
    if ctx.scenario.kind == CONTROLLED:
        pid = "none" if ctx.e_j is None else str(ctx.scenario.prototype_id)
        (run_dir / "trial_query.txt").write_text(
            f"aligned {'true' if ctx.e_j is not None else 'false'}\n"
            f"prototype {pid}\nqueries {ctx.queries}\n")
    return 0


def _stage_purify_eval(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    ctx = _eval_context(cfg, run_dir)
    lo, hi = cfg["ego.min_size"], cfg["ego.max_size"]
    tau = cfg["eval.purify_tau"]
    if ctx.e_j is None:
        plain = cleaned = 0.0
    else:
        plain = asr(ctx.enc, ctx.head, ctx.gen, ctx.test_nodes, ctx.scenario,
                    ctx.protos.embeddings, lo, hi)
        cleaned = asr(ctx.enc, ctx.head, ctx.gen, ctx.test_nodes, ctx.scenario,
                      ctx.protos.embeddings, lo, hi, purify_tau=tau)
    (run_dir / "purify_report.txt").write_text(
        f"tau {tau:.17g}\nasr {plain:.17g}\nasr_purified {cleaned:.17g}\n")
    return 0


def _stage_persist_eval(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    ctx = _eval_context(cfg, run_dir)
    lo, hi = cfg["ego.min_size"], cfg["ego.max_size"]
    if ctx.e_j is None:
        raise ConfigError("no aligned prototype; persistence cannot be measured")
    ft = FinetuneEvalConfig(cfg["eval.finetune_lr"], cfg["eval.finetune_epochs"],
                            cfg["eval.shots"])
    outcome = persistence_eval(ctx.enc, ctx.gen, ctx.downstream, ctx.scenario,
                               ctx.protos.embeddings, ft, ctx.rng.child("persist"),
                               lo, hi)
    counts, edges = update_magnitude_histogram(outcome.params_before,
                                               outcome.params_after)
    deltas = np.abs(outcome.params_after.flatten() - outcome.params_before.flatten())
    top = float(deltas.max())
    frac_small = float(np.mean(deltas < 0.1 * top)) if top > 0 else 1.0
    (run_dir / "persist_report.txt").write_text(
        f"asr_before {outcome.asr_before:.17g}\n"
        f"asr_after {outcome.asr_after:.17g}\n"
        f"frac_below_tenth_of_max {frac_small:.17g}\n")
    _write_csv(run_dir / "update_hist.csv", "bin_lo,bin_hi,count",
               (f"{edges[i]:.17g},{edges[i + 1]:.17g},{int(c)}"
                for i, c in enumerate(counts)))
    return 0


def _stage_fps_verify(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    lambdas = [float(v) for v in cfg["fps.lambdas"].split(",") if v.strip()]
    if not lambdas:
        raise ConfigError("fps.lambdas must list at least one value")
    base = MixtureSpec(cfg["fps.m"], lambdas[0], cfg["fps.sigma"],
                       cfg["fps.n_per_class"], cfg["fps.dim"])
    est, monotone = verify_fps_separation_monotonicity(
        base, lambdas, cfg["fps.k"], cfg["fps.r"], cfg["fps.trials"],
        Rng(cfg["seed"], "fps-verify"))
    est.to_csv(run_dir / "coverage.csv")

    control = dataclasses.replace(base, noise_sigma=0.0)
    est0, _ = verify_fps_separation_monotonicity(
        control, lambdas, cfg["fps.k"], cfg["fps.r"], cfg["fps.trials"],
        Rng(cfg["seed"], "fps-verify-control"))
    est0.to_csv(run_dir / "coverage_control.csv")
    exact = all(s == est0.trials for s in est0.successes)

    overall = monotone and exact
    (run_dir / "verdict.txt").write_text(
        f"monotone {'true' if monotone else 'false'}\n"
        f"zero_noise_exact {'true' if exact else 'false'}\n"
        f"overall {'true' if overall else 'false'}\n")
    return 0 if overall else 3


def _stage_sensitivity_report(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    _require(run_dir, "data/meta", "gen-data")
    _require(run_dir, "encoder.txt", "pretrain")
    graphs, _ = _load_split(run_dir)
    enc = _load_encoder(run_dir)
    perturb = PerturbationConfig(cfg["perturb.s"], cfg["perturb.sigma"],
                                 cfg["perturb.m"], cfg["perturb.lambda_mix"],
                                 cfg["perturb.hvp_eps"])
    rng = Rng(cfg["seed"], "sensitivity")
    mixed = mixed_set(graphs, perturb.lambda_mix, cfg["perturb.mixed_limit"],
                      rng.child("mix"))
    report = sensitivity_scores(enc, mixed, perturb, rng.child("views"))
    report.to_csv(run_dir / "sensitivity.csv")
    return 0


def _grid_cell_run(parent: str, rel: str, values: dict) -> str:
    """Run attack + eval for one (alpha, beta) cell under parent/rel and
    return the cell's flat CSV row.  Top level so process pools can use it."""
    parent_dir, cell_dir = Path(parent), Path(parent) / rel
    cfg = RunConfig.from_dict(values)
    if not (cell_dir / "data" / "meta").exists():
        cell_dir.mkdir(parents=True, exist_ok=True)
        shutil.copytree(parent_dir / "data", cell_dir / "data",
                        dirs_exist_ok=True)
        for name in ("encoder.txt", "prototypes.txt"):
            shutil.copy(parent_dir / name, cell_dir / name)
        write_manifest(cell_dir, cfg, {})
    code = run_pipeline("attack", cfg, jobs=1, echo=False)
    if code == 0:
        code = run_pipeline("eval", cfg, jobs=1, echo=False)
    if code != 0:
        raise ad.NumericError(f"grid cell {rel} failed with exit code {code}")
    return (cell_dir / "report.csv").read_text().splitlines()[1]


def _grid_cell_star(args) -> str:
    return _grid_cell_run(*args)


def _stage_grid(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    for rel, stage in (("data/meta", "gen-data"), ("encoder.txt", "pretrain"),
                       ("prototypes.txt", "prototypes")):
        _require(run_dir, rel, stage)
    scale = default_alpha_beta_grid()
    cells = []
    for ai, alpha in enumerate(scale):
        for bi, beta in enumerate(scale):
            rel = f"grid/a{ai}-b{bi}"
            values = cfg.as_dict()
            values.update({"attack.alpha": alpha, "attack.beta": beta,
                           "out": str(run_dir / rel)})
            cells.append((str(run_dir), rel, values))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_grid_cell_star, cells))
    else:
        rows = [_grid_cell_run(*cell) for cell in cells]
    _write_csv(run_dir / "grid.csv", EvalReport.csv_header(), rows)
    return 0


def emit_report(run_dir: Path) -> None:
    """Aggregate every report.csv below run_dir into one CSV plus per-cell
    medians over seeds."""
    run_dir = Path(run_dir)
    header = EvalReport.csv_header()
    rows: list[tuple] = []
    found = False
    for path in sorted(run_dir.rglob("report.csv")):
        found = True
        lines = path.read_text().splitlines()
        if not lines or lines[0] != header:
            raise ConfigError(f"malformed report file {path}: bad header")
        for line in lines[1:]:
            parts = line.split(",")
            if len(parts) != 8:
                raise ConfigError(f"malformed report file {path}: bad row {line!r}")
            try:
                rows.append((int(parts[0]), float(parts[1]), float(parts[2]),
                             parts[3], *(float(v) for v in parts[4:])))
            except ValueError:
                raise ConfigError(f"malformed report file {path}: "
                                  f"bad row {line!r}") from None
    if not found:
        raise ConfigError(f"no reports found under {run_dir}")

    groups: dict[tuple, list[tuple]] = {}
    for row in rows:
        groups.setdefault((row[1], row[2], row[3]), []).append(row)
    summary_rows = []
    for (alpha, beta, scenario), members in sorted(groups.items()):
        medians = [statistics.median(m[col] for m in members)
                   for col in (4, 5, 6, 7)]
        summary_rows.append(
            f"{alpha:.17g},{beta:.17g},{scenario},{len(members)},"
            + ",".join(f"{v:.17g}" for v in medians))
    _write_csv(run_dir / "summary.csv",
               "alpha,beta,scenario,n,asr_median,acc_median,"
               "asr_purified_median,asr_after_ft_median", summary_rows)
    (run_dir / "summary.txt").write_text(
        f"reports {len(rows)}\ncells {len(groups)}\n"
        + "".join(line + "\n" for line in summary_rows))


def _stage_report(cfg: RunConfig, run_dir: Path, jobs: int) -> int:
    emit_report(run_dir)
    return 0


STAGES = {
    "gen-data": _stage_gen_data,
    "pretrain": _stage_pretrain,
    "prototypes": _stage_prototypes,
    "attack": _stage_attack,
    "eval": _stage_eval,
    "purify-eval": _stage_purify_eval,
    "persist-eval": _stage_persist_eval,
    "fps-verify": _stage_fps_verify,
    "sensitivity-report": _stage_sensitivity_report,
    "grid": _stage_grid,
    "report": _stage_report,
}


def run_pipeline(subcommand: str, cfg: RunConfig, jobs: int = 1,
                 echo: bool = True) -> int:
    """Run one named stage against the run directory from cfg['out'].

    Returns the process exit code: 0 on success, 3 when fps-verify reaches a
    negative verdict.  Config problems raise ConfigError and numeric failures
    surface as NumericError; the CLI maps those to exit codes 1 and 2.
    """
    if subcommand not in STAGES:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    cfg.validate()
    run_dir = Path(cfg["out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    if echo:
        print(f"# stage {subcommand}\n{cfg.dump()}", end="")
    if _finished(run_dir, cfg, subcommand):
        if echo:
            print(f"# stage {subcommand}: artifacts present, skipping")
        if subcommand == "fps-verify":
            verdict = (run_dir / "verdict.txt").read_text()
            return 0 if "overall true" in verdict else 3
        return 0
    (run_dir / "config.txt").write_text(cfg.dump())
    code = STAGES[subcommand](cfg, run_dir, jobs)
    _record(run_dir, cfg, subcommand)
    return code

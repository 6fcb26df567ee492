import hashlib
import shutil
from pathlib import Path

import numpy as np
import pytest

from gblab import cli
from gblab.autodiff import NumericError
from gblab.prototypes import CoverageEstimate
from gblab.pipeline import (
    SCHEMA,
    STAGE_OUTPUTS,
    STAGES,
    ConfigError,
    RunConfig,
    emit_report,
    read_manifest,
    run_pipeline,
    write_manifest,
)

# small enough that a full pipeline takes about a second
MICRO = {
    "seed": 1,
    "sbm.num_domains": 3, "sbm.classes_per_domain": 2, "sbm.nodes_per_class": 6,
    "sbm.p_in": 0.5, "sbm.p_out": 0.05, "sbm.feature_dim": 4,
    "sbm.feature_centroid_scale": 4.0, "sbm.feature_noise": 0.3,
    "encoder.hidden1": 8, "encoder.hidden2": 6,
    "pretrain.max_epochs": 20, "pretrain.patience": 5, "pretrain.batch": 4,
    "prototypes.k": 4, "ego.min_size": 3, "ego.max_size": 6,
    "attack.epochs": 2, "attack.lr": 0.05,
    "perturb.m": 2, "perturb.mixed_limit": 4,
    "eval.shots": 2, "eval.probe_count": 2, "eval.finetune_epochs": 3,
}


def micro_cfg(out, **extra) -> RunConfig:
    return RunConfig.from_dict({**MICRO, "out": str(out), **extra})


def run_stages(cfg, *stages):
    for stage in stages:
        assert run_pipeline(stage, cfg, echo=False) == 0


@pytest.fixture(scope="session")
def std_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("std-run")
    cfg = micro_cfg(out)
    run_stages(cfg, "gen-data", "pretrain", "prototypes", "attack", "eval",
               "purify-eval", "persist-eval", "sensitivity-report")
    return cfg, out


# ------------------------------------------------------------------- config


def test_default_config_values():
    cfg = RunConfig.defaults()
    assert cfg["perturb.s"] == 0.2
    assert cfg["perturb.sigma"] == 0.1
    assert cfg["perturb.m"] == 5
    assert cfg["perturb.lambda_mix"] == 0.5
    assert cfg["eval.purify_tau"] == 0.1
    assert cfg["eval.finetune_lr"] == 0.001
    assert cfg["eval.finetune_epochs"] == 500
    assert cfg["eval.shots"] == 5
    assert (cfg["ego.min_size"], cfg["ego.max_size"]) == (15, 30)


def test_dump_parse_round_trip():
    cfg = RunConfig.defaults().with_overrides(
        {"attack.alpha": 0.25, "attack.static_trigger": True, "seed": 9})
    again = RunConfig.from_dict(RunConfig.parse(cfg.dump()))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_unknown_keys_are_fatal():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.parse("attack.alhpa = 0.1\n")
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"nope": 3})
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.defaults().with_set_args(["sbm.p_inn=0.5"])


def test_parse_rejects_bad_literals():
    with pytest.raises(ConfigError, match="integer"):
        RunConfig.parse("attack.epochs = 2.5\n")
    with pytest.raises(ConfigError, match="true or false"):
        RunConfig.parse("attack.static_trigger = yes\n")
    with pytest.raises(ConfigError, match="number"):
        RunConfig.parse("attack.alpha = high\n")
    with pytest.raises(ConfigError, match="duplicate"):
        RunConfig.parse("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        RunConfig.parse("seed 1\n")


def test_parse_skips_comments_and_blanks():
    parsed = RunConfig.parse("# comment\n\nseed = 4  # trailing\n")
    assert parsed == {"seed": 4}


def test_digest_reacts_to_any_value():
    base = RunConfig.defaults()
    for key, value in [("seed", 5), ("attack.alpha", 0.9),
                       ("eval.scenario", "controlled")]:
        assert base.with_overrides({key: value}).digest() != base.digest()


def test_validate_catches_scenario_and_sizes():
    with pytest.raises(ConfigError, match="target_class"):
        RunConfig.defaults().with_overrides(
            {"eval.scenario": "controlled"}).validate()
    with pytest.raises(ConfigError, match="min_size"):
        RunConfig.defaults().with_overrides(
            {"ego.min_size": 9, "ego.max_size": 3}).validate()


def test_load_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.load(tmp_path / "nope.txt")


# ----------------------------------------------------------------- manifest


def test_manifest_round_trip(tmp_path):
    (tmp_path / "a.txt").write_text("hello")
    cfg = micro_cfg(tmp_path)
    write_manifest(tmp_path, cfg, {"gen-data": cfg.digest()})
    man = read_manifest(tmp_path)
    assert man.config_digest == cfg.digest()
    assert man.seed == 1
    assert man.stages == {"gen-data": cfg.digest()}
    expect = hashlib.sha256(b"hello").hexdigest()
    assert man.artifacts == {"a.txt": expect}


def test_manifest_records_every_stage(std_run):
    cfg, out = std_run
    man = read_manifest(out)
    for stage in ("gen-data", "pretrain", "prototypes", "attack", "eval"):
        assert man.stages[stage] == cfg.digest()
    on_disk = hashlib.sha256((out / "encoder.txt").read_bytes()).hexdigest()
    assert man.artifacts["encoder.txt"] == on_disk


def test_missing_upstream_names_the_stage(tmp_path):
    with pytest.raises(ConfigError, match="gen-data"):
        run_pipeline("attack", micro_cfg(tmp_path), echo=False)
    run_stages(micro_cfg(tmp_path), "gen-data")
    with pytest.raises(ConfigError, match="pretrain"):
        run_pipeline("prototypes", micro_cfg(tmp_path), echo=False)


def test_tampered_artifact_is_rejected(std_run, tmp_path):
    _, out = std_run
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    (work / "encoder.txt").write_text("tampered\n")
    # changed k forces the stage to actually rerun instead of skipping
    with pytest.raises(ConfigError, match="does not match the manifest"):
        run_pipeline("prototypes", micro_cfg(work, **{"prototypes.k": 3}),
                     echo=False)


# ------------------------------------------------------------------- stages


def test_stage_artifacts_exist(std_run):
    _, out = std_run
    done = ("gen-data", "pretrain", "prototypes", "attack", "eval",
            "purify-eval", "persist-eval", "sensitivity-report")
    for stage in done:
        for rel in STAGE_OUTPUTS[stage]:
            assert (out / rel).exists(), f"{stage} missing {rel}"
    assert (out / "sensitivity.csv").exists()  # beta > 0 wrote the report


def test_report_row_is_well_formed(std_run):
    _, out = std_run
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "seed,alpha,beta,scenario,asr,acc,asr_purified,asr_after_ft"
    fields = lines[1].split(",")
    assert len(fields) == 8
    assert int(fields[0]) == 1
    assert fields[3] == "uncontrolled"
    for v in fields[4:]:
        assert 0.0 <= float(v) <= 1.0
    text = (out / "report.txt").read_text()
    for key in ("asr ", "acc ", "asr_purified ", "asr_after_ft ",
                "class_histogram ", "seeds 1", "config_digest "):
        assert key in text


def test_purify_report_consistent_with_eval(std_run):
    _, out = std_run
    report = dict(line.split() for line in
                  (out / "purify_report.txt").read_text().splitlines())
    row = (out / "report.csv").read_text().splitlines()[1].split(",")
    assert float(report["asr"]) == float(row[4])
    assert float(report["asr_purified"]) == float(row[6])


def test_persist_report_and_histogram(std_run):
    _, out = std_run
    report = dict(line.split() for line in
                  (out / "persist_report.txt").read_text().splitlines())
    assert 0.0 <= float(report["asr_after"]) <= 1.0
    assert 0.0 <= float(report["frac_below_tenth_of_max"]) <= 1.0
    rows = (out / "update_hist.csv").read_text().splitlines()[1:]
    counts = [int(r.split(",")[2]) for r in rows]
    assert len(counts) == 20
    assert sum(counts) == 4 * 8 + 8 * 6  # every encoder weight lands in a bin


def test_sensitivity_csv_header(std_run):
    _, out = std_run
    head = (out / "sensitivity.csv").read_text().splitlines()[0]
    assert head == "param_index,name,theta,g,hvp_theta,score,selected"


def test_skip_leaves_bytes_untouched(std_run):
    cfg, out = std_run
    before = (out / "encoder.txt").read_bytes()
    assert run_pipeline("pretrain", cfg, echo=False) == 0
    assert (out / "encoder.txt").read_bytes() == before


def test_full_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "run"
    cfg = micro_cfg(out)

    def capture():
        run_stages(cfg, "gen-data", "pretrain", "prototypes", "attack", "eval")
        return {p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted(out.rglob("*")) if p.is_file()}

    first = capture()
    shutil.rmtree(out)
    second = capture()
    assert first == second


def test_controlled_scenario_writes_trial_query(std_run, tmp_path):
    _, out = std_run
    work = tmp_path / "controlled"
    shutil.copytree(out, work)
    cfg = micro_cfg(work, **{"eval.scenario": "controlled",
                             "eval.target_class": 0})
    run_stages(cfg, "eval")
    query = dict(line.split() for line in
                 (work / "trial_query.txt").read_text().splitlines())
    assert query["aligned"] in ("true", "false")
    assert int(query["queries"]) <= 3 * 4  # budget defaults to 3k
    row = (work / "report.csv").read_text().splitlines()[1].split(",")
    assert row[3] == "controlled"


def test_stealth_rises_with_alpha(tmp_path):
    def stealth(alpha, name):
        out = tmp_path / name
        cfg = micro_cfg(out, **{"attack.alpha": alpha, "attack.beta": 0.0,
                                "attack.epochs": 4, "eval.finetune_epochs": 0,
                                "seed": 3})
        run_stages(cfg, "gen-data", "pretrain", "prototypes", "attack", "eval")
        return float((out / "stealth.txt").read_text().split()[1])

    assert stealth(0.1, "on") > stealth(0.0, "off")


# --------------------------------------------------------------- fps-verify


def test_fps_verify_passes_and_skips(tmp_path):
    cfg = micro_cfg(tmp_path, **{"fps.trials": 150, "fps.n_per_class": 2})
    assert run_pipeline("fps-verify", cfg, echo=False) == 0
    verdict = (tmp_path / "verdict.txt").read_text()
    assert "monotone true" in verdict
    assert "zero_noise_exact true" in verdict
    assert "overall true" in verdict
    assert len((tmp_path / "coverage.csv").read_text().splitlines()) == 5
    # rerun takes the skip path and must report the same outcome
    assert run_pipeline("fps-verify", cfg, echo=False) == 0


def test_fps_verify_failure_exit_code(tmp_path, monkeypatch):
    est = CoverageEstimate((1.0, 2.0), (40, 10), 100, 4, 4, 0.1)

    def fake_verify(spec, lambdas, k, r, trials, rng):
        return est, False

    monkeypatch.setattr("gblab.pipeline.verify_fps_separation_monotonicity",
                        fake_verify)
    cfg = micro_cfg(tmp_path, **{"fps.trials": 100})
    assert run_pipeline("fps-verify", cfg, echo=False) == 3
    assert "overall false" in (tmp_path / "verdict.txt").read_text()
    # skip path re-reads the stored verdict
    assert run_pipeline("fps-verify", cfg, echo=False) == 3


# --------------------------------------------------------------------- grid


def test_grid_produces_25_rows(tmp_path):
    cfg = micro_cfg(tmp_path, **{"attack.epochs": 1, "eval.finetune_epochs": 0})
    run_stages(cfg, "gen-data", "pretrain", "prototypes", "grid")
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    assert len(lines) == 26
    pairs = set()
    for row in lines[1:]:
        fields = row.split(",")
        assert len(fields) == 8
        pairs.add((float(fields[1]), float(fields[2])))
        assert 0.0 <= float(fields[4]) <= 1.0
    assert len(pairs) == 25

    before = (tmp_path / "grid.csv").read_bytes()
    assert run_pipeline("grid", cfg, echo=False) == 0
    assert (tmp_path / "grid.csv").read_bytes() == before

    run_stages(cfg, "report")
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("alpha,beta,scenario,n,")
    assert len(summary) == 26  # one aggregate row per grid cell


# ------------------------------------------------------------- emit_report


def test_emit_report_aggregates_medians(tmp_path):
    header = "seed,alpha,beta,scenario,asr,acc,asr_purified,asr_after_ft"
    (tmp_path / "s0").mkdir()
    (tmp_path / "s1").mkdir()
    (tmp_path / "s0" / "report.csv").write_text(
        header + "\n0,0.5,0.25,uncontrolled,0.8,0.9,0.4,0.6\n")
    (tmp_path / "s1" / "report.csv").write_text(
        header + "\n1,0.5,0.25,uncontrolled,0.6,0.7,0.2,0.4\n")
    emit_report(tmp_path)
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(lines) == 2
    fields = lines[1].split(",")
    assert fields[:4] == ["0.5", "0.25", "uncontrolled", "2"]
    assert [float(v) for v in fields[4:]] == [0.7, 0.8, 0.30000000000000004, 0.5]


def test_emit_report_errors(tmp_path):
    with pytest.raises(ConfigError, match="no reports"):
        emit_report(tmp_path)
    bad = tmp_path / "x"
    bad.mkdir()
    (bad / "report.csv").write_text("wrong,header\n")
    with pytest.raises(ConfigError, match=str(bad / "report.csv")):
        emit_report(tmp_path)


# ---------------------------------------------------------------------- cli


def test_cli_runs_gen_data_with_overrides(tmp_path):
    conf = tmp_path / "conf.txt"
    conf.write_text("sbm.num_domains = 2\nsbm.nodes_per_class = 4\n"
                    "sbm.classes_per_domain = 2\nsbm.feature_dim = 3\n")
    out = tmp_path / "run"
    code = cli.main(["gen-data", "--config", str(conf), "--out", str(out),
                     "--seed", "9", "--set", "sbm.p_in=0.9"])
    assert code == 0
    dumped = (out / "config.txt").read_text()
    assert "seed = 9" in dumped
    assert "sbm.p_in = 0.90000000000000002" in dumped
    assert (out / "data" / "meta").read_text() == "pretrain 1\ndownstream 1\n"


def test_cli_config_errors_exit_1(tmp_path):
    assert cli.main(["gen-data", "--set", "bogus=1",
                     "--out", str(tmp_path)]) == 1
    assert cli.main(["gen-data", "--config", str(tmp_path / "none.txt"),
                     "--out", str(tmp_path)]) == 1
    assert cli.main(["not-a-stage"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["--help"]) == 0
    assert cli.main(["gen-data", "--jobs", "0", "--out", str(tmp_path)]) == 1


def test_cli_numeric_failure_exits_2(tmp_path, monkeypatch):
    def boom(cfg, run_dir, jobs):
        raise NumericError("synthetic blow-up")

    monkeypatch.setitem(STAGES, "gen-data", boom)
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 2


def test_cli_schema_covers_all_stages():
    # every stage name maps to a callable and is listed in outputs
    assert set(STAGES) == set(STAGE_OUTPUTS)
    assert all(callable(fn) for fn in STAGES.values())
    assert set(SCHEMA["fps.lambdas"].split(",")) == {"1", "2", "4", "8"}

# test_cli.py

import csv
import json

import numpy as np
import pytest

from conftest import tiny_flat
from engine.nn_engine import init_params
from errors import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME
from main import load_config, main
from orchestrator.attack_pipeline import ABLATION_LADDER
from stages.run_ledger import RunLedger
from storage.checkpoint_io import load_checkpoint
from storage.dataset_io import load_dataset, load_sidecar, tag_histogram
from storage.headers import read_csv_preamble
from storage.report_io import load_metrics_report, load_score_report


def _sets(workdir, **overrides):
    argv = []
    for key, value in tiny_flat(str(workdir), **overrides).items():
        argv += ["--set", f"{key}={value}"]
    return argv


def run(workdir, *command, overrides=None, flags=()):
    return main([*_sets(workdir, **(overrides or {})), "--quiet", *flags, *command])


def pipeline(workdir, overrides=None, flags=()):
    for command in (["scenario"], ["train"], ["attack"]):
        assert run(workdir, *command, overrides=overrides, flags=flags) == EXIT_OK


def test_full_run_writes_every_artifact(tmp_path):
    workdir = tmp_path / "run"
    pipeline(workdir)
    assert run(workdir, "eval") == EXIT_OK
    for name in ("train.ds", "pool.ds", "test.ds", "pool.tags.csv", "model.ckpt", "scores_kkt.csv", "scores_kkt.json",
                 "metrics_kkt.json", "metrics_kkt_roc.csv"):
        assert (workdir / name).exists(), name

    report = load_score_report(workdir / "scores_kkt.csv")
    assert report.attack_name == "kkt"
    assert report.pool_size == 60
    assert report.master_seed == 7
    assert 0 < report.n_retained <= 60
    metrics = load_metrics_report(workdir / "metrics_kkt.json")
    assert 0.0 <= metrics.auc <= 1.0
    assert metrics.n_members == 30
    assert metrics.summary["auc"].se == 0.0


def test_reruns_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    pipeline(first)
    pipeline(second)
    for name in ("pool.ds", "pool.tags.csv", "model.ckpt", "scores_kkt.csv", "scores_kkt.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_thread_count_does_not_change_scores(tmp_path):
    pipeline(tmp_path / "one")
    pipeline(tmp_path / "four", flags=("--threads", "4"))
    assert (tmp_path / "one" / "scores_kkt.csv").read_bytes() == (tmp_path / "four" / "scores_kkt.csv").read_bytes()


def test_attack_runs_without_the_tags(tmp_path):
    workdir = tmp_path / "run"
    assert run(workdir, "scenario") == EXIT_OK
    assert run(workdir, "train") == EXIT_OK
    tags = (workdir / "pool.tags.csv").read_bytes()
    (workdir / "pool.tags.csv").unlink()
    assert run(workdir, "attack") == EXIT_OK
    # evaluation needs the ground truth
    assert run(workdir, "eval") == EXIT_RUNTIME
    (workdir / "pool.tags.csv").write_bytes(tags)
    assert run(workdir, "eval") == EXIT_OK


@pytest.mark.parametrize("baseline", ["gradnorm-margin", "gradnorm-loss", "loss-threshold"])
def test_baselines_write_their_own_reports(tmp_path, baseline):
    workdir = tmp_path / "run"
    assert run(workdir, "scenario") == EXIT_OK
    assert run(workdir, "train") == EXIT_OK
    assert run(workdir, "attack", "--baseline", baseline) == EXIT_OK
    report = load_score_report(workdir / f"scores_{baseline}.csv")
    assert report.attack_name == baseline
    assert report.pool_size == 60
    assert run(workdir, "eval", "--attack", baseline) == EXIT_OK
    assert load_metrics_report(workdir / f"metrics_{baseline}.json").attack_name == baseline


def test_existing_artifacts_need_force(tmp_path):
    workdir = tmp_path / "run"
    assert run(workdir, "scenario") == EXIT_OK
    assert run(workdir, "scenario") == EXIT_CONFIG
    assert run(workdir, "scenario", flags=("--force",)) == EXIT_OK


def test_config_errors_exit_with_two(tmp_path):
    workdir = tmp_path / "run"
    assert run(workdir, "scenario", overrides={"scenario.colour": "blue"}) == EXIT_CONFIG
    assert run(workdir, "scenario", overrides={"scenario.n_in_dist_nonmembers": "10"}) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.conf"), "scenario"]) == EXIT_CONFIG
    assert run(workdir, "train") == EXIT_CONFIG


def test_config_file_and_overrides(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nmaster_seed = 3\nscenario.n_members = 12\nscenario.n_in_dist_nonmembers = 12\n")
    cfg = load_config(str(conf), ["scenario.n_members=14", "scenario.n_in_dist_nonmembers=14"], str(tmp_path / "w"))
    assert cfg.master_seed == 3
    assert cfg.scenario.n_members == 14
    assert cfg.io.workdir == str(tmp_path / "w")
    assert cfg.train.seed is not None


def test_coverage_shows_in_the_tags(tmp_path):
    workdir = tmp_path / "run"
    overrides = {"scenario.scenario_kind": "partial_coverage", "scenario.coverage_fraction": "0.5"}
    assert run(workdir, "scenario", overrides=overrides) == EXIT_OK
    counts = tag_histogram(load_sidecar(workdir / "pool.tags.csv"))
    assert counts["member"] == 15
    assert counts["in_dist_nonmember"] == 30


def test_combined_scenario_tags(tmp_path):
    workdir = tmp_path / "run"
    overrides = {
        "scenario.scenario_kind": "combined", "scenario.n_in_dist_nonmembers": "12", "scenario.n_ood": "18",
        "scenario.ood_shift.mean_offset": "5.0",
    }
    assert run(workdir, "scenario", overrides=overrides) == EXIT_OK
    assert tag_histogram(load_sidecar(workdir / "pool.tags.csv")) == {
        "member": 30, "in_dist_nonmember": 12, "ood_nonmember": 18,
    }


def test_zero_epochs_saves_the_initialization(tmp_path):
    workdir = tmp_path / "run"
    overrides = {"train.epochs": "0"}
    assert run(workdir, "scenario", overrides=overrides) == EXIT_OK
    assert run(workdir, "train", overrides=overrides) == EXIT_OK
    cfg = load_config(None, [f"{k}={v}" for k, v in tiny_flat(str(workdir), **overrides).items()])
    arch, theta, _ = load_checkpoint(workdir / "model.ckpt")
    expected = init_params(cfg.arch, np.random.default_rng(cfg.train.seed))
    assert theta.values.tobytes() == expected.values.tobytes()


def test_ablate_writes_one_report_per_stage(tmp_path):
    workdir = tmp_path / "run"
    assert run(workdir, "scenario") == EXIT_OK
    assert run(workdir, "train") == EXIT_OK
    assert run(workdir, "ablate") == EXIT_OK
    for stage in ABLATION_LADDER:
        report = load_score_report(workdir / f"scores_kkt-{stage}.csv")
        assert report.attack_name == f"kkt-{stage}"
        assert (workdir / f"metrics_kkt-{stage}.json").exists()
    assert load_score_report(workdir / "scores_kkt-trimmed_mean.csv").stages == ["trimmed_mean"]
    assert load_score_report(workdir / "scores_kkt-distance_scale.csv").stages[-1] == "distance_scale"


def test_eval_aggregates_several_seeds(tmp_path):
    files = []
    for seed in (1, 2):
        workdir = tmp_path / f"seed_{seed}"
        pipeline(workdir, overrides={"master_seed": str(seed)})
        files.append(str(workdir / "scores_kkt.csv"))
    summary_dir = tmp_path / "summary"
    assert run(summary_dir, "eval", "--scores", *files) == EXIT_OK
    aggregate = load_metrics_report(summary_dir / "metrics_kkt.json")
    per_seed = [load_metrics_report(tmp_path / f"seed_{s}" / "scores_kkt.metrics.json") for s in (1, 2)]
    assert aggregate.seeds == [1, 2]
    assert aggregate.summary["auc"].per_seed == [m.auc for m in per_seed]
    assert aggregate.summary["auc"].mean == pytest.approx(np.mean([m.auc for m in per_seed]))


def test_shuffled_tags_give_chance_auc(tmp_path):
    workdir = tmp_path / "run"
    pipeline(workdir, overrides={"scenario.n_members": "100", "scenario.n_in_dist_nonmembers": "100"})
    sidecar = workdir / "pool.tags.csv"
    tags = load_sidecar(sidecar)
    ids = list(tags)
    rng = np.random.default_rng(0)
    aucs = []
    for repeat in range(5):
        origins = rng.permutation([tags[i].value for i in ids])
        with open(sidecar, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id", "origin"])
            writer.writerows(zip(ids, origins))
        assert run(workdir, "eval", flags=("--force",)) == EXIT_OK
        aucs.append(load_metrics_report(workdir / "metrics_kkt.json").auc)
    assert abs(np.mean(aucs) - 0.5) <= 0.1


def test_every_run_lands_in_the_ledger(tmp_path):
    workdir = tmp_path / "run"
    assert run(workdir, "scenario") == EXIT_OK
    assert run(workdir, "scenario") == EXIT_CONFIG
    cfg = load_config(None, [f"{k}={v}" for k, v in tiny_flat(str(workdir)).items()])
    trail = RunLedger(str(workdir / "audit_logs")).get_audit_trail(cfg.digest())
    assert [(e["command"], e["status"]) for e in trail] == [("scenario", "ok"), ("scenario", "failed")]
    assert "pool.ds" in json.dumps(trail[0]["artifacts"])


def test_every_artifact_records_the_config_and_seed(tmp_path):
    workdir = tmp_path / "run"
    pipeline(workdir)
    assert run(workdir, "eval") == EXIT_OK
    cfg = load_config(None, [f"{k}={v}" for k, v in tiny_flat(str(workdir)).items()])
    echo = json.loads(json.dumps(cfg.artifact_echo()))
    embedded = {
        "train.ds": json.loads(load_dataset(workdir / "train.ds").metadata["config"]),
        "pool.ds": json.loads(load_dataset(workdir / "pool.ds").metadata["config"]),
        "test.ds": json.loads(load_dataset(workdir / "test.ds").metadata["config"]),
        "pool.tags.csv": read_csv_preamble(workdir / "pool.tags.csv"),
        "model.ckpt": json.loads(load_checkpoint(workdir / "model.ckpt")[2]["config"]),
        "scores_kkt.csv": read_csv_preamble(workdir / "scores_kkt.csv"),
        "scores_kkt.json": json.loads((workdir / "scores_kkt.json").read_text())["config"],
        "metrics_kkt.json": load_metrics_report(workdir / "metrics_kkt.json").config,
        "metrics_kkt_roc.csv": read_csv_preamble(workdir / "metrics_kkt_roc.csv"),
    }
    for name, config in embedded.items():
        assert config.get("master_seed") == 7, name
        assert {k: config[k] for k in echo} == echo, name
    assert load_sidecar(workdir / "pool.tags.csv")


def test_environment_workdir_is_only_a_fallback(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text(f"io.workdir = {tmp_path / 'from_file'}\n")
    env = str(tmp_path / "from_env")
    assert load_config(str(conf), [], fallback_workdir=env).io.workdir == str(tmp_path / "from_file")
    assert load_config(None, [f"io.workdir={tmp_path / 'from_set'}"], fallback_workdir=env).io.workdir == str(tmp_path / "from_set")
    assert load_config(None, [], str(tmp_path / "from_flag"), fallback_workdir=env).io.workdir == str(tmp_path / "from_flag")
    assert load_config(None, [], fallback_workdir=env).io.workdir == env


def test_main_prefers_the_config_file_over_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("KKT_AUDIT_WORKDIR", str(tmp_path / "from_env"))
    conf = tmp_path / "run.conf"
    conf.write_text("".join(f"{k} = {v}\n" for k, v in tiny_flat(str(tmp_path / "from_file")).items()))
    assert main(["--config", str(conf), "--quiet", "scenario"]) == EXIT_OK
    assert (tmp_path / "from_file" / "pool.ds").exists()
    assert not (tmp_path / "from_env").exists()

# orchestrator/commands.py

"""One function per CLI command. Each takes a resolved RunConfig and returns the artifact paths it wrote."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

from engine.nn_engine import accuracy, train_arrays
from errors import ConfigError, InputError
from schemas.config_schemas import Precision, RunConfig
from schemas.report_schemas import MetricsReport, ScoreReport
from stages.baselines import BASELINES
from stages.data_lab import CandidatePool, build_scenario
from stages.evaluator import aggregate_seeds, evaluate
from storage.checkpoint_io import load_checkpoint, save_checkpoint
from storage.dataset_io import load_dataset, load_sidecar, save_dataset, save_sidecar, tag_histogram
from storage.report_io import load_score_report, save_metrics_report, save_score_report
from orchestrator.attack_pipeline import AttackPipeline, ablation_configs

logger = logging.getLogger("Commands")

ATTACKS = ("kkt", *BASELINES)
SIDECAR_NAME = "pool.tags.csv"


def _claim(paths: Sequence[Path], force: bool) -> None:
    taken = [str(p) for p in paths if Path(p).exists()]
    if taken and not force:
        raise ConfigError(f"refusing to overwrite {', '.join(taken)} (use --force)")


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def cmd_scenario(cfg: RunConfig) -> List[Path]:
    io = cfg.io
    outputs = [io.train_file, io.pool_file, io.test_file, io.sidecar_file]
    _claim(outputs, io.force)
    data = build_scenario(cfg.scenario)
    echo = cfg.artifact_echo()
    sc = cfg.scenario
    save_dataset(io.train_file, data.train_set, sc.input_dim, sc.num_classes, sc.image_shaped, sc.seed, echo)
    save_dataset(io.pool_file, data.pool.samples, sc.input_dim, sc.num_classes, sc.image_shaped, sc.seed, echo)
    save_dataset(io.test_file, data.test_set, sc.input_dim, sc.num_classes, sc.image_shaped, sc.seed, echo)
    save_sidecar(io.sidecar_file, data.pool.samples, echo)
    counts = tag_histogram({s.id: s.origin for s in data.pool.samples})
    print(f"✅ Pool of {len(data.pool)} candidates: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return outputs


def cmd_train(cfg: RunConfig, progress: bool = False) -> List[Path]:
    io = cfg.io
    _claim([io.checkpoint_file], io.force)
    train_set = load_dataset(_require(io.train_file, "training set"))
    if (train_set.d, train_set.C) != (cfg.arch.input_dim, cfg.arch.num_classes):
        raise InputError(f"training set has d={train_set.d}, C={train_set.C}; architecture expects "
                         f"d={cfg.arch.input_dim}, C={cfg.arch.num_classes}")
    theta = train_arrays(cfg.arch, train_set.X, train_set.Y, cfg.train, grid_side=train_set.grid_side, progress=progress)
    save_checkpoint(io.checkpoint_file, cfg.arch, theta, cfg.train.seed, cfg.artifact_echo())

    train_acc = accuracy(cfg.arch, theta, train_set.X, train_set.Y)
    line = f"✅ Train accuracy {train_acc:.4f}"
    if io.test_file.exists():
        test_set = load_dataset(io.test_file)
        if len(test_set):
            line += f", test accuracy {accuracy(cfg.arch, theta, test_set.X, test_set.Y):.4f}"
    print(line)
    return [io.checkpoint_file]


def _load_target(cfg: RunConfig):
    arch, theta, _ = load_checkpoint(_require(cfg.io.checkpoint_file, "checkpoint"))
    if arch != cfg.arch:
        raise InputError(f"checkpoint architecture {arch.layer_dims} does not match the configured {cfg.arch.layer_dims}")
    pool = load_dataset(_require(cfg.io.pool_file, "candidate pool"))
    if pool.d != arch.input_dim or pool.C != arch.num_classes:
        raise InputError(f"pool has d={pool.d}, C={pool.C}; model expects d={arch.input_dim}, C={arch.num_classes}")
    return arch, theta, pool


def run_attack(
    cfg: RunConfig,
    pool: CandidatePool,
    arch,
    theta,
    baseline: str = "kkt",
    threads: int = 1,
    progress: bool = False,
    blocks_cache: Optional[Path] = None,
) -> ScoreReport:
    if baseline == "kkt":
        return AttackPipeline(cfg, threads=threads, progress=progress, blocks_cache=blocks_cache).run(pool, arch, theta)
    if baseline not in BASELINES:
        raise ConfigError(f"unknown attack {baseline!r}; expected one of {', '.join(ATTACKS)}")
    report = BASELINES[baseline](pool, arch, theta)
    report.config = cfg.artifact_echo()
    report.master_seed = cfg.master_seed
    return report


def cmd_attack(
    cfg: RunConfig,
    baseline: str = "kkt",
    blocks_cache: Optional[Path] = None,
    precision: Optional[Precision] = None,
    threads: int = 1,
    progress: bool = False,
) -> List[Path]:
    if precision is not None:
        cfg = cfg.model_copy(deep=True)
        cfg.grad.precision = precision
    out = cfg.io.score_file(baseline)
    _claim([out], cfg.io.force)
    arch, theta, pool = _load_target(cfg)
    report = run_attack(cfg, pool, arch, theta, baseline, threads, progress, blocks_cache)
    save_score_report(out, report)
    print(f"✅ {report.attack_name} scores for {report.pool_size} candidates written to {out}")
    return [out]


def _sidecar_for(score_file: Path) -> Path:
    return Path(score_file).parent / SIDECAR_NAME


def cmd_eval(cfg: RunConfig, score_files: Optional[Sequence[Path]] = None, attack_name: str = "kkt") -> List[Path]:
    """Metrics per score report; several reports (one per seed) are also aggregated.

    Explicit reports are judged against the membership tags next to each of
    them; the default report uses the configured sidecar.
    """
    files = [Path(f) for f in score_files] if score_files else [cfg.io.score_file(attack_name)]
    sidecars = [_sidecar_for(f) for f in files] if score_files else [cfg.io.sidecar_file]
    out = cfg.io.metrics_file(attack_name)
    targets = [out] if len(files) == 1 else [out, *(f.with_name(f.stem + ".metrics.json") for f in files)]
    _claim(targets, cfg.io.force)

    reports: List[MetricsReport] = []
    for f, sidecar in zip(files, sidecars):
        scores = load_score_report(_require(f, "score report"))
        tags = load_sidecar(sidecar)
        membership = CandidatePool.membership_from_tags(tags)
        reports.append(evaluate(scores, membership, cfg.eval))

    if len(reports) == 1:
        save_metrics_report(out, reports[0])
        written = [out]
    else:
        for f, metrics in zip(files, reports):
            save_metrics_report(f.with_name(f.stem + ".metrics.json"), metrics)
        save_metrics_report(out, aggregate_seeds(reports))
        written = targets
    final = aggregate_seeds(reports)
    print(f"✅ {attack_name}: " + ", ".join(
        f"{name} {s.mean:.4f} ± {s.se:.4f}" for name, s in final.summary.items()
    ))
    return written


def cmd_ablate(cfg: RunConfig, threads: int = 1, progress: bool = False) -> List[Path]:
    """One solve, then one score report (and metrics when tags are present) per stage of the ladder."""
    ladder = ablation_configs(cfg.fusion)
    score_files = {stage: cfg.io.score_file(f"kkt-{stage}") for stage in ladder}
    metrics_files = {stage: cfg.io.metrics_file(f"kkt-{stage}") for stage in ladder}
    _claim([*score_files.values(), *metrics_files.values()], cfg.io.force)

    arch, theta, pool = _load_target(cfg)
    pipeline = AttackPipeline(cfg, threads=threads, progress=progress)
    prepared = pipeline.prepare(pool, arch, theta)
    table = pipeline.solve(prepared)
    reports = {}
    for stage, fusion in ladder.items():
        report = pipeline.score(pool, prepared, table, fusion)
        report.attack_name = f"kkt-{stage}"
        save_score_report(score_files[stage], report)
        reports[stage] = report
    written = list(score_files.values())

    if not cfg.io.sidecar_file.exists():
        logger.info("No membership tags at %s; skipping metrics", cfg.io.sidecar_file)
        return written
    membership = CandidatePool.membership_from_tags(load_sidecar(cfg.io.sidecar_file))
    for stage, report in reports.items():
        metrics = evaluate(report, membership, cfg.eval)
        save_metrics_report(metrics_files[stage], metrics)
        written.append(metrics_files[stage])
        print(f"  {stage:<15} " + ", ".join(f"{k} {v:.4f}" for k, v in metrics.metric_values().items()))
    return written


COMMANDS = {
    "scenario": cmd_scenario,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}

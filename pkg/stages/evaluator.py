# stages/evaluator.py

"""ROC, AUC and TPR at fixed false-positive budgets for a score report, and
aggregation over seeds."""

import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from sklearn.metrics import auc, roc_curve

from errors import EvaluationError
from schemas.config_schemas import EvalConfig
from schemas.report_schemas import SENTINEL_SCORE, ZERO_FPR_NOTE, MetricsReport, MetricSummary, ScoreReport, TprAtFpr

logger = logging.getLogger("Evaluator")


class RocResult(NamedTuple):
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _check_truth(scores: np.ndarray, truth: np.ndarray) -> None:
    if scores.shape != truth.shape:
        raise EvaluationError(f"{len(scores)} scores for {len(truth)} membership labels")
    if truth.all() or not truth.any():
        raise EvaluationError("evaluation needs at least one member and one non-member")


def roc_and_auc(scores: Sequence[float], truth: Sequence[bool]) -> RocResult:
    """Full threshold sweep; equal scores cross the threshold together."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    _check_truth(scores, truth)
    fpr, tpr, thresholds = roc_curve(truth, scores, drop_intermediate=False)
    return RocResult(fpr, tpr, thresholds, float(auc(fpr, tpr)))


def tpr_at_fpr(scores: Sequence[float], truth: Sequence[bool], fpr_target: float) -> TprAtFpr:
    """Members are predicted for scores strictly above the threshold that lets
    at most floor(fpr_target * n_nonmembers) non-members through. Sentinel
    scores are always negative."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    _check_truth(scores, truth)
    negatives = np.sort(scores[~truth])[::-1]
    allowed = int(math.floor(fpr_target * len(negatives) + 1e-9))
    threshold = SENTINEL_SCORE if allowed >= len(negatives) else float(negatives[allowed])
    predicted = (scores > threshold) & (scores > SENTINEL_SCORE)
    return TprAtFpr(
        fpr_target=fpr_target,
        achieved_fpr=float(predicted[~truth].mean()),
        tpr=float(predicted[truth].mean()),
        allowed_false_positives=allowed,
        threshold=threshold,
    )


def evaluate(
    report: ScoreReport,
    membership: Dict[int, bool],
    cfg: EvalConfig,
    seed_label: Optional[int] = None,
) -> MetricsReport:
    ids = [r.sample_id for r in report.records]
    missing = [sid for sid in ids if sid not in membership]
    if missing:
        raise EvaluationError(f"{len(missing)} scored samples have no membership tag (first: {missing[0]})")
    notes: List[str] = []
    if cfg.subsample_fraction < 1.0:
        rng = np.random.default_rng(cfg.seed)
        k = max(1, int(round(cfg.subsample_fraction * len(ids))))
        ids = sorted(int(i) for i in rng.choice(sorted(ids), size=k, replace=False))
        notes.append(f"evaluated on a seeded subset of {k} of {len(report.records)} candidates")

    by_id = report.scores_by_id()
    scores = np.array([by_id[sid] for sid in ids])
    truth = np.array([membership[sid] for sid in ids], dtype=bool)
    roc = roc_and_auc(scores, truth)
    tprs = [tpr_at_fpr(scores, truth, t) for t in cfg.fpr_targets]
    if 0.0 in cfg.fpr_targets:
        notes.append(ZERO_FPR_NOTE)

    seeds = [seed_label] if seed_label is not None else ([report.master_seed] if report.master_seed is not None else [])
    metrics = MetricsReport(
        attack_name=report.attack_name,
        auc=roc.auc,
        tpr_at=tprs,
        roc=[(float(f), float(t)) for f, t in zip(roc.fpr, roc.tpr)],
        n_members=int(truth.sum()),
        n_nonmembers=int((~truth).sum()),
        seeds=seeds,
        notes=notes,
        config=report.config,
    )
    metrics.summary = {name: MetricSummary(mean=v, se=0.0, per_seed=[v]) for name, v in metrics.metric_values().items()}
    logger.info(
        "%s: AUC %.4f, %s", report.attack_name, roc.auc,
        ", ".join(f"TPR@{t.fpr_target:g}={t.tpr:.4f}" for t in tprs),
    )
    return metrics


def _mean_se(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return MetricSummary(mean=float(arr.mean()), se=se, per_seed=[float(v) for v in arr])


def aggregate_seeds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and standard error (std with ddof=1 over sqrt(n)) of every metric."""
    if not reports:
        raise EvaluationError("no metrics reports to aggregate")
    first = reports[0]
    targets = [t.fpr_target for t in first.tpr_at]
    for r in reports[1:]:
        if [t.fpr_target for t in r.tpr_at] != targets:
            raise EvaluationError("reports were computed at different fpr targets")

    per_metric: Dict[str, List[float]] = {}
    for r in reports:
        for name, value in r.metric_values().items():
            per_metric.setdefault(name, []).append(value)
    summary = {name: _mean_se(values) for name, values in per_metric.items()}

    tpr_at = [
        TprAtFpr(
            fpr_target=t,
            achieved_fpr=float(np.mean([r.tpr_at[i].achieved_fpr for r in reports])),
            tpr=summary[f"tpr@{t:g}"].mean,
            allowed_false_positives=first.tpr_at[i].allowed_false_positives,
        )
        for i, t in enumerate(targets)
    ]
    seeds = [s for r in reports for s in r.seeds]
    notes = list(dict.fromkeys(n for r in reports for n in r.notes))
    notes.append(f"aggregated over {len(reports)} reports")
    return MetricsReport(
        attack_name=first.attack_name,
        auc=summary["auc"].mean,
        tpr_at=tpr_at,
        n_members=first.n_members,
        n_nonmembers=first.n_nonmembers,
        seeds=seeds,
        summary=summary,
        notes=notes,
        config=first.config,
    )

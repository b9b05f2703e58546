# stages/baselines.py

"""Reference-free comparison attacks. Every score is oriented so that higher
means more member-like."""

import logging
from typing import Callable, Dict, List

import numpy as np
import scipy.stats

from engine.nn_engine import ParamVector, batch_margins, cross_entropy, flip_views, forward_logits, loss_gradient_trace, margin_gradient_trace
from errors import ConfigError
from schemas.config_schemas import ArchSpec
from schemas.report_schemas import BaselineReport, ScoreRecord
from stages.data_lab import CandidatePool

logger = logging.getLogger("Baselines")

GRADIENT_KINDS = {"loss": loss_gradient_trace, "margin": margin_gradient_trace}


def _views(pool: CandidatePool) -> List[np.ndarray]:
    X = pool.X
    if pool.grid_side is None:
        return [X]
    return [X, flip_views(X, pool.grid_side)]


def norm_rank_scores(layer_norms: np.ndarray) -> np.ndarray:
    """(n, L) norms -> per-layer ranks in [0, 1], the smallest norm ranked highest."""
    n = layer_norms.shape[0]
    if n == 1:
        return np.ones_like(layer_norms, dtype=np.float64)
    ranks = np.column_stack([scipy.stats.rankdata(-layer_norms[:, l]) for l in range(layer_norms.shape[1])])
    return (ranks - 1.0) / (n - 1.0)


def _report(name: str, pool: CandidatePool, arch: ArchSpec, theta: ParamVector, scores: np.ndarray) -> BaselineReport:
    margins, predicted = batch_margins(arch, theta, pool.X, pool.Y)
    records = [
        ScoreRecord(
            sample_id=s.id, final_score=float(v), fused=float(v), boosted=float(v), scaled=float(v),
            margin=float(m), predicted_class=int(p),
        )
        for s, v, m, p in zip(pool.samples, scores, margins, predicted)
    ]
    return BaselineReport(attack_name=name, records=records, stages=[name], pool_size=len(pool), n_retained=len(pool))


def gradnorm_score(pool: CandidatePool, arch: ArchSpec, theta: ParamVector, kind: str) -> BaselineReport:
    """Mean over layers and views of the rank of each per-layer gradient norm."""
    if kind not in GRADIENT_KINDS:
        raise ConfigError(f"unknown gradient kind {kind!r}; expected one of {sorted(GRADIENT_KINDS)}")
    Y = pool.Y
    per_view = [norm_rank_scores(GRADIENT_KINDS[kind](arch, theta, X, Y).layer_norms()) for X in _views(pool)]
    scores = np.mean(np.stack(per_view), axis=(0, 2))
    logger.info("GradNorm-%s scored %d candidates over %d views", kind, len(pool), len(per_view))
    return _report(f"gradnorm-{kind}", pool, arch, theta, scores)


def loss_threshold_score(pool: CandidatePool, arch: ArchSpec, theta: ParamVector) -> BaselineReport:
    """Negative cross-entropy of each candidate."""
    logits = np.atleast_2d(forward_logits(arch, theta, pool.X))
    scores = -cross_entropy(logits, pool.Y)
    logger.info("Loss threshold scored %d candidates", len(pool))
    return _report("loss-threshold", pool, arch, theta, scores)


BASELINES: Dict[str, Callable[[CandidatePool, ArchSpec, ParamVector], BaselineReport]] = {
    "gradnorm-loss": lambda pool, arch, theta: gradnorm_score(pool, arch, theta, "loss"),
    "gradnorm-margin": lambda pool, arch, theta: gradnorm_score(pool, arch, theta, "margin"),
    "loss-threshold": loss_threshold_score,
}

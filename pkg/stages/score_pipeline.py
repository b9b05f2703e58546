# stages/score_pipeline.py

"""Cross-block fusion of coefficients into one score per candidate, then the
margin-based post-processing stages."""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.stats

from schemas.config_schemas import FusionConfig
from schemas.report_schemas import SENTINEL_SCORE, ScoreRecord, ScoreReport
from stages.data_lab import CandidatePool
from stages.grad_matrix import ViewSet
from stages.kkt_solver import LambdaTable

logger = logging.getLogger("ScoreFuser")


def trimmed_mean(values: Sequence[float], trim_fraction: float) -> float:
    """Mean after dropping floor(trim_fraction * n) values from each end; median if nothing is left."""
    values = np.asarray(values, dtype=np.float64)
    k = int(np.floor(trim_fraction * len(values)))
    if len(values) - 2 * k <= 0:
        return float(np.median(values))
    return float(scipy.stats.trim_mean(values, trim_fraction))


def snr(values: Sequence[float], epsilon_std: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean() / (values.std() + epsilon_std))


def standardize(values: np.ndarray) -> np.ndarray:
    """z-score across samples; a constant statistic maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std() if len(values) else 0.0
    if std == 0.0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def fuse(table: LambdaTable, cfg: FusionConfig, sample_ids: Optional[Sequence[int]] = None) -> Dict[int, float]:
    """Views are averaged first, then blocks are fused per sample.

    Samples with no surviving block get SENTINEL_SCORE.
    """
    per_sample = table.view_averaged()
    ids = list(sample_ids) if sample_ids is not None else sorted(per_sample)
    scored = [sid for sid in ids if per_sample.get(sid)]
    trims = np.array([trimmed_mean(list(per_sample[sid].values()), cfg.trim_fraction) for sid in scored])
    if cfg.use_snr:
        snrs = np.array([snr(list(per_sample[sid].values()), cfg.epsilon_std) for sid in scored])
        w_trim, w_snr = cfg.fusion_weights
        fused = w_trim * standardize(trims) + w_snr * standardize(snrs)
    else:
        fused = trims
    scores = {sid: SENTINEL_SCORE for sid in ids}
    scores.update({sid: float(f) for sid, f in zip(scored, fused)})
    return scores


def shift_positive(scores: np.ndarray, floor: float) -> np.ndarray:
    """Translate scores so the lowest equals floor; order and spacing are kept."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return scores.copy()
    return scores - scores.min() + floor


def class_boost(
    scores: np.ndarray,
    margins: np.ndarray,
    classes: np.ndarray,
    gamma: float,
    epsilon: float = 1e-8,
) -> np.ndarray:
    """Scale scores up for classes whose mean margin is low."""
    scores = np.asarray(scores, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    classes = np.asarray(classes)
    labels = np.unique(classes)
    if len(labels) < 2:
        return scores.copy()
    class_mean = {c: margins[classes == c].mean() for c in labels}
    hi, lo = max(class_mean.values()), min(class_mean.values())
    factor = np.array([1.0 + gamma * (hi - class_mean[c]) / (hi - lo + epsilon) for c in classes])
    return scores * factor


def sample_boost(scores: np.ndarray, margins: np.ndarray, delta: float) -> np.ndarray:
    """Scale scores up for samples close to the decision boundary."""
    scores = np.asarray(scores, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    s = float(np.median(margins)) if len(margins) else 1.0
    if s <= 0.0:
        s = 1.0
    return scores * (1.0 + delta / (1.0 + margins / s))


def distance_scale(
    scores: np.ndarray,
    margins: np.ndarray,
    classes: np.ndarray,
    top_k: int,
    eta: float,
    epsilon_div: float = 1.0,
) -> np.ndarray:
    """Divide by |margin - m_c|^eta + epsilon_div, m_c the mean margin of the class's top_k scorers."""
    scores = np.asarray(scores, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    classes = np.asarray(classes)
    out = np.empty_like(scores)
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        top = idx[np.argsort(-scores[idx], kind="stable")[:top_k]]
        center = margins[top].mean()
        out[idx] = scores[idx] / (np.abs(margins[idx] - center) ** eta + epsilon_div)
    return out


class ScoreFuser:
    def __init__(self, cfg: FusionConfig):
        self.cfg = cfg

    def run(
        self,
        table: LambdaTable,
        pool: CandidatePool,
        viewsets: Sequence[ViewSet],
        pool_margins: Dict[int, float],
        pool_predicted: Dict[int, int],
    ) -> ScoreReport:
        cfg = self.cfg
        retained = {vs.sample_id: vs for vs in viewsets}
        fused = fuse(table, cfg, [vs.sample_id for vs in viewsets])
        scored = [sid for sid, f in fused.items() if f != SENTINEL_SCORE]

        stages: List[str] = cfg.stages()
        s = np.array([fused[sid] for sid in scored])
        if cfg.boost_class or cfg.boost_sample or cfg.scale_distance:
            # the stages below multiply; factors above 1 must raise a score
            s = shift_positive(s, cfg.score_floor)
        m = np.array([retained[sid].margin for sid in scored])
        c = np.array([retained[sid].label for sid in scored])
        if cfg.boost_class:
            s = class_boost(s, m, c, cfg.gamma, cfg.epsilon_class)
        if cfg.boost_sample:
            s = sample_boost(s, m, cfg.delta)
        boosted = dict(zip(scored, s))
        if cfg.scale_distance:
            s = distance_scale(s, m, c, cfg.top_k, cfg.eta, cfg.epsilon_div)
        scaled = dict(zip(scored, s))

        records = []
        for sample in pool.samples:
            sid = sample.id
            if sid in scaled:
                records.append(ScoreRecord(
                    sample_id=sid, final_score=float(scaled[sid]), fused=fused[sid],
                    boosted=float(boosted[sid]), scaled=float(scaled[sid]),
                    margin=pool_margins[sid], predicted_class=pool_predicted[sid],
                ))
            else:
                records.append(ScoreRecord(
                    sample_id=sid, final_score=SENTINEL_SCORE, margin=pool_margins[sid],
                    predicted_class=pool_predicted[sid], retained=sid in retained,
                ))
        if len(scored) < len(retained):
            logger.warning("%d retained candidates lost every block and carry the sentinel score", len(retained) - len(scored))
        logger.info("Scored %d candidates through stages %s", len(scored), ", ".join(stages))
        return ScoreReport(
            records=records,
            stages=stages,
            pool_size=len(pool),
            n_retained=len(retained),
            diagnostics={"block_gaps": table.gaps, "n_blocks": len(table.block_ids)},
        )

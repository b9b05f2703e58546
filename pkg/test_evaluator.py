# test_evaluator.py

import numpy as np
import pytest

from errors import EvaluationError
from schemas.config_schemas import EvalConfig
from schemas.report_schemas import SENTINEL_SCORE, ZERO_FPR_NOTE, MetricsReport, ScoreRecord, ScoreReport, TprAtFpr
from stages.evaluator import aggregate_seeds, evaluate, roc_and_auc, tpr_at_fpr

SCORES = [0.9, 0.8, 0.2, 0.5, 0.4]
TRUTH = [True, True, True, False, False]


def _pairwise_auc(scores, truth):
    scores, truth = np.asarray(scores), np.asarray(truth)
    pos, neg = scores[truth], scores[~truth]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_and_auc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]).auc == 1.0
    assert roc_and_auc([0.1, 0.2, 0.9, 0.8], [True, True, False, False]).auc == 0.0
    assert roc_and_auc(SCORES, TRUTH).auc == pytest.approx(4 / 6)


def test_auc_matches_pair_counting(rng):
    for _ in range(100):
        n = int(rng.integers(4, 40))
        truth = rng.random(n) < 0.5
        truth[0], truth[1] = True, False
        # rounding produces ties
        scores = np.round(rng.standard_normal(n), 1)
        assert roc_and_auc(scores, truth).auc == pytest.approx(_pairwise_auc(scores, truth), abs=1e-12)


def test_roc_ends_at_the_corners():
    roc = roc_and_auc(SCORES, TRUTH)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)


def test_tpr_examples():
    zero = tpr_at_fpr(SCORES, TRUTH, 0.0)
    assert zero.tpr == pytest.approx(2 / 3)
    assert zero.achieved_fpr == 0.0
    assert zero.threshold == 0.5
    everything = tpr_at_fpr(SCORES, TRUTH, 1.0)
    assert everything.tpr == 1.0
    assert everything.threshold == SENTINEL_SCORE


def test_perfect_separation_at_zero_fpr():
    assert tpr_at_fpr([0.9, 0.8, 0.1, 0.2], [True, True, False, False], 0.0).tpr == 1.0


def test_two_false_positives_at_one_percent():
    nonmembers = [10.0, 9.0, 5.0] + [0.0] * 197
    members = [6.0, 6.5, 7.0, 7.5, 8.0] + [1.0] * 5
    result = tpr_at_fpr(members + nonmembers, [True] * 10 + [False] * 200, 0.01)
    assert result.allowed_false_positives == 2
    assert result.threshold == 5.0
    assert result.tpr == 0.5
    assert result.achieved_fpr == pytest.approx(2 / 200)


def test_tpr_grows_with_the_budget(rng):
    scores = rng.standard_normal(300)
    truth = rng.random(300) < 0.4
    tprs = [tpr_at_fpr(scores, truth, t).tpr for t in (0.0, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)]
    assert tprs == sorted(tprs)
    for t in (0.0, 0.01, 0.05, 0.3):
        assert tpr_at_fpr(scores, truth, t).achieved_fpr <= t + 1e-12


def test_sentinel_scores_are_never_members():
    result = tpr_at_fpr([0.9, SENTINEL_SCORE, 0.5, 0.4], [True, True, False, False], 1.0)
    assert result.tpr == 0.5


def test_degenerate_truth_is_an_evaluation_error():
    with pytest.raises(EvaluationError):
        roc_and_auc([0.1, 0.2], [True, True])
    with pytest.raises(EvaluationError):
        tpr_at_fpr([0.1, 0.2], [False, False], 0.1)


def _report(scores, master_seed=None):
    records = [
        ScoreRecord(sample_id=i, final_score=s, margin=1.0, predicted_class=0) for i, s in enumerate(scores)
    ]
    return ScoreReport(records=records, pool_size=len(records), n_retained=len(records), master_seed=master_seed)


def test_evaluate_single_report():
    metrics = evaluate(_report(SCORES, master_seed=4), dict(enumerate(TRUTH)), EvalConfig())
    assert metrics.auc == pytest.approx(4 / 6)
    assert metrics.seeds == [4]
    assert (metrics.n_members, metrics.n_nonmembers) == (3, 2)
    assert metrics.summary["auc"].se == 0.0
    assert [t.fpr_target for t in metrics.tpr_at] == [0.0, 0.005, 0.01, 0.05]
    assert ZERO_FPR_NOTE in metrics.notes


def test_evaluate_needs_every_tag():
    with pytest.raises(EvaluationError, match="no membership tag"):
        evaluate(_report(SCORES), {0: True, 1: True, 2: False}, EvalConfig())


def test_subsample_is_seeded(rng):
    scores = rng.standard_normal(100)
    membership = {i: i % 2 == 0 for i in range(100)}
    cfg = EvalConfig(subsample_fraction=0.5, seed=9)
    first = evaluate(_report(scores), membership, cfg)
    second = evaluate(_report(scores), membership, cfg)
    assert first.n_members + first.n_nonmembers == 50
    assert first.auc == second.auc
    assert any("subset of 50" in n for n in first.notes)


def _metrics(auc, tpr=0.1, seed=0, targets=(0.0,)):
    tpr_at = [TprAtFpr(fpr_target=t, achieved_fpr=0.0, tpr=tpr, allowed_false_positives=0) for t in targets]
    return MetricsReport(auc=auc, tpr_at=tpr_at, n_members=5, n_nonmembers=5, seeds=[seed])


def test_aggregate_mean_and_standard_error():
    agg = aggregate_seeds([_metrics(1.0, seed=1), _metrics(3.0, seed=2)])
    assert agg.summary["auc"].mean == 2.0
    assert agg.summary["auc"].se == pytest.approx(1.0)
    assert agg.auc == 2.0
    assert agg.seeds == [1, 2]
    assert agg.tpr_at[0].threshold is None


def test_aggregate_of_identical_reports_has_zero_error():
    agg = aggregate_seeds([_metrics(0.7), _metrics(0.7)])
    assert agg.summary["auc"].se == 0.0
    single = aggregate_seeds([_metrics(0.6, tpr=0.2)])
    assert single.summary["tpr@0"].mean == 0.2
    assert single.summary["tpr@0"].se == 0.0


def test_aggregate_rejects_bad_input():
    with pytest.raises(EvaluationError):
        aggregate_seeds([])
    with pytest.raises(EvaluationError):
        aggregate_seeds([_metrics(0.5), _metrics(0.5, targets=(0.01,))])


def test_auc_ignores_strictly_increasing_transforms(rng):
    scores = rng.standard_normal(80)
    truth = rng.random(80) < 0.5
    truth[:2] = [True, False]
    base = roc_and_auc(scores, truth).auc
    for transform in (np.exp, np.arctan, lambda s: 3.0 * s - 7.0):
        assert roc_and_auc(transform(scores), truth).auc == pytest.approx(base, abs=1e-12)

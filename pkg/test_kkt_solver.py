# test_kkt_solver.py

import csv
import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from errors import InputError, SolverError
from schemas.config_schemas import SolverConfig
from stages.grad_matrix import GradientBlock
from stages.kkt_solver import (
    KKTSolver,
    LambdaTable,
    cosine_lr,
    debias_and_zscore,
    exact_solve,
    margin_interval_filter,
    objective,
    solve_block,
)


def _unit_columns(rng, p, m):
    A = rng.standard_normal((p, m))
    return A / np.linalg.norm(A, axis=0)


def test_perfect_reconstruction_has_zero_objective():
    block = GradientBlock.from_arrays(np.eye(3), np.array([0.6, 0.8, 0.0]))
    terms = objective(block, np.array([0.6, 0.8, 0.0]), np.ones(3), alpha=1.0, beta=0.0)
    assert terms.total == pytest.approx(0.0, abs=1e-12)


def test_zero_lambda_uses_the_zero_vector_convention():
    block = GradientBlock.from_arrays(np.eye(2), np.array([1.0, 1.0]))
    terms = objective(block, np.zeros(2), np.array([0.5, 2.0]))
    assert (terms.cosine_term, terms.neg_term, terms.marg_term) == (1.0, 0.0, 0.0)
    assert terms.zero_vector


def test_negative_coefficient_on_flipped_column():
    theta = np.array([0.6, 0.8])
    block = GradientBlock.from_arrays(-theta, theta)
    terms = objective(block, np.array([-1.0]), np.zeros(1), alpha=1.0, beta=0.0)
    assert terms.cosine_term == pytest.approx(0.0, abs=1e-12)
    assert terms.neg_term == 1.0
    assert terms.total == pytest.approx(1.0)


def test_cosine_term_ignores_positive_scale(rng):
    block = GradientBlock.from_arrays(_unit_columns(rng, 8, 3), rng.standard_normal(8))
    lam = np.abs(rng.standard_normal(3))
    a = objective(block, lam, np.zeros(3), beta=0.0)
    b = objective(block, 7.5 * lam, np.zeros(3), beta=0.0)
    assert a.cosine_term == pytest.approx(b.cosine_term, abs=1e-12)


def test_objective_checks_lengths():
    block = GradientBlock.from_arrays(np.eye(2), np.ones(2))
    with pytest.raises(InputError):
        objective(block, np.zeros(3), np.zeros(2))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-15)


def test_orthonormal_block_puts_weight_on_the_matching_column():
    A = np.eye(5)[:, :3]
    block = GradientBlock.from_arrays(A, A[:, 0])
    result = solve_block(block, np.ones(3), SolverConfig())
    lam = result.coefficients
    assert int(np.argmax(lam)) == 0
    assert lam[0] > 0
    assert np.all(np.abs(lam[1:]) < lam[0])


def test_solution_ranks_agree_with_exact_least_squares(rng):
    A = _unit_columns(rng, 50, 20)
    truth = rng.uniform(0.5, 2.0, size=20)
    block = GradientBlock.from_arrays(A, A @ truth)
    cfg = SolverConfig(beta=0.0, max_iters=3000, base_learning_rate=0.05, early_stop_patience=100_000)
    lam = solve_block(block, np.zeros(20), cfg).coefficients
    exact = exact_solve(block)
    assert not exact.rank_deficient
    assert stats.spearmanr(lam, exact.coefficients).correlation >= 0.9


def test_seeded_solve_is_deterministic(rng):
    block = GradientBlock.from_arrays(_unit_columns(rng, 12, 6), rng.standard_normal(12))
    cfg = SolverConfig(max_iters=200, init_scale=0.1, seed=3)
    margins = rng.uniform(0, 2, size=6)
    first = solve_block(block, margins, cfg)
    second = solve_block(block, margins, cfg)
    assert_array_equal(first.coefficients, second.coefficients)


def test_best_iterate_is_returned(tmp_path, rng):
    block = GradientBlock.from_arrays(_unit_columns(rng, 10, 4), rng.standard_normal(10))
    margins = rng.uniform(0, 1, size=4)
    cfg = SolverConfig(max_iters=150, base_learning_rate=0.05)
    trace = tmp_path / "trace.csv"
    result = solve_block(block, margins, cfg, trace_path=trace)

    with open(trace) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iteration", "total", "cosine_term", "neg_term", "marg_term", "lr"]
    assert len(rows) == result.iterations
    assert result.best.total <= min(float(r["total"]) for r in rows)
    recomputed = objective(block, result.coefficients, margins, cfg.alpha, cfg.beta)
    assert recomputed.total == pytest.approx(result.best.total, rel=1e-12)


def test_empty_block_is_a_solver_error():
    block = GradientBlock.from_arrays(np.zeros((3, 0)), np.ones(3), block_id=4)
    with pytest.raises(SolverError, match="block 4"):
        solve_block(block, np.zeros(0), SolverConfig())


def test_debias_then_zscore():
    assert_array_equal(debias_and_zscore(np.array([2.0, 4.0]), np.array([1.0, 2.0])), [0.0, 0.0])
    assert_array_equal(debias_and_zscore(np.full(4, 3.0), np.ones(4)), np.zeros(4))
    raw = np.array([1.0, 5.0, 2.0, -1.0])
    assert_allclose(debias_and_zscore(raw, np.ones(4)), (raw - raw.mean()) / raw.std())


def test_exact_solve_examples():
    assert_allclose(exact_solve(GradientBlock.from_arrays(np.eye(2), np.array([3.0, 5.0]))).coefficients, [3.0, 5.0])
    single = exact_solve(GradientBlock.from_arrays(np.array([1.0, 1.0]), np.array([2.0, 4.0])))
    assert_allclose(single.coefficients, [3.0])


def test_exact_solve_residual_is_orthogonal_to_columns(rng):
    A = rng.standard_normal((10, 4))
    t = rng.standard_normal(10)
    lam = exact_solve(GradientBlock.from_arrays(A, t)).coefficients
    assert np.max(np.abs(A.T @ (A @ lam - t))) <= 1e-8


def test_rank_deficient_block_gives_minimum_norm_solution():
    a = np.array([1.0, 2.0, 2.0])
    solution = exact_solve(GradientBlock.from_arrays(np.stack([a, a], axis=1), np.array([3.0, 0.0, 1.0])))
    assert solution.rank_deficient
    assert_allclose(solution.coefficients, np.full(2, (a @ [3.0, 0.0, 1.0]) / (2 * a @ a)))


def test_exact_solve_needs_a_tall_block():
    with pytest.raises(InputError):
        exact_solve(GradientBlock.from_arrays(np.ones((2, 3)), np.ones(2)))


def test_interval_filter_limits():
    ids = list(range(9))
    margins = [1.0] * 5 + [2.0, 3.0, 5.0, 0.7]
    classes = [0] * 8 + [1]
    assert margin_interval_filter(ids, margins, classes, math.inf) == ids
    # the lone class-1 sample passes through
    assert margin_interval_filter(ids, margins, classes, 0.0) == [0, 1, 2, 3, 4, 8]


def test_interval_filter_keeps_the_concentrated_members(rng):
    members = rng.normal(0.5, 0.05, size=200)
    outsiders = rng.normal(3.0, 0.3, size=100)
    margins = np.concatenate([members, outsiders])
    kept = set(margin_interval_filter(range(300), margins, np.zeros(300, dtype=int), 1.0))
    assert len(kept & set(range(200))) >= 180


def test_interval_filter_rejects_negative_width():
    with pytest.raises(InputError):
        margin_interval_filter([0, 1], [0.1, 0.2], [0, 0], -1.0)


def test_view_average_comes_before_blocks():
    table = LambdaTable()
    base = GradientBlock.from_arrays(np.eye(3), np.ones(3), block_id=2)
    block = dataclasses.replace(base, column_index=[(5, 0), (5, 1), (6, 0)])
    table.add_block(block, np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.0, 1.0]))
    assert table.view_averaged() == {5: {2: -0.5}, 6: {2: 1.0}}
    assert table.block_ids == [2]
    assert table.sample_ids == [5, 6]


def _blocks(rng, n_blocks=4, p=10, m=5):
    return {
        b: GradientBlock.from_arrays(_unit_columns(rng, p, m), rng.standard_normal(p), block_id=b)
        for b in range(n_blocks)
    }


def test_solver_output_does_not_depend_on_thread_count(rng):
    blocks = _blocks(rng)
    margins = {i: 0.5 + i for i in range(5)}
    cfg = SolverConfig(max_iters=100)
    one = KKTSolver(cfg, threads=1).solve_all(blocks.__getitem__, list(blocks), margins)
    four = KKTSolver(cfg, threads=4).solve_all(blocks.__getitem__, list(blocks), margins)
    assert one.zscored == four.zscored
    assert one.raw == four.raw


def test_failed_block_is_recorded_as_a_gap(rng, tmp_path):
    blocks = _blocks(rng, n_blocks=3)

    def source(block_id):
        if block_id == 1:
            raise SolverError(block_id, "theta block is constant")
        return blocks[block_id]

    cfg = SolverConfig(max_iters=50, trace_dir=str(tmp_path / "traces"))
    table = KKTSolver(cfg, threads=2).solve_all(source, [0, 1, 2], {i: 1.0 for i in range(5)})
    assert table.block_ids == [0, 2]
    assert table.gaps == [{"block_id": 1, "reason": "block 1: theta block is constant"}]
    assert (tmp_path / "traces" / "solver_block_0000.csv").exists()
    assert not (tmp_path / "traces" / "solver_block_0001.csv").exists()

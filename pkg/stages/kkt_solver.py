# stages/kkt_solver.py

"""Per-block coefficient fitting: reconstruct the target parameters as a
combination of candidate margin gradients, then standardize the coefficients.

    L(lambda) = 1 - cos(A lambda, theta_b) + alpha * sum(max(0, -lambda)^2) + beta * sum(lambda^2 * margin)
"""

import csv
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from tqdm import tqdm

from errors import InputError, SolverError
from schemas.config_schemas import SolverConfig
from stages.grad_matrix import GradientBlock

logger = logging.getLogger("KKTSolver")

RIDGE = 1e-10
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ObjectiveTerms(NamedTuple):
    total: float
    cosine_term: float
    neg_term: float
    marg_term: float
    zero_vector: bool = False


def _evaluate(
    A: np.ndarray,
    theta: np.ndarray,
    lam: np.ndarray,
    margins: np.ndarray,
    alpha: float,
    beta: float,
) -> Tuple[ObjectiveTerms, np.ndarray]:
    """Objective terms and their gradient w.r.t. lambda."""
    v = A @ lam
    v_norm = np.linalg.norm(v)
    t_norm = np.linalg.norm(theta)
    t_hat = theta / t_norm
    if v_norm == 0.0:
        # zero reconstruction: similarity 0, descent direction along A^T theta
        cosine_term, grad_cos = 1.0, -(A.T @ t_hat)
        zero = True
    else:
        cos = float(v @ t_hat) / v_norm
        cosine_term = 1.0 - cos
        grad_cos = -(A.T @ (t_hat / v_norm - cos * v / v_norm ** 2))
        zero = False
    neg = np.maximum(0.0, -lam)
    neg_term = float(neg @ neg)
    marg_term = float(np.sum(lam * lam * margins))
    total = cosine_term + alpha * neg_term + beta * marg_term
    grad = grad_cos - 2.0 * alpha * neg + 2.0 * beta * lam * margins
    return ObjectiveTerms(total, cosine_term, neg_term, marg_term, zero), np.asarray(grad, dtype=np.float64)


def objective(
    block: GradientBlock,
    lam: np.ndarray,
    margins: np.ndarray,
    alpha: float = 1.0,
    beta: float = 0.1,
) -> ObjectiveTerms:
    lam = np.asarray(lam, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    if lam.shape != (block.n_columns,) or margins.shape != (block.n_columns,):
        raise InputError(f"block {block.block_id}: expected {block.n_columns} coefficients and margins")
    terms, _ = _evaluate(block.columns, block.theta_block, lam, margins, alpha, beta)
    return terms


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing from base at step 0 to 0 at step total."""
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class SolveResult:
    block_id: int
    coefficients: np.ndarray
    best: ObjectiveTerms
    iterations: int
    stopped_early: bool


def solve_block(
    block: GradientBlock,
    margins: np.ndarray,
    cfg: SolverConfig,
    trace_path: Optional[Path] = None,
) -> SolveResult:
    """AdamW with decoupled decay, cosine step size, global-norm clipping and
    early stopping; returns the best iterate seen."""
    M = block.n_columns
    margins = np.asarray(margins, dtype=np.float64)
    if margins.shape != (M,):
        raise InputError(f"block {block.block_id}: {margins.shape[0]} margins for {M} columns")
    if M == 0:
        raise SolverError(block.block_id, "no columns left after dropping degenerate gradients")

    A = np.asarray(block.columns, dtype=np.float64)
    theta = np.asarray(block.theta_block, dtype=np.float64)
    if cfg.init_scale > 0:
        lam = cfg.init_scale * np.random.default_rng(cfg.seed).standard_normal(M)
    else:
        lam = np.zeros(M)
    m = np.zeros(M)
    v = np.zeros(M)
    b1, b2 = ADAM_BETAS

    rows = []
    best_terms, best_lam = None, lam.copy()
    stall, stopped_early, step = 0, False, 0
    for step in range(1, cfg.max_iters + 1):
        terms, grad = _evaluate(A, theta, lam, margins, cfg.alpha, cfg.beta)
        if not (math.isfinite(terms.total) and np.all(np.isfinite(grad))):
            raise SolverError(block.block_id, f"non-finite objective at iteration {step}")
        lr = cosine_lr(cfg.base_learning_rate, step - 1, cfg.max_iters)
        if trace_path is not None:
            rows.append((step - 1, terms.total, terms.cosine_term, terms.neg_term, terms.marg_term, lr))

        if best_terms is None or terms.total < best_terms.total:
            improved = best_terms is None or best_terms.total - terms.total > cfg.early_stop_tol
            best_terms, best_lam = terms, lam.copy()
            stall = 0 if improved else stall + 1
        else:
            stall += 1
        if stall >= cfg.early_stop_patience:
            stopped_early = True
            break

        g_norm = np.linalg.norm(grad)
        if g_norm > cfg.clip_norm:
            grad = grad * (cfg.clip_norm / g_norm)
        lam = lam * (1.0 - lr * cfg.weight_decay)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        lam = lam - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    if not stopped_early:
        terms, _ = _evaluate(A, theta, lam, margins, cfg.alpha, cfg.beta)
        if math.isfinite(terms.total) and terms.total < best_terms.total:
            best_terms, best_lam = terms, lam.copy()

    if trace_path is not None:
        write_trace(trace_path, rows)
    return SolveResult(block.block_id, best_lam, best_terms, step, stopped_early)


def write_trace(path: Path, rows: Iterable[Sequence[float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "total", "cosine_term", "neg_term", "marg_term", "lr"])
        for row in rows:
            writer.writerow([row[0], *(repr(float(x)) for x in row[1:])])


def debias_and_zscore(raw: np.ndarray, column_norms: np.ndarray) -> np.ndarray:
    """Divide by the raw gradient norm, then z-score over the block (population std; std 0 gives zeros)."""
    raw = np.asarray(raw, dtype=np.float64)
    column_norms = np.asarray(column_norms, dtype=np.float64)
    if raw.shape != column_norms.shape:
        raise InputError("coefficients and column norms differ in length")
    debiased = raw / column_norms
    std = debiased.std()
    if std == 0.0:
        return np.zeros_like(debiased)
    return (debiased - debiased.mean()) / std


@dataclass
class ExactSolution:
    coefficients: np.ndarray
    rank_deficient: bool
    residual_norm: float


def exact_solve(block: GradientBlock) -> ExactSolution:
    """Least squares ||A lambda - theta_b|| via regularized normal equations;
    rank-deficient blocks fall back to the minimum-norm solution."""
    A = np.asarray(block.columns, dtype=np.float64)
    t = np.asarray(block.theta_block, dtype=np.float64)
    p, M = A.shape
    if M > p:
        raise InputError(f"block {block.block_id}: {M} columns exceed {p} rows")
    rank_deficient = np.linalg.matrix_rank(A) < M
    if rank_deficient:
        lam = scipy.linalg.lstsq(A, t)[0]
        logger.debug("Block %d is rank deficient; using the minimum-norm solution", block.block_id)
    else:
        gram = A.T @ A + RIDGE * np.eye(M)
        lam = scipy.linalg.solve(gram, A.T @ t, assume_a="pos")
    return ExactSolution(lam, bool(rank_deficient), float(np.linalg.norm(A @ lam - t)))


def margin_interval_filter(
    sample_ids: Sequence[int],
    margins: Sequence[float],
    classes: Sequence[int],
    width: float,
    bins: int = 64,
) -> List[int]:
    """Ids whose margin lies within width * IQR of their class's histogram mode.

    The tolerance never drops below half a bin, so width 0 keeps the modal bin.
    Single-sample classes pass through.
    """
    ids = np.asarray(sample_ids)
    margins = np.asarray(margins, dtype=np.float64)
    classes = np.asarray(classes)
    if width < 0:
        raise InputError("interval width must be nonnegative")
    if math.isinf(width):
        return [int(i) for i in ids]
    keep = np.zeros(len(ids), dtype=bool)
    for c in np.unique(classes):
        members = np.flatnonzero(classes == c)
        m = margins[members]
        if len(m) == 1 or m.min() == m.max():
            keep[members] = True
            continue
        counts, edges = np.histogram(m, bins=bins)
        peak = int(np.argmax(counts))
        mode = 0.5 * (edges[peak] + edges[peak + 1])
        q25, q75 = np.percentile(m, [25, 75])
        tolerance = max(width * (q75 - q25), 0.5 * (edges[1] - edges[0]))
        keep[members] = np.abs(m - mode) <= tolerance
    return [int(i) for i in ids[keep]]


@dataclass
class LambdaTable:
    """Raw and z-scored coefficients per (sample_id, view_id, block_id)."""

    raw: Dict[Tuple[int, int, int], float] = field(default_factory=dict)
    zscored: Dict[Tuple[int, int, int], float] = field(default_factory=dict)
    gaps: List[Dict[str, object]] = field(default_factory=list)
    dropped: List[Dict[str, object]] = field(default_factory=list)

    def add_block(self, block: GradientBlock, raw: np.ndarray, zscored: np.ndarray) -> None:
        for (sid, view), r, z in zip(block.column_index, raw, zscored):
            self.raw[(sid, view, block.block_id)] = float(r)
            self.zscored[(sid, view, block.block_id)] = float(z)
        self.dropped.extend({**d, "block_id": block.block_id} for d in block.dropped)

    @property
    def block_ids(self) -> List[int]:
        return sorted({b for _, _, b in self.zscored})

    @property
    def sample_ids(self) -> List[int]:
        return sorted({s for s, _, _ in self.zscored})

    def view_averaged(self) -> Dict[int, Dict[int, float]]:
        """sample_id -> block_id -> z-scored coefficient averaged over views."""
        grouped: Dict[int, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
        for (sid, _, b), z in sorted(self.zscored.items()):
            grouped[sid][b].append(z)
        return {sid: {b: float(np.mean(zs)) for b, zs in sorted(blocks.items())} for sid, blocks in grouped.items()}


class KKTSolver:
    def __init__(self, cfg: SolverConfig, threads: int = 1, progress: bool = False):
        self.cfg = cfg
        self.threads = max(1, threads)
        self.progress = progress

    def _trace_path(self, block_id: int) -> Optional[Path]:
        if self.cfg.trace_dir is None:
            return None
        return Path(self.cfg.trace_dir) / f"solver_block_{block_id:04d}.csv"

    def _run_one(
        self,
        block_source: Callable[[int], GradientBlock],
        block_id: int,
        margin_by_id: Dict[int, float],
    ) -> Tuple[int, Optional[GradientBlock], Optional[SolveResult], Optional[str]]:
        try:
            block = block_source(block_id)
            result = solve_block(block, block.column_margins(margin_by_id), self.cfg, self._trace_path(block_id))
            return block_id, block, result, None
        except SolverError as e:
            return block_id, None, None, str(e)

    def solve_all(
        self,
        block_source: Callable[[int], GradientBlock],
        block_ids: Sequence[int],
        margin_by_id: Dict[int, float],
    ) -> LambdaTable:
        """Solve every block; failed blocks are recorded as gaps and skipped.

        Results are merged in block order, so the table does not depend on the
        thread count.
        """
        def run(block_id: int):
            return self._run_one(block_source, block_id, margin_by_id)

        if self.threads == 1:
            outcomes = [run(b) for b in tqdm(block_ids, desc="blocks", disable=not self.progress, leave=False)]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                outcomes = list(tqdm(pool.map(run, block_ids), total=len(block_ids), desc="blocks",
                                     disable=not self.progress, leave=False))

        table = LambdaTable()
        for block_id, block, result, error in sorted(outcomes, key=lambda o: o[0]):
            if error is not None:
                logger.warning("Skipping %s", error)
                table.gaps.append({"block_id": block_id, "reason": error})
                continue
            table.add_block(block, result.coefficients, debias_and_zscore(result.coefficients, block.column_norms))
            logger.debug(
                "Block %d: %d columns, objective %.6g after %d iterations",
                block_id, block.n_columns, result.best.total, result.iterations,
            )
        logger.info("Solved %d of %d blocks", len(block_ids) - len(table.gaps), len(block_ids))
        return table

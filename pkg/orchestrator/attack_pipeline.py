# orchestrator/attack_pipeline.py

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from engine.nn_engine import ParamVector, batch_margins
from errors import NoRetainedCandidatesError
from schemas.config_schemas import ArchSpec, FusionConfig, RunConfig
from schemas.report_schemas import ScoreReport
from stages.data_lab import CandidatePool
from stages.grad_matrix import GradientBlock, GradientMatrixBuilder, ViewSet, make_block_layout, prefilter, select_layers
from stages.kkt_solver import KKTSolver, LambdaTable, margin_interval_filter
from stages.score_pipeline import ScoreFuser
from storage.block_cache import block_path, cache_key, load_block, save_block

logger = logging.getLogger("AttackPipeline")

ABLATION_LADDER = ("trimmed_mean", "fusion", "class_boost", "sample_boost", "distance_scale")


def ablation_configs(base: FusionConfig) -> Dict[str, FusionConfig]:
    """Fusion configs that switch the stages on one at a time."""
    flags = {"use_snr": False, "boost_class": False, "boost_sample": False, "scale_distance": False}
    switches = {"fusion": "use_snr", "class_boost": "boost_class", "sample_boost": "boost_sample", "distance_scale": "scale_distance"}
    ladder = {}
    for stage in ABLATION_LADDER:
        if stage in switches:
            flags[switches[stage]] = True
        ladder[stage] = base.model_copy(update=dict(flags))
    return ladder


@dataclass
class PreparedAttack:
    viewsets: List[ViewSet]
    builder: GradientMatrixBuilder
    pool_margins: Dict[int, float]
    pool_predicted: Dict[int, int]
    n_prefiltered: int


class AttackPipeline:
    """prefilter -> blocks -> per-block solve -> fusion and post-processing.

    Only the untagged pool, the architecture and the parameters flow in.
    """

    def __init__(self, cfg: RunConfig, threads: int = 1, progress: bool = False, blocks_cache: Optional[Path] = None):
        self.cfg = cfg
        self.solver = KKTSolver(cfg.solver, threads=threads, progress=progress)
        self.blocks_cache = Path(blocks_cache) if blocks_cache is not None else None

    def prepare(self, pool: CandidatePool, arch: ArchSpec, theta: ParamVector) -> PreparedAttack:
        logger.info("Step 1: Filter misclassified candidates")
        viewsets = prefilter(pool, arch, theta)
        n_prefiltered = len(viewsets)

        width = self.cfg.solver.interval_filter_width
        if width is not None:
            kept = set(margin_interval_filter(
                [vs.sample_id for vs in viewsets], [vs.margin for vs in viewsets], [vs.label for vs in viewsets], width,
            ))
            viewsets = [vs for vs in viewsets if vs.sample_id in kept]
            logger.info("Margin interval filter kept %d of %d candidates", len(viewsets), n_prefiltered)
            if not viewsets:
                raise NoRetainedCandidatesError("no candidates left after the margin interval filter")

        logger.info("Step 2: Partition parameters into blocks")
        layout = make_block_layout(
            arch, select_layers(arch, self.cfg.grad.last_k_layers), self.cfg.grad.block_size_target,
        )
        builder = GradientMatrixBuilder(arch, theta, viewsets, layout, self.cfg.grad.precision)

        margins, predicted = batch_margins(arch, theta, pool.X, pool.Y)
        return PreparedAttack(
            viewsets=viewsets,
            builder=builder,
            pool_margins={s.id: float(m) for s, m in zip(pool.samples, margins)},
            pool_predicted={s.id: int(p) for s, p in zip(pool.samples, predicted)},
            n_prefiltered=n_prefiltered,
        )

    def _block_source(self, prepared: PreparedAttack):
        builder = prepared.builder
        if self.blocks_cache is None:
            return builder.build
        key = cache_key(builder.theta, builder.layout, builder.viewsets, builder.precision)

        def source(block_id: int) -> GradientBlock:
            cached = load_block(block_path(self.blocks_cache, block_id), key)
            if cached is not None:
                return cached
            block = builder.build(block_id)
            save_block(self.blocks_cache, block, key)
            return block

        return source

    def solve(self, prepared: PreparedAttack) -> LambdaTable:
        block_ids = prepared.builder.block_ids
        logger.info("Step 3: Solve coefficients over %d blocks", len(block_ids))
        return self.solver.solve_all(self._block_source(prepared), block_ids, prepared.builder.margin_by_id())

    def score(self, pool: CandidatePool, prepared: PreparedAttack, table: LambdaTable, fusion: Optional[FusionConfig] = None) -> ScoreReport:
        logger.info("Step 4: Fuse coefficients and post-process scores")
        report = ScoreFuser(fusion or self.cfg.fusion).run(
            table, pool, prepared.viewsets, prepared.pool_margins, prepared.pool_predicted,
        )
        report.attack_name = "kkt"
        report.config = self.cfg.artifact_echo()
        report.master_seed = self.cfg.master_seed
        report.diagnostics.update({
            "n_prefiltered": prepared.n_prefiltered,
            "n_optimized": len(prepared.viewsets),
            "dropped_columns": table.dropped,
            "block_sizes": [b.size for b in prepared.builder.layout.blocks],
        })
        return report

    def run(self, pool: CandidatePool, arch: ArchSpec, theta: ParamVector) -> ScoreReport:
        prepared = self.prepare(pool, arch, theta)
        table = self.solve(prepared)
        report = self.score(pool, prepared, table)
        logger.info("✅ Scored %d candidates (%d retained)", report.pool_size, report.n_retained)
        return report

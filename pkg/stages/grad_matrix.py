# stages/grad_matrix.py

"""Block-partitioned margin-gradient matrices over the retained candidates.

Each column of a block is the margin gradient of one view of one retained
candidate, restricted to the block's parameters, centered by the per-row mean
over columns and scaled to unit norm. The target parameter sub-vector is
centered by its own mean and scaled to unit norm.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine.nn_engine import GradientTrace, ParamVector, batch_margins, flip_views, make_layout, margin_gradient_trace
from errors import ConfigError, NoRetainedCandidatesError, SolverError
from schemas.config_schemas import ArchSpec, Precision
from stages.data_lab import CandidatePool

logger = logging.getLogger("GradientMatrixBuilder")


@dataclass(frozen=True)
class ViewSet:
    sample_id: int
    label: int
    views: Tuple[np.ndarray, ...]   # original first, then the flip when image-shaped
    margin: float                   # on the original view
    predicted_class: int

    def __post_init__(self) -> None:
        if not 1 <= len(self.views) <= 2:
            raise ValueError(f"sample {self.sample_id}: a view set holds 1 or 2 views, got {len(self.views)}")


def prefilter(pool: CandidatePool, arch: ArchSpec, theta: ParamVector) -> List[ViewSet]:
    """Keep the candidates with margin >= 0 on their original view, in pool order."""
    if len(pool) == 0:
        raise NoRetainedCandidatesError()
    margins, predicted = batch_margins(arch, theta, pool.X, pool.Y)
    side = pool.grid_side
    retained = []
    for s, m, p in zip(pool.samples, margins, predicted):
        if m < 0:
            continue
        views = (s.x,) if side is None else (s.x, flip_views(s.x[None, :], side)[0])
        retained.append(ViewSet(sample_id=s.id, label=s.y, views=views, margin=float(m), predicted_class=int(p)))
    if not retained:
        raise NoRetainedCandidatesError()
    logger.info("Retained %d of %d candidates (margin >= 0)", len(retained), len(pool))
    return retained


@dataclass(frozen=True)
class RowRange:
    """Rows [row_start, row_stop) of one layer; flat parameter indices [start, stop)."""

    layer: int
    row_start: int
    row_stop: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class Block:
    block_id: int
    ranges: Tuple[RowRange, ...]

    @property
    def size(self) -> int:
        return sum(r.size for r in self.ranges)

    @property
    def layers(self) -> List[int]:
        return sorted({r.layer for r in self.ranges})

    def indices(self) -> np.ndarray:
        return np.concatenate([np.arange(r.start, r.stop) for r in self.ranges])


@dataclass(frozen=True)
class BlockLayout:
    blocks: Tuple[Block, ...]
    block_size_target: int
    selected_layers: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, block_id: int) -> Block:
        return self.blocks[block_id]

    def selected_indices(self) -> np.ndarray:
        return np.concatenate([b.indices() for b in self.blocks])


def select_layers(arch: ArchSpec, last_k: Optional[int] = None) -> List[int]:
    if last_k is None:
        return list(range(arch.depth))
    return list(range(max(0, arch.depth - last_k), arch.depth))


def make_block_layout(
    arch: ArchSpec,
    selected_layers: Optional[Sequence[int]] = None,
    block_size_target: int = 4096,
) -> BlockLayout:
    """Greedy packing of whole weight rows into blocks of at most block_size_target parameters.

    Layers are visited in order and a block may continue into the next layer.
    """
    slots = make_layout(arch)
    layers = sorted(set(range(arch.depth) if selected_layers is None else selected_layers))
    if not layers or layers[0] < 0 or layers[-1] >= arch.depth:
        raise ConfigError(f"selected layers {list(selected_layers or [])} are not a non-empty subset of 0..{arch.depth - 1}")
    if block_size_target < 1:
        raise ConfigError("block_size_target must be positive")
    widest = max(slots[l].shape[1] for l in layers)
    if widest > block_size_target:
        raise ConfigError(f"a weight row of {widest} parameters exceeds block_size_target {block_size_target}")

    blocks: List[Block] = []
    current: List[RowRange] = []
    filled = 0
    for l in layers:
        rows, fan_in = slots[l].shape
        row = 0
        while row < rows:
            if filled + fan_in > block_size_target:
                blocks.append(Block(block_id=len(blocks), ranges=tuple(current)))
                current, filled = [], 0
            take = min(rows - row, (block_size_target - filled) // fan_in)
            start = slots[l].offset + row * fan_in
            current.append(RowRange(layer=l, row_start=row, row_stop=row + take, start=start, stop=start + take * fan_in))
            filled += take * fan_in
            row += take
    if current:
        blocks.append(Block(block_id=len(blocks), ranges=tuple(current)))
    return BlockLayout(blocks=tuple(blocks), block_size_target=block_size_target, selected_layers=tuple(layers))


@dataclass
class GradientBlock:
    block_id: int
    columns: np.ndarray                      # (p_b, M_v)
    column_norms: np.ndarray                 # raw gradient norms, before centering
    center: np.ndarray                       # (p_b,) per-row mean removed from the columns
    theta_block: np.ndarray                  # (p_b,) unit norm
    column_index: List[Tuple[int, int]]      # (sample_id, view_id) per column
    dropped: List[Dict[str, object]] = field(default_factory=list)
    precision: Precision = Precision.F64

    @property
    def n_columns(self) -> int:
        return self.columns.shape[1]

    @property
    def size(self) -> int:
        return self.columns.shape[0]

    @classmethod
    def from_arrays(cls, columns: np.ndarray, theta_block: np.ndarray, block_id: int = 0) -> "GradientBlock":
        """Wrap an already-prepared matrix; column norms are taken as 1."""
        columns = np.asarray(columns, dtype=np.float64)
        if columns.ndim == 1:
            columns = columns[:, None]
        return cls(
            block_id=block_id,
            columns=columns,
            column_norms=np.ones(columns.shape[1]),
            center=np.zeros(columns.shape[0]),
            theta_block=np.asarray(theta_block, dtype=np.float64),
            column_index=[(i, 0) for i in range(columns.shape[1])],
        )

    def column_margins(self, margin_by_id: Dict[int, float]) -> np.ndarray:
        return np.array([margin_by_id[sid] for sid, _ in self.column_index], dtype=np.float64)


def normalize_block(
    block_id: int,
    raw_columns: np.ndarray,
    raw_theta: np.ndarray,
    column_index: Sequence[Tuple[int, int]],
    precision: Precision = Precision.F64,
) -> GradientBlock:
    """Center, normalize and drop degenerate columns of a raw (p_b, M) gradient slice."""
    raw_columns = np.asarray(raw_columns, dtype=np.float64)
    raw_norms = np.linalg.norm(raw_columns, axis=0)
    dropped = [
        {"sample_id": column_index[j][0], "view_id": column_index[j][1], "reason": "zero gradient"}
        for j in np.flatnonzero(raw_norms == 0.0)
    ]
    keep = raw_norms > 0.0
    A = raw_columns[:, keep]
    norms = raw_norms[keep]
    index = [c for c, k in zip(column_index, keep) if k]

    # a single column has no spread across columns to remove
    center = A.mean(axis=1) if A.shape[1] > 1 else np.zeros(A.shape[0])
    A = A - center[:, None]
    centered_norms = np.linalg.norm(A, axis=0)
    flat = centered_norms == 0.0
    if flat.any():
        dropped.extend(
            {"sample_id": index[j][0], "view_id": index[j][1], "reason": "zero after centering"}
            for j in np.flatnonzero(flat)
        )
        A, norms, centered_norms = A[:, ~flat], norms[~flat], centered_norms[~flat]
        index = [c for c, f in zip(index, flat) if not f]
    A = A / centered_norms

    t = np.asarray(raw_theta, dtype=np.float64)
    t = t - t.mean()
    t_norm = np.linalg.norm(t)
    if t_norm == 0.0:
        raise SolverError(block_id, "target parameters are constant over the block")
    t = t / t_norm

    dtype = np.float32 if precision == Precision.F32 else np.float64
    return GradientBlock(
        block_id=block_id,
        columns=A.astype(dtype),
        column_norms=norms,
        center=center,
        theta_block=t.astype(dtype),
        column_index=index,
        dropped=dropped,
        precision=precision,
    )


def view_trace(viewsets: Sequence[ViewSet], arch: ArchSpec, theta: ParamVector) -> Tuple[GradientTrace, List[Tuple[int, int]]]:
    """Factored margin gradients of every view, one row per (sample_id, view_id)."""
    X, Y, index = [], [], []
    for vs in viewsets:
        for view_id, x in enumerate(vs.views):
            X.append(x)
            Y.append(vs.label)
            index.append((vs.sample_id, view_id))
    return margin_gradient_trace(arch, theta, np.stack(X), np.asarray(Y)), index


def assemble_block(
    layout: BlockLayout,
    block_id: int,
    viewsets: Sequence[ViewSet],
    arch: ArchSpec,
    theta: ParamVector,
    precision: Precision = Precision.F64,
    trace: Optional[Tuple[GradientTrace, List[Tuple[int, int]]]] = None,
) -> GradientBlock:
    if not viewsets:
        raise NoRetainedCandidatesError()
    grads, index = trace if trace is not None else view_trace(viewsets, arch, theta)
    block = layout[block_id]
    raw = np.concatenate([grads.layer_rows(r.layer, r.row_start, r.row_stop) for r in block.ranges], axis=1).T
    return normalize_block(block_id, raw, theta.values[block.indices()], index, precision)


class GradientMatrixBuilder:
    """Assembles blocks for one (arch, theta, retained set); the factored trace is computed once and shared."""

    def __init__(
        self,
        arch: ArchSpec,
        theta: ParamVector,
        viewsets: Sequence[ViewSet],
        layout: BlockLayout,
        precision: Precision = Precision.F64,
    ):
        self.arch = arch
        self.theta = theta
        self.viewsets = list(viewsets)
        self.layout = layout
        self.precision = precision
        self._trace = view_trace(self.viewsets, arch, theta)
        logger.info(
            "Prepared %d views of %d candidates over %d blocks",
            len(self._trace[1]), len(self.viewsets), len(layout),
        )

    @property
    def block_ids(self) -> List[int]:
        return [b.block_id for b in self.layout.blocks]

    def margin_by_id(self) -> Dict[int, float]:
        return {vs.sample_id: vs.margin for vs in self.viewsets}

    def build(self, block_id: int) -> GradientBlock:
        block = assemble_block(self.layout, block_id, self.viewsets, self.arch, self.theta, self.precision, self._trace)
        if block.dropped:
            logger.debug("Block %d dropped %d columns", block_id, len(block.dropped))
        return block

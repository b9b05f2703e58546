# storage/block_cache.py

"""One file per assembled gradient block, reusable by later attack runs on the same model and pool."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from engine.nn_engine import ParamVector
from errors import ArtifactFormatError
from schemas.config_schemas import Precision
from stages.grad_matrix import BlockLayout, GradientBlock, ViewSet
from storage.headers import read_header, write_header

logger = logging.getLogger("BlockCache")

MAGIC = "kkt-audit block v1"


def cache_key(theta: ParamVector, layout: BlockLayout, viewsets: Sequence[ViewSet], precision: Precision) -> str:
    """Fingerprint of everything a cached block depends on."""
    h = hashlib.sha256()
    h.update(theta.values.astype("<f8").tobytes())
    h.update(repr([[(r.layer, r.row_start, r.row_stop) for r in b.ranges] for b in layout.blocks]).encode())
    for vs in viewsets:
        h.update(f"{vs.sample_id}:{vs.label}:{len(vs.views)};".encode())
        for x in vs.views:
            h.update(np.asarray(x, dtype="<f8").tobytes())
    h.update(precision.value.encode())
    return h.hexdigest()


def block_path(cache_dir: Path, block_id: int) -> Path:
    return Path(cache_dir) / f"block_{block_id:04d}.blk"


def _dtype(precision: Precision) -> str:
    return "<f4" if precision == Precision.F32 else "<f8"


def save_block(cache_dir: Path, block: GradientBlock, key: str) -> Path:
    path = block_path(cache_dir, block.block_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = {
        "block_id": str(block.block_id),
        "p_b": str(block.size),
        "M_v": str(block.n_columns),
        "precision": block.precision.value,
        "column_index": ",".join(f"{sid}:{view}" for sid, view in block.column_index),
        "dropped": json.dumps(block.dropped, sort_keys=True, separators=(",", ":")),
        "key": key,
    }
    dtype = _dtype(block.precision)
    with open(path, "wb") as fh:
        write_header(fh, MAGIC, fields)
        fh.write(np.asarray(block.columns, dtype=dtype).tobytes(order="F"))
        fh.write(np.asarray(block.column_norms, dtype="<f8").tobytes())
        fh.write(np.asarray(block.center, dtype="<f8").tobytes())
        fh.write(np.asarray(block.theta_block, dtype=dtype).tobytes())
    return path


def load_block(path: Path, key: Optional[str] = None) -> Optional[GradientBlock]:
    """The cached block, or None when the file is missing or was built for another key."""
    path = Path(path)
    if not path.exists():
        return None
    with open(path, "rb") as fh:
        header = read_header(fh, MAGIC)
        payload = fh.read()
    if key is not None and header.get("key") != key:
        logger.info("Ignoring stale cache file %s", path)
        return None
    p, M = int(header["p_b"]), int(header["M_v"])
    precision = Precision(header["precision"])
    dtype = np.dtype(_dtype(precision))
    sizes = [p * M * dtype.itemsize, M * 8, p * 8, p * dtype.itemsize]
    if len(payload) != sum(sizes):
        raise ArtifactFormatError(f"{path}: payload holds {len(payload)} bytes, expected {sum(sizes)}")
    offsets = np.cumsum([0, *sizes])
    columns = np.frombuffer(payload[offsets[0]:offsets[1]], dtype=dtype).reshape((p, M), order="F")
    column_index = []
    for item in header["column_index"].split(","):
        if item:
            sid, view = item.split(":")
            column_index.append((int(sid), int(view)))
    return GradientBlock(
        block_id=int(header["block_id"]),
        columns=columns.astype(dtype.newbyteorder("=")),
        column_norms=np.frombuffer(payload[offsets[1]:offsets[2]], dtype="<f8").astype(np.float64),
        center=np.frombuffer(payload[offsets[2]:offsets[3]], dtype="<f8").astype(np.float64),
        theta_block=np.frombuffer(payload[offsets[3]:offsets[4]], dtype=dtype).astype(dtype.newbyteorder("=")),
        column_index=column_index,
        dropped=json.loads(header["dropped"]),
        precision=precision,
    )

# storage/checkpoint_io.py

import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from engine.nn_engine import ParamVector, make_layout
from errors import ArtifactFormatError
from schemas.config_schemas import ArchSpec
from storage.headers import read_header, split_ints, write_header

MAGIC = "kkt-audit checkpoint v1"


def save_checkpoint(
    path: Path,
    arch: ArchSpec,
    theta: ParamVector,
    seed: Optional[int],
    config: Optional[Dict[str, Any]] = None,
) -> None:
    fields = {
        "input_dim": str(arch.input_dim),
        "hidden_widths": ",".join(str(w) for w in arch.hidden_widths),
        "num_classes": str(arch.num_classes),
        "seed": "none" if seed is None else str(seed),
        "num_params": str(len(theta)),
    }
    for slot in theta.layout:
        fields[f"layer.{slot.layer_index}"] = f"{slot.shape[0]}x{slot.shape[1]}@{slot.offset}"
    if config is not None:
        fields["config"] = json.dumps(config, sort_keys=True, separators=(",", ":"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_header(fh, MAGIC, fields)
        fh.write(theta.values.astype("<f8").tobytes())


def load_checkpoint(path: Path) -> Tuple[ArchSpec, ParamVector, Dict[str, str]]:
    with open(path, "rb") as fh:
        header = read_header(fh, MAGIC)
        payload = fh.read()
    arch = ArchSpec(
        input_dim=int(header["input_dim"]),
        hidden_widths=list(split_ints(header["hidden_widths"])),
        num_classes=int(header["num_classes"]),
    )
    layout = make_layout(arch)
    for slot in layout:
        if header.get(f"layer.{slot.layer_index}") != f"{slot.shape[0]}x{slot.shape[1]}@{slot.offset}":
            raise ArtifactFormatError(f"layout record for layer {slot.layer_index} does not match the architecture")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.shape[0] != int(header["num_params"]) or values.shape[0] != layout[-1].stop:
        raise ArtifactFormatError(f"checkpoint holds {values.shape[0]} parameters, header says {header['num_params']}")
    return arch, ParamVector(values, layout), header

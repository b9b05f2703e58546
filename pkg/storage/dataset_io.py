# storage/dataset_io.py

"""Dataset files (header + little-endian records) and the membership-tag sidecar.

Pool files never carry membership tags; the tags live in a separate CSV so an
attack run can be handed the pool without them.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from errors import ArtifactFormatError, EvaluationError
from stages.data_lab import CandidatePool, LabeledSample, Origin
from storage.headers import csv_body, read_header, write_csv_preamble, write_header

MAGIC = "kkt-audit dataset v1"


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("id", "<i8"), ("y", "<i8"), ("x", "<f8", (d,))])


def save_dataset(
    path: Path,
    samples: Sequence[LabeledSample],
    d: int,
    C: int,
    image_shaped: bool,
    seed: Optional[int],
    config: Optional[Dict[str, Any]] = None,
) -> None:
    records = np.zeros(len(samples), dtype=_record_dtype(d))
    for i, s in enumerate(samples):
        records[i] = (s.id, s.y, s.x)
    fields = {
        "d": str(d),
        "C": str(C),
        "n_samples": str(len(samples)),
        "seed": "none" if seed is None else str(seed),
        "image_shaped": str(bool(image_shaped)).lower(),
    }
    if config is not None:
        fields["config"] = json.dumps(config, sort_keys=True, separators=(",", ":"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_header(fh, MAGIC, fields)
        fh.write(records.tobytes())


def load_dataset(path: Path) -> CandidatePool:
    """Load a dataset file as an untagged CandidatePool."""
    with open(path, "rb") as fh:
        header = read_header(fh, MAGIC)
        payload = fh.read()
    d, n = int(header["d"]), int(header["n_samples"])
    dtype = _record_dtype(d)
    if len(payload) != n * dtype.itemsize:
        raise ArtifactFormatError(f"{path}: payload holds {len(payload)} bytes, expected {n * dtype.itemsize}")
    records = np.frombuffer(payload, dtype=dtype)
    samples = [
        LabeledSample(id=int(r["id"]), x=np.array(r["x"], dtype=np.float64), y=int(r["y"]))
        for r in records
    ]
    return CandidatePool(
        samples=samples,
        d=d,
        C=int(header["C"]),
        image_shaped=header["image_shaped"] == "true",
        metadata={k: v for k, v in header.items() if k in ("seed", "config")},
    )


def save_sidecar(path: Path, samples: Sequence[LabeledSample], config: Optional[Dict[str, Any]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if config is not None:
            write_csv_preamble(fh, config)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "origin"])
        for s in samples:
            if s.origin is None:
                raise ArtifactFormatError(f"sample {s.id} has no origin tag")
            writer.writerow([s.id, s.origin.value])


def load_sidecar(path: Path) -> Dict[int, Origin]:
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"membership sidecar not found: {path}")
    with open(path, newline="") as fh:
        return {int(row["sample_id"]): Origin(row["origin"]) for row in csv.DictReader(csv_body(fh))}


def tag_histogram(tags: Dict[int, Origin]) -> Dict[str, int]:
    counts = {origin.value: 0 for origin in Origin}
    for origin in tags.values():
        counts[origin.value] += 1
    return counts

# orchestrator/seeding.py

"""Master-seed derivation: every stage draws from its own stream derived from
one master seed, so a single knob reproduces a whole run."""

import zlib
from typing import Iterable, List, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from schemas.config_schemas import RunConfig

SEED_LABELS = ("scenario", "train", "solver", "eval")


def derive_seed(master_seed: int, label: str) -> int:
    """Sub-seed for one stage: SeedSequence([master, crc32(label)]) -> 63-bit int."""
    state = np.random.SeedSequence([master_seed, zlib.crc32(label.encode())]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def seed_sweep(cfg: "RunConfig", master_seeds: Iterable[int]) -> List["RunConfig"]:
    """One resolved config per master seed, each with its own work directory."""
    runs = []
    for seed in master_seeds:
        run = cfg.model_copy(deep=True)
        run.master_seed = seed
        for label in SEED_LABELS:
            getattr(run, label).seed = None
        run.io.workdir = f"{cfg.io.workdir}/seed_{seed}"
        runs.append(run.resolved())
    return runs

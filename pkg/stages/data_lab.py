# stages/data_lab.py

"""Synthetic data generation and candidate-pool construction for the attack scenarios."""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from errors import ConfigError, EvaluationError
from schemas.config_schemas import OodShift, ScenarioConfig

logger = logging.getLogger("ScenarioBuilder")


class Origin(str, Enum):
    MEMBER = "member"
    IN_DIST_NONMEMBER = "in_dist_nonmember"
    OOD_NONMEMBER = "ood_nonmember"


@dataclass(frozen=True)
class LabeledSample:
    id: int
    x: np.ndarray
    y: int
    origin: Optional[Origin] = None  # None once the tags have been stripped

    def untagged(self) -> "LabeledSample":
        return replace(self, origin=None)


@dataclass
class CandidatePool:
    samples: List[LabeledSample]
    d: int
    C: int
    image_shaped: bool = False
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ConfigError("candidate pool ids are not unique")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def grid_side(self) -> Optional[int]:
        return math.isqrt(self.d) if self.image_shaped else None

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.samples], dtype=np.int64)

    @property
    def X(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.d))
        return np.stack([s.x for s in self.samples])

    @property
    def Y(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.int64)

    @property
    def is_tagged(self) -> bool:
        return bool(self.samples) and all(s.origin is not None for s in self.samples)

    def without_tags(self) -> "CandidatePool":
        return replace(self, samples=[s.untagged() for s in self.samples])

    def with_tags(self, tags: Dict[int, Origin]) -> "CandidatePool":
        missing = [s.id for s in self.samples if s.id not in tags]
        if missing:
            raise EvaluationError(f"{len(missing)} pool samples have no membership tag (first: {missing[0]})")
        return replace(self, samples=[replace(s, origin=tags[s.id]) for s in self.samples])

    def membership(self) -> Dict[int, bool]:
        if not self.is_tagged:
            raise EvaluationError("pool carries no membership tags")
        return {s.id: s.origin == Origin.MEMBER for s in self.samples}

    @staticmethod
    def membership_from_tags(tags: Dict[int, Origin]) -> Dict[int, bool]:
        return {sid: origin == Origin.MEMBER for sid, origin in tags.items()}


class ScenarioData(NamedTuple):
    train_set: List[LabeledSample]
    pool: CandidatePool
    test_set: List[LabeledSample]


def class_means(d: int, C: int, class_separation: float, seed: int) -> np.ndarray:
    """C means on random directions, each with norm class_separation."""
    rng = np.random.default_rng([seed, 0])
    directions = rng.standard_normal((C, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return class_separation * directions


def gen_gaussian_mixture(d: int, C: int, n_per_class: int, class_separation: float, seed: int) -> List[LabeledSample]:
    """n_per_class unit-variance isotropic draws around each class mean, class-major order."""
    if min(d, C, n_per_class) < 1:
        raise ConfigError("d, C and n_per_class must be >= 1")
    if class_separation < 0:
        raise ConfigError("class_separation must be nonnegative")
    means = class_means(d, C, class_separation, seed)
    rng = np.random.default_rng([seed, 1])
    samples = []
    for c in range(C):
        X = means[c] + rng.standard_normal((n_per_class, d))
        samples.extend(LabeledSample(id=len(samples), x=x, y=c) for x in X)
    return samples


def gen_ood(
    d: int,
    C: int,
    n: int,
    shift: OodShift,
    seed: int,
    *,
    class_separation: float,
    mixture_seed: int,
) -> List[LabeledSample]:
    """Shifted draws around the mixture's class means, labelled by the nearest in-distribution mean.

    The translation is shift.mean_offset along one seeded unit direction and the
    spread is shift.scale times the mixture's unit standard deviation.
    """
    if n == 0:
        return []
    means = class_means(d, C, class_separation, mixture_seed)
    rng = np.random.default_rng([seed, 2])
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    source = rng.integers(C, size=n)
    X = means[source] + shift.mean_offset * direction + shift.scale * rng.standard_normal((n, d))
    distances = np.linalg.norm(X[:, None, :] - means[None, :, :], axis=2)
    labels = np.argmin(distances, axis=1)
    return [LabeledSample(id=i, x=x, y=int(y), origin=Origin.OOD_NONMEMBER) for i, (x, y) in enumerate(zip(X, labels))]


def build_scenario(cfg: ScenarioConfig) -> ScenarioData:
    """Train set, candidate pool and held-out test set for one scenario.

    The pool holds coverage_fraction of the members plus the configured
    in-distribution and OOD non-members, shuffled by the scenario seed.
    """
    seed = cfg.seed if cfg.seed is not None else 0
    d, C = cfg.input_dim, cfg.num_classes
    n_pool_members = cfg.members_in_pool
    if n_pool_members < 1:
        raise ConfigError(
            f"coverage {cfg.coverage_fraction} of {cfg.n_members} members leaves no member in the pool"
        )

    n_in_dist = cfg.n_members + cfg.n_in_dist_nonmembers + cfg.n_test
    mixture = gen_gaussian_mixture(d, C, math.ceil(n_in_dist / C), cfg.class_separation, seed)
    ood = gen_ood(d, C, cfg.n_ood, cfg.ood_shift, seed, class_separation=cfg.class_separation, mixture_seed=seed)

    rng = np.random.default_rng([seed, 3])
    chosen = [mixture[i] for i in rng.permutation(len(mixture))[:n_in_dist]]
    ids = rng.permutation(n_in_dist + len(ood)) + 1
    tagged = [replace(s, id=int(i)) for s, i in zip(chosen + ood, ids)]

    m, nm = cfg.n_members, cfg.n_in_dist_nonmembers
    members = [replace(s, origin=Origin.MEMBER) for s in tagged[:m]]
    nonmembers = [replace(s, origin=Origin.IN_DIST_NONMEMBER) for s in tagged[m:m + nm]]
    test_set = [replace(s, origin=Origin.IN_DIST_NONMEMBER) for s in tagged[m + nm:n_in_dist]]
    ood_samples = tagged[n_in_dist:]

    covered = np.sort(rng.choice(m, size=n_pool_members, replace=False))
    pool_samples = [members[i] for i in covered] + nonmembers + ood_samples
    pool_samples = [pool_samples[i] for i in rng.permutation(len(pool_samples))]

    pool = CandidatePool(
        samples=pool_samples,
        d=d,
        C=C,
        image_shaped=cfg.image_shaped,
        metadata={"scenario_kind": cfg.scenario_kind.value, "seed": str(seed)},
    )
    logger.info(
        "Built %s scenario: %d members (%d in pool), %d in-dist non-members, %d OOD",
        cfg.scenario_kind.value, m, n_pool_members, nm, len(ood_samples),
    )
    return ScenarioData(train_set=members, pool=pool, test_set=test_set)

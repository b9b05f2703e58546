# schemas/config_schemas.py

import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigError
from orchestrator.seeding import SEED_LABELS, derive_seed


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class Precision(str, Enum):
    F64 = "f64"
    F32 = "f32"


class ScenarioKind(str, Enum):
    STANDARD = "standard"
    DIFFERENT_DISTRIBUTION = "different_distribution"
    UNKNOWN_RATIO = "unknown_ratio"
    PARTIAL_COVERAGE = "partial_coverage"
    COMBINED = "combined"


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ArchSpec(Section):
    input_dim: int = Field(64, ge=1, description="Input feature dimension d")
    hidden_widths: List[int] = Field(default_factory=lambda: [64], description="Hidden layer widths")
    num_classes: int = Field(4, ge=2, description="Number of classes C")

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def _split_widths(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("hidden_widths")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError("all hidden widths must be >= 1")
        return widths

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_widths, self.num_classes]

    @property
    def depth(self) -> int:
        """Number of weight layers L, the homogeneity degree."""
        return len(self.hidden_widths) + 1


class TrainConfig(Section):
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0, description="Coefficient of weight_decay * 0.5 * ||theta||^2")
    epochs: int = Field(2000, ge=0, description="Epoch cap")
    batch_size: int = Field(64, ge=1)
    seed: Optional[int] = Field(None, description="Derived from master_seed when unset")
    flip_augment: bool = Field(True, description="Random horizontal flips for image-shaped data")
    target_loss: Optional[float] = Field(1e-3, gt=0, description="Stop once the epoch mean loss drops below")
    stop_grad_norm: Optional[float] = Field(None, gt=0, description="Stop once the full-batch gradient norm drops below")
    log_every: int = Field(100, ge=1)
    polish_iters: int = Field(0, ge=0, description="Full-batch BFGS iterations after SGD, run down to stop_grad_norm")

    @model_validator(mode="after")
    def _polish_needs_a_target(self) -> "TrainConfig":
        if self.polish_iters > 0 and self.stop_grad_norm is None:
            raise ValueError("train.polish_iters needs train.stop_grad_norm")
        return self


class OodShift(Section):
    mean_offset: float = Field(6.0, description="Translation along a seeded unit direction, in units of sigma")
    scale: float = Field(1.5, gt=0, description="Standard-deviation multiplier relative to the mixture")

    @property
    def is_identity(self) -> bool:
        return self.mean_offset == 0.0 and self.scale == 1.0


class ScenarioConfig(Section):
    scenario_kind: ScenarioKind = ScenarioKind.STANDARD
    n_members: int = Field(200, ge=1)
    n_in_dist_nonmembers: int = Field(200, ge=0)
    n_ood: int = Field(0, ge=0)
    coverage_fraction: float = Field(1.0, gt=0, le=1)
    ood_shift: OodShift = Field(default_factory=OodShift)
    input_dim: int = Field(64, ge=1)
    num_classes: int = Field(4, ge=2)
    class_separation: float = Field(4.0, ge=0)
    image_shaped: bool = Field(False, description="Arrange features on a square grid so flips are meaningful")
    n_test: int = Field(200, ge=0, description="Held-out in-distribution samples for test accuracy")
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "ScenarioConfig":
        kind = self.scenario_kind
        if self.image_shaped and math.isqrt(self.input_dim) ** 2 != self.input_dim:
            raise ValueError(f"image_shaped requires a square input_dim, got {self.input_dim}")
        if kind == ScenarioKind.STANDARD:
            if self.n_ood != 0:
                raise ValueError("standard scenario requires n_ood = 0")
            if self.n_members != self.n_in_dist_nonmembers:
                raise ValueError("standard scenario requires equal member and non-member counts")
        if kind in (ScenarioKind.STANDARD, ScenarioKind.UNKNOWN_RATIO) and self.n_ood != 0:
            raise ValueError(f"{kind.value} scenario requires n_ood = 0")
        if kind == ScenarioKind.DIFFERENT_DISTRIBUTION and self.n_ood == 0:
            raise ValueError("different_distribution scenario requires n_ood > 0")
        if kind not in (ScenarioKind.PARTIAL_COVERAGE, ScenarioKind.COMBINED) and self.coverage_fraction != 1.0:
            raise ValueError("coverage_fraction < 1 is only valid for partial_coverage and combined")
        return self

    @property
    def members_in_pool(self) -> int:
        return int(round(self.coverage_fraction * self.n_members))

    @property
    def grid_side(self) -> Optional[int]:
        return math.isqrt(self.input_dim) if self.image_shaped else None


class GradConfig(Section):
    block_size_target: int = Field(4096, ge=1)
    last_k_layers: Optional[int] = Field(None, ge=1, description="Restrict blocks to the final k layers")
    precision: Precision = Precision.F64


class SolverConfig(Section):
    alpha: float = Field(1.0, ge=0, description="Weight of the negativity penalty")
    beta: float = Field(0.1, ge=0, description="Weight of the margin penalty")
    max_iters: int = Field(2000, ge=1)
    base_learning_rate: float = Field(0.01, gt=0)
    clip_norm: float = Field(1.0, gt=0)
    weight_decay: float = Field(1e-2, ge=0, description="Decoupled decay on lambda")
    early_stop_patience: int = Field(50, ge=1)
    early_stop_tol: float = Field(1e-7, ge=0)
    init_scale: float = Field(0.0, ge=0, description="Std of the seeded initial lambda; 0 starts at zero")
    interval_filter_width: Optional[float] = Field(None, ge=0, description="Margin-interval prefilter width (IQR units)")
    trace_dir: Optional[str] = None
    seed: Optional[int] = None


class FusionConfig(Section):
    trim_fraction: float = Field(0.2, ge=0, lt=0.5)
    use_snr: bool = True
    fusion_weights: Tuple[float, float] = Field((0.5, 0.5), description="(w_trim, w_snr)")
    boost_class: bool = True
    boost_sample: bool = True
    scale_distance: bool = True
    gamma: float = Field(0.5, ge=0, description="Class boost strength")
    delta: float = Field(0.5, ge=0, description="Sample boost strength")
    eta: float = Field(0.5, ge=0, description="Distance scaling exponent")
    top_k: int = Field(5, ge=1)
    epsilon_std: float = Field(1e-8, gt=0, description="SNR denominator floor")
    epsilon_class: float = Field(1e-8, gt=0, description="Class boost denominator floor")
    epsilon_div: float = Field(1.0, gt=0, description="Distance scaling denominator floor; caps the factor at 1 / epsilon_div")
    score_floor: float = Field(1e-3, gt=0, description="Lowest fused score after the shift that precedes the multiplicative stages")

    @field_validator("fusion_weights", mode="before")
    @classmethod
    def _split_weights(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("fusion_weights")
    @classmethod
    def _weights_sum_to_one(cls, weights: Tuple[float, float]) -> Tuple[float, float]:
        if min(weights) < 0:
            raise ValueError("fusion weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"fusion weights must sum to 1, got {sum(weights)}")
        return weights

    def stages(self) -> List[str]:
        stages = ["trimmed_mean"]
        if self.use_snr:
            stages.append("snr_fusion")
        if self.boost_class:
            stages.append("class_boost")
        if self.boost_sample:
            stages.append("sample_boost")
        if self.scale_distance:
            stages.append("distance_scale")
        return stages


class EvalConfig(Section):
    fpr_targets: List[float] = Field(default_factory=lambda: [0.0, 0.005, 0.01, 0.05])
    subsample_fraction: float = Field(1.0, gt=0, le=1, description="Evaluate on a seeded subset of the pool")
    seed: Optional[int] = None

    @field_validator("fpr_targets", mode="before")
    @classmethod
    def _split_targets(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("fpr_targets")
    @classmethod
    def _in_unit_interval(cls, targets: List[float]) -> List[float]:
        if any(t < 0 or t > 1 for t in targets):
            raise ValueError("fpr targets must lie in [0, 1]")
        return sorted(targets)


class IOConfig(Section):
    workdir: str = "runs/default"
    force: bool = False

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name

    @property
    def train_file(self) -> Path:
        return self.path("train.ds")

    @property
    def pool_file(self) -> Path:
        return self.path("pool.ds")

    @property
    def test_file(self) -> Path:
        return self.path("test.ds")

    @property
    def sidecar_file(self) -> Path:
        return self.path("pool.tags.csv")

    @property
    def checkpoint_file(self) -> Path:
        return self.path("model.ckpt")

    def score_file(self, attack_name: str) -> Path:
        return self.path(f"scores_{attack_name}.csv")

    def metrics_file(self, attack_name: str) -> Path:
        return self.path(f"metrics_{attack_name}.json")


class RunConfig(Section):
    master_seed: int = Field(0, ge=0)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    arch: ArchSpec = Field(default_factory=ArchSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    grad: GradConfig = Field(default_factory=GradConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    @model_validator(mode="before")
    @classmethod
    def _arch_follows_scenario(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get("scenario"), dict):
            arch = dict(data.get("arch") or {})
            for key in ("input_dim", "num_classes"):
                if key in data["scenario"] and key not in arch:
                    arch[key] = data["scenario"][key]
            data = {**data, "arch": arch}
        return data

    @model_validator(mode="after")
    def _dims_agree(self) -> "RunConfig":
        if self.arch.input_dim != self.scenario.input_dim:
            raise ValueError("arch.input_dim must equal scenario.input_dim")
        if self.arch.num_classes != self.scenario.num_classes:
            raise ValueError("arch.num_classes must equal scenario.num_classes")
        return self

    @classmethod
    def from_flat(cls, flat: Mapping[str, Optional[str]]) -> "RunConfig":
        """Build from `section.field = value` pairs; nested models use further dots."""
        nested: Dict[str, Any] = {}
        for key, raw in flat.items():
            parts = key.strip().split(".")
            if any(not p for p in parts):
                raise ConfigError(f"malformed key: {key!r}")
            value = None if raw is None or raw.strip().lower() in ("", "none", "null") else raw.strip()
            node = nested
            for part in parts[:-1]:
                child = node.setdefault(part, {})
                if not isinstance(child, dict):
                    raise ConfigError(f"key {key!r} conflicts with a scalar value")
                node = child
            node[parts[-1]] = value
        return cls.model_validate(nested)

    def to_flat(self) -> Dict[str, str]:
        flat: Dict[str, str] = {}

        def walk(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for k, v in value.items():
                    walk(f"{prefix}.{k}" if prefix else k, v)
            elif isinstance(value, (list, tuple)):
                flat[prefix] = ",".join(str(v) for v in value)
            else:
                flat[prefix] = "none" if value is None else str(value)

        walk("", self.model_dump(mode="json"))
        return flat

    def resolved(self) -> "RunConfig":
        """Copy with every unset section seed derived from master_seed."""
        cfg = self.model_copy(deep=True)
        for label in SEED_LABELS:
            section = getattr(cfg, label)
            if section.seed is None:
                section.seed = derive_seed(cfg.master_seed, label)
        return cfg

    def artifact_echo(self) -> Dict[str, Any]:
        """Config fields that determine artifact contents (io and run-time knobs excluded)."""
        echo = self.model_dump(mode="json", exclude={"io": True, "solver": {"trace_dir"}})
        return echo

    def digest(self) -> str:
        payload = json.dumps(self.artifact_echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

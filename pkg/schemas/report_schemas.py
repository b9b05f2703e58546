# schemas/report_schemas.py

from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

# Score given to candidates removed by the prefilter; finite so every file
# format and the ROC sweep can carry it, and below any real score.
SENTINEL_SCORE = -1.0e300

ZERO_FPR_NOTE = (
    "fpr_target 0 means zero false positives: the threshold sits strictly above "
    "the highest non-member score"
)


class ScoreRecord(BaseModel):
    sample_id: int
    final_score: float
    fused: Optional[float] = None
    boosted: Optional[float] = None
    scaled: Optional[float] = None
    margin: float
    predicted_class: int
    retained: bool = True


class ScoreReport(BaseModel):
    attack_name: str = Field("kkt", description="Attack that produced the scores")
    records: List[ScoreRecord] = Field(default_factory=list)
    stages: List[str] = Field(default_factory=list, description="Post-processing stages applied, in order")
    pool_size: int = 0
    n_retained: int = 0
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    master_seed: Optional[int] = None

    def scores_by_id(self) -> Dict[int, float]:
        return {r.sample_id: r.final_score for r in self.records}


class BaselineReport(ScoreReport):
    """Scores from a reference-free baseline; higher means more member-like."""


class TprAtFpr(BaseModel):
    fpr_target: float
    achieved_fpr: float
    tpr: float
    allowed_false_positives: int
    threshold: Optional[float] = Field(None, description="Scores strictly above this are predicted members")


class MetricSummary(BaseModel):
    mean: float
    se: float = Field(0.0, description="Standard error std/sqrt(n) with ddof=1; 0 for one seed")
    per_seed: List[float] = Field(default_factory=list)


class MetricsReport(BaseModel):
    attack_name: str = "kkt"
    auc: float
    tpr_at: List[TprAtFpr] = Field(default_factory=list)
    roc: List[Tuple[float, float]] = Field(default_factory=list)
    n_members: int
    n_nonmembers: int
    seeds: List[int] = Field(default_factory=list)
    summary: Dict[str, MetricSummary] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)

    def metric_values(self) -> Dict[str, float]:
        values = {"auc": self.auc}
        for entry in self.tpr_at:
            values[f"tpr@{entry.fpr_target:g}"] = entry.tpr
        return values

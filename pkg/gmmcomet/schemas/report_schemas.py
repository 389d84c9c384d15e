from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class ErrorDetail(BaseModel):
    type: str
    message: str
    details: Optional[Any] = None


class LossValues(BaseModel):
    contrastive: float = 0.0
    entropy: float = 0.0
    consistency_src: float = 0.0
    consistency_mt: float = 0.0
    total: float = 0.0


class ScoreSummary(BaseModel):
    min: float
    median: float
    max: float


class StepLog(BaseModel):
    batch_index: int
    domain_id: Optional[int] = Field(None, description="Filled in by the runner, never seen by the engine.")
    known_counts: List[int] = Field(..., description="Known pseudo-labels per source class.")
    unknown_count: int
    ignored_count: int
    losses: LossValues = Field(default_factory=LossValues)
    scores: ScoreSummary
    tau_lower: float
    tau_upper: float
    thresholds_frozen: bool
    skipped: bool = False
    skip_reason: Optional[str] = None
    predictions: List[int]


class DomainMetrics(BaseModel):
    domain_id: int
    known_total: int
    known_correct: int
    unknown_total: int
    unknown_correct: int
    acc_known: float
    acc_unknown: Optional[float] = None
    metric: float


class RunReport(BaseModel):
    name: str
    scenario: str
    seed: int
    metric_name: str = Field(..., description="'accuracy' for PDA, 'h_score' for ODA/OPDA.")
    per_domain: List[DomainMetrics] = []
    average: Optional[float] = None
    tau_lower: Optional[float] = None
    tau_upper: Optional[float] = None
    num_batches: int = 0
    skipped_steps: int = 0
    source_train_accuracy: Optional[float] = None
    # Written to the .steps.jsonl file, not the report JSON.
    steps: List[StepLog] = Field(default_factory=list, exclude=True)


class SummaryRow(BaseModel):
    name: str
    scenario: str
    seed: int
    status: str = "ok"
    metric: Optional[str] = None
    per_domain: List[float] = []
    average: Optional[float] = None
    tau_lower: Optional[float] = None
    tau_upper: Optional[float] = None
    error: Optional[ErrorDetail] = None


class ComparisonRow(BaseModel):
    name: str
    scenario: str
    runs: int
    mean: Optional[float] = None
    std: Optional[float] = None
    failed: int = 0

    # Convenience for table printing
    def as_cells(self) -> Dict[str, str]:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        return {"name": self.name, "scenario": self.scenario, "runs": str(self.runs),
                "mean": fmt(self.mean), "std": fmt(self.std), "failed": str(self.failed)}

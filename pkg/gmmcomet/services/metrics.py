# gmmcomet/services/metrics.py
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

from ..core.errors import ContractViolation
from ..schemas.config_schemas import ScenarioKind
from ..schemas.report_schemas import DomainMetrics


@dataclass
class BucketCounts:
    known_total: int = 0
    known_correct: int = 0
    unknown_total: int = 0
    unknown_correct: int = 0


@dataclass
class MetricsAccumulator:
    num_source_classes: int
    domains: Dict[int, BucketCounts] = field(default_factory=dict)

    @property
    def unknown_label(self) -> int:
        return self.num_source_classes

    def bucket(self, domain_id: int) -> BucketCounts:
        return self.domains.setdefault(int(domain_id), BucketCounts())


def record(acc: MetricsAccumulator, prediction: int, truth: int, known_set: Iterable[int],
           domain_id: int) -> MetricsAccumulator:
    bucket = acc.bucket(domain_id)
    if truth in known_set:
        bucket.known_total += 1
        bucket.known_correct += int(prediction == truth)
    else:
        bucket.unknown_total += 1
        bucket.unknown_correct += int(prediction == acc.unknown_label)
    return acc


def record_batch(acc: MetricsAccumulator, predictions: np.ndarray, truths: np.ndarray,
                 domain_id: int) -> MetricsAccumulator:
    """Vectorized `record` where the known set is the source label set 0..num_source_classes-1."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    known = truths < acc.num_source_classes
    bucket = acc.bucket(domain_id)
    bucket.known_total += int(known.sum())
    bucket.known_correct += int(np.sum(predictions[known] == truths[known]))
    bucket.unknown_total += int((~known).sum())
    bucket.unknown_correct += int(np.sum(predictions[~known] == acc.unknown_label))
    return acc


def h_score(acc_k: float, acc_u: float) -> float:
    """Harmonic mean of known and unknown accuracy, 0 when both are 0."""
    if acc_k + acc_u == 0:
        return 0.0
    if acc_k == acc_u:
        return float(acc_k)
    return 2.0 * acc_k * acc_u / (acc_k + acc_u)


def _ratio(correct: int, total: int) -> float:
    return correct / total if total else 0.0


def metric_name(kind: ScenarioKind) -> str:
    return "accuracy" if kind == ScenarioKind.PDA else "h_score"


def per_domain_average(acc: MetricsAccumulator, kind: ScenarioKind) -> Tuple[List[DomainMetrics], float]:
    """Metric per domain, then the unweighted mean over domains."""
    if not acc.domains:
        raise ContractViolation("no domain has been recorded")
    rows: List[DomainMetrics] = []
    for domain_id in sorted(acc.domains):
        b = acc.domains[domain_id]
        acc_k = _ratio(b.known_correct, b.known_total)
        if kind == ScenarioKind.PDA:
            if b.unknown_total:
                raise ContractViolation(f"PDA domain {domain_id} has samples in the unknown bucket")
            acc_u, value = None, acc_k
        else:
            acc_u = _ratio(b.unknown_correct, b.unknown_total)
            value = h_score(acc_k, acc_u)
        rows.append(DomainMetrics(
            domain_id=domain_id, known_total=b.known_total, known_correct=b.known_correct,
            unknown_total=b.unknown_total, unknown_correct=b.unknown_correct,
            acc_known=acc_k, acc_unknown=acc_u, metric=value,
        ))
    return rows, float(np.mean([row.metric for row in rows]))

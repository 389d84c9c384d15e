import numpy as np
import pytest

from gmmcomet.core.errors import ContractViolation
from gmmcomet.schemas.config_schemas import ScenarioKind
from gmmcomet.services.metrics import MetricsAccumulator, h_score, per_domain_average, record, record_batch


def test_h_score_values():
    assert h_score(0.6, 0.4) == pytest.approx(0.48, abs=1e-15)
    for a in (0.0, 0.3, 0.77, 1.0):
        assert h_score(a, a) == a
    assert h_score(0.0, 0.0) == 0.0
    assert h_score(1.0, 0.0) == 0.0


def test_record_buckets_known_and_unknown():
    acc = MetricsAccumulator(num_source_classes=3)
    record(acc, 1, 1, range(3), 0)
    record(acc, 2, 1, range(3), 0)
    record(acc, 3, 5, range(3), 0)
    record(acc, 0, 4, range(3), 0)
    bucket = acc.domains[0]
    assert (bucket.known_total, bucket.known_correct) == (2, 1)
    assert (bucket.unknown_total, bucket.unknown_correct) == (2, 1)


def test_per_domain_average_is_unweighted_by_batch_count():
    acc = MetricsAccumulator(num_source_classes=2)
    for _ in range(10):
        record_batch(acc, np.array([0, 1]), np.array([0, 1]), domain_id=0)
    record_batch(acc, np.array([0, 0]), np.array([0, 1]), domain_id=1)
    rows, mean = per_domain_average(acc, ScenarioKind.PDA)
    assert [row.metric for row in rows] == [1.0, 0.5]
    assert mean == pytest.approx(0.75)


def test_duplicating_batches_within_a_domain_leaves_average_unchanged():
    preds = np.array([0, 2, 1, 2, 0])
    truths = np.array([0, 2, 0, 3, 1])
    once, twice = MetricsAccumulator(2), MetricsAccumulator(2)
    record_batch(once, preds, truths, 0)
    record_batch(once, preds[::-1], truths, 1)
    for _ in range(2):
        record_batch(twice, preds, truths, 0)
        record_batch(twice, preds[::-1], truths, 1)
    assert per_domain_average(once, ScenarioKind.OPDA)[1] == per_domain_average(twice, ScenarioKind.OPDA)[1]


def test_open_set_rows_carry_both_accuracies():
    acc = MetricsAccumulator(num_source_classes=2)
    # known: 3/5 correct, unknown: 2/5 correct
    record_batch(acc, np.array([0, 1, 0, 0, 0]), np.array([0, 1, 0, 1, 1]), 0)
    record_batch(acc, np.array([2, 2, 0, 1, 0]), np.array([2, 3, 2, 3, 2]), 0)
    rows, mean = per_domain_average(acc, ScenarioKind.ODA)
    assert rows[0].acc_known == pytest.approx(0.6)
    assert rows[0].acc_unknown == pytest.approx(0.4)
    assert mean == pytest.approx(0.48)


def test_pda_with_unknown_samples_is_a_contract_violation():
    acc = MetricsAccumulator(num_source_classes=2)
    record_batch(acc, np.array([0, 2]), np.array([0, 2]), 0)
    with pytest.raises(ContractViolation):
        per_domain_average(acc, ScenarioKind.PDA)


def test_average_needs_at_least_one_domain():
    with pytest.raises(ContractViolation):
        per_domain_average(MetricsAccumulator(2), ScenarioKind.ODA)

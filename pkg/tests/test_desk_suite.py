from pathlib import Path

import numpy as np
import pytest

from gmmcomet.services import engine as engine_module
from gmmcomet.services.suite_service import SuiteService

DESK_SUITE = Path(__file__).resolve().parents[1] / "configs" / "desk_suite.yaml"
VARIANTS = ("full", "source_only", "no_mean_teacher")


@pytest.fixture(scope="module")
def desk_reports():
    """Reports of the desk suite for the variants compared below, keyed by run name."""
    suite = SuiteService().parse_config(DESK_SUITE)
    reports = {}
    for run in suite.runs:
        if run.name.split("-", 1)[1] not in VARIANTS:
            continue
        reports[run.name] = (run, [engine_module.run(run.engine, run.scenario, seed, name=run.name)
                                   for seed in run.seeds])
    return reports


def _mean_score(desk_reports, name):
    _, reports = desk_reports[name]
    assert len(reports) == 5
    return float(np.mean([report.average for report in reports]))


@pytest.mark.parametrize("experiment", ["pda", "oda", "opda"])
def test_full_method_is_not_worse_than_source_only(desk_reports, experiment):
    full = _mean_score(desk_reports, f"{experiment}-full")
    baseline = _mean_score(desk_reports, f"{experiment}-source_only")
    assert full >= baseline


@pytest.mark.parametrize("experiment", ["oda", "opda"])
def test_mean_teacher_does_not_hurt(desk_reports, experiment):
    full = _mean_score(desk_reports, f"{experiment}-full")
    without = _mean_score(desk_reports, f"{experiment}-no_mean_teacher")
    assert without <= full + 0.01


def test_pseudo_labels_stay_mixed_after_warm_up(desk_reports):
    run, reports = desk_reports["opda-full"]
    num_domains = len(run.scenario.domains)
    for report in reports:
        after = [step for step in report.steps if step.batch_index >= run.engine.n_init]
        for domain in range(num_domains):
            steps = [step for step in after if step.domain_id == domain]
            assert steps
            assert sum(sum(step.known_counts) for step in steps) > 0
            assert sum(step.unknown_count for step in steps) > 0

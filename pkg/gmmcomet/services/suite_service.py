# gmmcomet/services/suite_service.py
import asyncio
import csv
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
import yaml
from pydantic import ValidationError
from tqdm import tqdm

from ..core.config import settings
from ..core.errors import ConfigurationError, StreamError
from ..schemas.config_schemas import ExperimentSuite, SuiteFile, SuiteRun, apply_variant
from ..schemas.report_schemas import ComparisonRow, ErrorDetail, RunReport, SummaryRow
from . import engine as engine_module
from .datagen import dump_csv, make_scenario
from .gmmstream import save_snapshot

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["name", "scenario", "seed", "status", "metric", "per_domain", "average",
                   "tau_lower", "tau_upper", "error"]
COMPARISON_COLUMNS = ["name", "scenario", "runs", "mean", "std", "failed"]
JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2


def _field_path(loc: Sequence[Union[str, int]]) -> str:
    return ".".join(str(part) for part in loc)


def _fmt(value: Optional[float]) -> str:
    # repr round-trips floats exactly
    return "" if value is None else repr(float(value))


def _parse_float(cell: str) -> Optional[float]:
    return float(cell) if cell not in ("", None) else None


class SuiteService:
    """Loads experiment configs and runs them, one engine per (run, seed)."""

    def parse_config(self, path: Union[str, Path], seeds_override: Optional[List[int]] = None,
                     output_dir: Optional[str] = None) -> ExperimentSuite:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must contain a mapping at the top level")

        try:
            parsed = SuiteFile.model_validate(raw)
        except ValidationError as exc:
            errors = exc.errors()
            message = errors[0]["msg"]
            if len(errors) > 1:
                message += f" (and {len(errors) - 1} more: " + ", ".join(_field_path(err["loc"]) for err in errors[1:]) + ")"
            raise ConfigurationError(message, field=_field_path(errors[0]["loc"]) or None) from exc

        if seeds_override is not None and not seeds_override:
            raise ConfigurationError("at least one seed is required", field="seeds")

        runs: List[SuiteRun] = []
        for experiment in parsed.experiments:
            seeds = list(seeds_override or experiment.seeds or parsed.seeds)
            if experiment.variants:
                for variant in experiment.variants:
                    runs.append(SuiteRun(name=f"{experiment.name}-{variant.value}", scenario=experiment.scenario,
                                         engine=apply_variant(experiment.engine, variant), seeds=seeds))
            else:
                runs.append(SuiteRun(name=experiment.name, scenario=experiment.scenario, engine=experiment.engine, seeds=seeds))

        try:
            suite = ExperimentSuite(
                runs=runs,
                output_dir=output_dir or parsed.output_dir or settings.GMMCOMET_OUTPUT_DIR,
                save_gmm_snapshots=parsed.save_gmm_snapshots,
            )
        except ValidationError as exc:
            raise ConfigurationError(exc.errors()[0]["msg"], field="experiments.name") from exc
        logger.info("Parsed %s: %d runs, %d (run, seed) combinations", path, len(suite.runs),
                    sum(len(run.seeds) for run in suite.runs))
        return suite

    # -- execution ---------------------------------------------------------------

    def execute_run(self, run: SuiteRun, seed: int, out_dir: Path, save_gmm: bool = False) -> SummaryRow:
        """Run one (config, seed) pair and write its report and step log. Never raises."""
        row = SummaryRow(name=run.name, scenario=run.scenario.kind.value, seed=seed)
        engines: List[engine_module.AdaptationEngine] = []
        try:
            report = engine_module.run(run.engine, run.scenario, seed, name=run.name, engine_hook=engines.append)
            self.write_report(report, out_dir)
            if save_gmm and run.engine.switches.adapt and engines:
                save_snapshot(engines[0].gmm, out_dir / f"{run.name}.{seed}.gmm.json")
        except Exception as exc:
            logger.exception("Run %s seed=%d failed", run.name, seed)
            details = {"batch_index": exc.batch_index} if isinstance(exc, StreamError) else None
            row.status = "failed"
            row.error = ErrorDetail(type=type(exc).__name__, message=str(exc), details=details)
            return row

        row.metric = report.metric_name
        row.per_domain = [domain.metric for domain in report.per_domain]
        row.average = report.average
        row.tau_lower, row.tau_upper = report.tau_lower, report.tau_upper
        return row

    def write_report(self, report: RunReport, out_dir: Path) -> Tuple[Path, Path]:
        stem = f"{report.name}.{report.seed}"
        report_path = out_dir / f"{stem}.report.json"
        steps_path = out_dir / f"{stem}.steps.jsonl"
        report_path.write_bytes(orjson.dumps(report.model_dump(mode="json"), option=JSON_OPTIONS))
        with steps_path.open("wb") as fh:
            for step in report.steps:
                fh.write(orjson.dumps(step.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS))
                fh.write(b"\n")
        return report_path, steps_path

    async def run_suite_async(self, suite: ExperimentSuite, jobs: int = 1, show_progress: bool = False) -> int:
        out_dir = Path(suite.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        work = [(run, seed) for run in suite.runs for seed in run.seeds]
        semaphore = asyncio.Semaphore(max(1, jobs))
        progress = tqdm(total=len(work), desc="runs", unit="run", disable=not show_progress)

        async def _one(run: SuiteRun, seed: int) -> SummaryRow:
            async with semaphore:
                row = await asyncio.to_thread(self.execute_run, run, seed, out_dir, suite.save_gmm_snapshots)
            progress.update(1)
            return row

        try:
            # gather returns results in submission order
            rows: List[SummaryRow] = list(await asyncio.gather(*(_one(run, seed) for run, seed in work)))
        finally:
            progress.close()

        self.write_summary(rows, out_dir / "summary.csv")
        comparison = self.build_comparison(rows)
        self.write_comparison(comparison, out_dir / "comparison.csv")
        for entry in comparison:
            cells = entry.as_cells()
            logger.info("%-32s %-5s mean=%s std=%s runs=%s failed=%s", cells["name"], cells["scenario"],
                        cells["mean"], cells["std"], cells["runs"], cells["failed"])

        failed = sum(1 for row in rows if row.status != "ok")
        if failed:
            logger.error("%d of %d runs failed; see %s", failed, len(rows), out_dir / "summary.csv")
            return 1
        return 0

    def run_suite(self, suite: ExperimentSuite, jobs: Optional[int] = None,
                  show_progress: Optional[bool] = None) -> int:
        jobs = settings.GMMCOMET_JOBS if jobs is None else jobs
        show_progress = settings.GMMCOMET_SHOW_PROGRESS if show_progress is None else show_progress
        return asyncio.run(self.run_suite_async(suite, jobs=jobs, show_progress=show_progress))

    # -- tables ----------------------------------------------------------------

    def write_summary(self, rows: List[SummaryRow], path: Path) -> Path:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_COLUMNS)
            for row in rows:
                writer.writerow([
                    row.name, row.scenario, row.seed, row.status, row.metric or "",
                    ";".join(_fmt(value) for value in row.per_domain),
                    _fmt(row.average), _fmt(row.tau_lower), _fmt(row.tau_upper),
                    f"{row.error.type}: {row.error.message}" if row.error else "",
                ])
        return path

    def read_summary(self, path: Union[str, Path]) -> List[SummaryRow]:
        rows: List[SummaryRow] = []
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SUMMARY_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise ConfigurationError(f"summary file lacks columns {sorted(missing)}", field="summary")
            for cells in reader:
                error = None
                if cells["error"]:
                    err_type, _, message = cells["error"].partition(": ")
                    error = ErrorDetail(type=err_type, message=message)
                rows.append(SummaryRow(
                    name=cells["name"], scenario=cells["scenario"], seed=int(cells["seed"]),
                    status=cells["status"], metric=cells["metric"] or None,
                    per_domain=[float(v) for v in cells["per_domain"].split(";") if v],
                    average=_parse_float(cells["average"]),
                    tau_lower=_parse_float(cells["tau_lower"]), tau_upper=_parse_float(cells["tau_upper"]),
                    error=error,
                ))
        return rows

    def build_comparison(self, rows: List[SummaryRow]) -> List[ComparisonRow]:
        """Mean and population std of the averaged metric per (name, scenario) across seeds."""
        groups: Dict[Tuple[str, str], List[SummaryRow]] = OrderedDict()
        for row in rows:
            groups.setdefault((row.name, row.scenario), []).append(row)
        table: List[ComparisonRow] = []
        for (name, scenario), members in groups.items():
            values = [row.average for row in members if row.status == "ok" and row.average is not None]
            table.append(ComparisonRow(
                name=name, scenario=scenario, runs=len(values),
                mean=float(np.mean(values)) if values else None,
                std=float(np.std(values)) if values else None,
                failed=sum(1 for row in members if row.status != "ok"),
            ))
        return table

    def write_comparison(self, table: List[ComparisonRow], path: Path) -> Path:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COMPARISON_COLUMNS)
            for entry in table:
                writer.writerow([entry.name, entry.scenario, entry.runs, _fmt(entry.mean),
                                 _fmt(entry.std), entry.failed])
        return path

    # -- datasets ----------------------------------------------------------------

    def generate_datasets(self, suite: ExperimentSuite, out_dir: Union[str, Path]) -> List[Path]:
        """Dump the source set and target stream each (run, seed) would see."""
        written: List[Path] = []
        for run in suite.runs:
            for seed in run.seeds:
                data_rng, _, _ = engine_module.seed_streams(seed)
                source, stream = make_scenario(run.scenario, data_rng)
                written.extend(dump_csv(source, stream, Path(out_dir) / f"{run.name}.{seed}"))
        return written


suite_service_instance = SuiteService()

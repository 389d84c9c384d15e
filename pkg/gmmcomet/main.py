# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.

# gmmcomet/main.py
import logging
from pathlib import Path
from typing import List, Optional

import click

from .core.errors import ConfigurationError
from .core.logging_config import configure_logging
from .services import suite_service as suite

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def _parse_seeds(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        seeds = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'", param_hint="--seeds")
    if not seeds:
        raise click.BadParameter("at least one seed is required", param_hint="--seeds")
    return seeds


@click.group()
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None,
              help="Overrides LOG_LEVEL from the environment / .env.")
def cli(log_level: Optional[str]):
    """Continual source-free universal domain adaptation simulator."""
    configure_logging(log_level)


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: config output_dir, then GMMCOMET_OUTPUT_DIR).")
@click.option("--seeds", default=None, help="Comma-separated seeds overriding the config, e.g. 0,1,2.")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Runs executed concurrently.")
@click.option("--progress/--no-progress", default=None, help="Show a progress bar over runs.")
def run(config: Path, out_dir: Optional[str], seeds: Optional[str], jobs: Optional[int], progress: Optional[bool]):
    """Run every experiment of CONFIG over every seed."""
    try:
        parsed = suite.suite_service_instance.parse_config(config, seeds_override=_parse_seeds(seeds),
                                                           output_dir=out_dir)
    except ConfigurationError as exc:
        raise click.ClickException(f"Invalid config {config}: {exc}")
    status = suite.suite_service_instance.run_suite(parsed, jobs=jobs,
                                                    show_progress=progress)
    click.echo(f"Results written to {parsed.output_dir}")
    raise SystemExit(status)


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seeds", default=None, help="Comma-separated seeds overriding the config.")
def generate(config: Path, out_dir: str, seeds: Optional[str]):
    """Write the source set and target stream of every run as CSV files."""
    try:
        parsed = suite.suite_service_instance.parse_config(config, seeds_override=_parse_seeds(seeds))
    except ConfigurationError as exc:
        raise click.ClickException(f"Invalid config {config}: {exc}")
    written = suite.suite_service_instance.generate_datasets(parsed, out_dir)
    click.echo(f"Wrote {len(written)} files under {out_dir}")


@cli.command()
@click.argument("summary", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def compare(summary: Path):
    """Print mean/std of the averaged metric per (name, scenario) from a summary.csv."""
    try:
        rows = suite.suite_service_instance.read_summary(summary)
    except ConfigurationError as exc:
        raise click.ClickException(str(exc))
    table = suite.suite_service_instance.build_comparison(rows)
    click.echo(f"{'name':<32} {'scenario':<8} {'runs':>4} {'mean':>8} {'std':>8} {'failed':>6}")
    for entry in table:
        cells = entry.as_cells()
        click.echo(f"{cells['name']:<32} {cells['scenario']:<8} {cells['runs']:>4} "
                   f"{cells['mean']:>8} {cells['std']:>8} {cells['failed']:>6}")


if __name__ == "__main__":
    cli()

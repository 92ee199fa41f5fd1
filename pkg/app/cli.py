"""
parkloop command line.

Exit codes: 0 on success, 1 on validation or usage failures, 2 on runtime
failures (instability, non-convergence, numeric or I/O errors).
"""

import sys
from pathlib import Path
from typing import Annotated, List, Optional, Sequence, Tuple

import click
import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from app.core.config import TOOL_NAME, TOOL_VERSION, settings
from app.core.exceptions import DomainError, ParkloopError, ScenarioValidationError, exit_code_for
from app.core.output import write_surface
from app.core.scenario import dump_scenario, load_scenario, paper_config, paper_scenario
from app.core.sim import pipeline
from app.core.sim.ensemble import EnsembleConfig
from app.core.sim.loop import InitialConditionPolicy, Scenario, parse_policy, stability_report
from app.core.sim.pipeline import RunStatus


app = typer.Typer(
    name=TOOL_NAME,
    help="Closed-loop incentive regulation of parking choice.",
    add_completion=False,
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)
console = Console()
err_console = Console(stderr=True)


ScenarioOption = Annotated[
    Optional[Path],
    typer.Option("--scenario", help="Scenario YAML file; the built-in two-class scenario when omitted."),
]
OutOption = Annotated[
    Optional[Path],
    typer.Option("--out", help="Output directory (default: OUTPUT_DIR setting)."),
]
SeedOption = Annotated[Optional[int], typer.Option("--seed", min=0, help="Master seed.")]
WorkersOption = Annotated[
    Optional[int],
    typer.Option("--workers", min=0, help="Worker processes; 0 = one per CPU. Never changes results."),
]
NoSvgOption = Annotated[bool, typer.Option("--no-svg", help="Skip SVG band plots.")]


def _report_error(exc: BaseException) -> int:
    err_console.print(f"[bold red]error:[/bold red] {exc}")
    if isinstance(exc, ScenarioValidationError):
        for err in exc.errors:
            where = f"{err.section}.{err.key}" if err.key else err.section
            err_console.print(f"  - {where}: {err.reason}")
    return exit_code_for(exc)


def _load(path: Optional[Path]) -> Tuple[Scenario, EnsembleConfig]:
    if path is None:
        return paper_scenario(), paper_config()
    return load_scenario(path)


def _policy(text: Optional[str], scenario: Scenario) -> Optional[InitialConditionPolicy]:
    return None if text is None else parse_policy(text, scenario.n_suburbs)


def _finish(outcome: dict) -> int:
    if outcome["status"] == RunStatus.FAILED:
        err_console.print(f"[bold red]error:[/bold red] {outcome['error']}")
        for err in outcome.get("errors", []):
            where = f"{err['section']}.{err['key']}" if err["key"] else err["section"]
            err_console.print(f"  - {where}: {err['reason']}")
    return outcome["exit_code"]


def _print_bundle(outcome: dict) -> None:
    bundle = outcome["result"].get("bundle")
    if bundle is not None:
        console.print(f"wrote {len(bundle.csv_files)} CSV file(s) to [bold]{bundle.directory}[/bold]")


@app.callback()
def main_callback(
    log_level: Annotated[Optional[str], typer.Option("--log-level", help="Logging level.")] = None,
):
    pipeline.configure_logging(log_level)


@app.command()
def simulate(
    scenario: ScenarioOption = None,
    steps: Annotated[int, typer.Option("--steps")] = 1000,
    seed: SeedOption = None,
    out: OutOption = None,
    ic_policy: Annotated[Optional[str], typer.Option("--ic-policy")] = None,
    no_svg: NoSvgOption = False,
) -> int:
    """Run one seeded simulation (run index 0 of the master seed)."""
    try:
        loaded, config = _load(scenario)
        policy = _policy(ic_policy, loaded)
    except ParkloopError as exc:
        return _report_error(exc)

    seed = config.master_seed if seed is None else seed
    outcome = pipeline.run_simulation_job(
        loaded, steps, seed, out or settings.OUTPUT_DIR, policy=policy, render_svg=False if no_svg else None
    )
    if outcome["status"] == RunStatus.COMPLETED:
        console.print(f"run digest [bold]{outcome['result']['digest']}[/bold]")
        _print_bundle(outcome)
    return _finish(outcome)


@app.command()
def ensemble(
    scenario: ScenarioOption = None,
    runs: Annotated[Optional[int], typer.Option("--runs")] = None,
    steps: Annotated[Optional[int], typer.Option("--steps")] = None,
    seed: SeedOption = None,
    out: OutOption = None,
    ic_policy: Annotated[Optional[str], typer.Option("--ic-policy")] = None,
    workers: WorkersOption = None,
    keep_runs: Annotated[bool, typer.Option("--keep-runs", help="Add per-run CSV columns.")] = False,
    no_svg: NoSvgOption = False,
) -> int:
    """Run an ensemble and write per-step mean and std CSVs."""
    try:
        loaded, defaults = _load(scenario)
        config = EnsembleConfig(
            runs=defaults.runs if runs is None else runs,
            steps=defaults.steps if steps is None else steps,
            master_seed=defaults.master_seed if seed is None else seed,
            ic_policy=_policy(ic_policy, loaded),
            keep_runs=keep_runs,
        )
    except ParkloopError as exc:
        return _report_error(exc)
    except ValueError as exc:
        return _report_error(DomainError(str(exc)))

    outcome = pipeline.run_ensemble_job(
        loaded, config, out or settings.OUTPUT_DIR, workers=workers, render_svg=False if no_svg else None
    )
    if outcome["status"] == RunStatus.COMPLETED:
        stats = outcome["result"]["stats"]
        console.print(f"{stats.runs} runs x {stats.steps} steps aggregated")
        _print_bundle(outcome)
    return _finish(outcome)


@app.command("check-stability")
def check_stability(scenario: ScenarioOption = None) -> int:
    """Print per-channel spectral radii and the stability verdict."""
    try:
        loaded, _ = _load(scenario)
        rows = stability_report(loaded)
    except ParkloopError as exc:
        return _report_error(exc)

    table = Table(title="Stability (spectral radius < 1)")
    table.add_column("bank")
    table.add_column("channel", justify="right")
    table.add_column("spectral radius", justify="right")
    table.add_column("verdict")
    for row in rows:
        verdict = "[green]stable[/green]" if row["stable"] else "[red]unstable[/red]"
        table.add_row(row["bank"], str(row["channel"] + 1), f"{row['spectral_radius']:.6g}", verdict)
    console.print(table)

    stable = all(row["stable"] for row in rows)
    console.print("verdict: " + ("[bold green]stable[/bold green]" if stable else "[bold red]unstable[/bold red]"))
    return 0 if stable else 2


@app.command()
def oracle(
    scenario: ScenarioOption = None,
    tolerance: Annotated[Optional[float], typer.Option("--tolerance")] = None,
    max_iter: Annotated[Optional[int], typer.Option("--max-iter", min=1)] = None,
) -> int:
    """Mean-field fixed point: steady-state incentives, errors and counts."""
    try:
        loaded, _ = _load(scenario)
    except ParkloopError as exc:
        return _report_error(exc)

    outcome = pipeline.run_oracle_job(loaded, tolerance, max_iter)
    if outcome["status"] == RunStatus.COMPLETED:
        prediction = outcome["result"]["prediction"]
        table = Table(title=f"Fixed point ({prediction.evaluations} evaluations, residual {prediction.residual:.3g})")
        table.add_column("suburb", justify="right")
        table.add_column("DC gain", justify="right")
        table.add_column("pi*", justify="right")
        table.add_column("e*", justify="right")
        table.add_column("n*", justify="right")
        for j, total in enumerate(prediction.suburb_totals):
            table.add_row(
                str(j + 1),
                f"{prediction.dc_gains[j]:.6g}",
                f"{prediction.incentives[j]:.6f}",
                f"{prediction.errors[j]:.6f}",
                f"{total:.6f}",
            )
        console.print(table)
        for name, row in zip(loaded.profile_names, prediction.expected_counts):
            console.print(f"{name}: " + ", ".join(f"{v:.4f}" for v in row))
    return _finish(outcome)


def _split_policies(text: str, scenario: Scenario) -> List[InitialConditionPolicy]:
    # fixed:<p1>,... vectors contain commas; ";" separates policies when present
    parts = text.split(";") if ";" in text else text.split(",")
    if len(parts) != 2:
        raise DomainError(f"expected two initial-condition policies, got {text!r}")
    return [parse_policy(p, scenario.n_suburbs) for p in parts]


@app.command()
def ergodicity(
    scenario: ScenarioOption = None,
    policies: Annotated[
        str, typer.Option("--policies", help="Two policies, e.g. 'city,suburb-1' (use ';' around fixed: vectors).")
    ] = "city,suburb-1",
    window: Annotated[int, typer.Option("--window")] = 100,
    tolerance: Annotated[float, typer.Option("--tolerance")] = 1.0,
    runs: Annotated[Optional[int], typer.Option("--runs")] = None,
    steps: Annotated[Optional[int], typer.Option("--steps")] = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
) -> int:
    """Compare late-window means of two ensembles that differ only in initial conditions."""
    try:
        loaded, defaults = _load(scenario)
        pair = _split_policies(policies, loaded)
        config = EnsembleConfig(
            runs=defaults.runs if runs is None else runs,
            steps=defaults.steps if steps is None else steps,
            master_seed=defaults.master_seed if seed is None else seed,
        )
    except ParkloopError as exc:
        return _report_error(exc)
    except ValueError as exc:
        return _report_error(DomainError(str(exc)))

    outcome = pipeline.run_ergodicity_job(loaded, config, pair, window, tolerance, workers=workers)
    if outcome["status"] != RunStatus.COMPLETED:
        return _finish(outcome)

    report = outcome["result"]["report"]
    if not report.precondition_ok:
        for bank, channel, radius in report.unstable:
            err_console.print(f"[red]{bank} channel {channel + 1} unstable (spectral radius {radius:.6g})[/red]")
        return 2

    table = Table(title=f"{report.policies[0]} vs {report.policies[1]}, last {report.window} steps")
    table.add_column("quantity")
    table.add_column("difference", justify="right")
    for label, diff in report.differences.items():
        cell = f"{diff:.4f}" if abs(diff) < report.tolerance else f"[red]{diff:.4f}[/red]"
        table.add_row(label, cell)
    console.print(table)
    console.print(report.note)
    console.print(f"max |difference| {report.max_difference:.4f} (tolerance {report.tolerance}): "
                  + ("[bold green]pass[/bold green]" if report.passed else "[bold red]fail[/bold red]"))
    return 0


@app.command()
def paper(
    runs: Annotated[int, typer.Option("--runs", min=1)] = 1000,
    steps: Annotated[int, typer.Option("--steps", min=1)] = 1000,
    seed: Annotated[int, typer.Option("--seed", min=0)] = 0,
    out: OutOption = None,
    workers: WorkersOption = None,
    no_svg: NoSvgOption = False,
) -> int:
    """Built-in two-class reproduction: oracle, ensemble, comparisons and figure data."""
    outcome = pipeline.run_paper_job(
        paper_scenario(),
        paper_config(runs, steps, seed),
        out or settings.OUTPUT_DIR,
        workers=workers,
        render_svg=False if no_svg else None,
    )
    if outcome["status"] == RunStatus.COMPLETED:
        result = outcome["result"]
        comparison = result["comparison"]
        table = Table(title=f"Late window {comparison.window[0]}..{comparison.window[1] - 1} vs oracle")
        table.add_column("suburb", justify="right")
        table.add_column("mean count", justify="right")
        table.add_column("mixture", justify="right")
        table.add_column("n*", justify="right")
        table.add_column("mean error", justify="right")
        table.add_column("mixture error", justify="right")
        table.add_column("e*", justify="right")
        for j in range(len(comparison.mean_counts)):
            table.add_row(
                str(j + 1),
                f"{comparison.mean_counts[j]:.3f}",
                f"{comparison.mixture_counts[j]:.3f}",
                f"{comparison.predicted_counts[j]:.3f}",
                f"{comparison.mean_errors[j]:.3f}",
                f"{comparison.mixture_errors[j]:.3f}",
                f"{comparison.predicted_errors[j]:.3f}",
            )
        console.print(table)
        if result["drift"] is not None:
            console.print(f"max drift of means between the last two windows: {result['drift'].max_drift:.4f}")
        _print_bundle(outcome)
    return _finish(outcome)


@app.command()
def surface(
    profile: Annotated[str, typer.Option("--profile")] = "class_2",
    scenario: ScenarioOption = None,
    low: Annotated[float, typer.Option("--min")] = 0.0,
    high: Annotated[float, typer.Option("--max")] = 10.0,
    points: Annotated[int, typer.Option("--points", min=2)] = 51,
    out: Annotated[Optional[Path], typer.Option("--out")] = None,
) -> int:
    """Choice probabilities of one profile on a pi_1 x pi_2 grid (two-suburb scenarios)."""
    try:
        loaded, _ = _load(scenario)
        matches = [p for p in loaded.profiles if p.name == profile]
        if not matches:
            raise DomainError(f"no profile named {profile!r}; have {loaded.profile_names}")
        grid = np.linspace(low, high, points)
        path = write_surface(matches[0], grid, grid, out or settings.OUTPUT_DIR / f"surface_{profile}.csv")
    except ParkloopError as exc:
        return _report_error(exc)
    console.print(f"wrote {path}")
    return 0


@app.command("dump-scenario")
def dump_scenario_command(
    out: Annotated[Optional[Path], typer.Option("--out", help="File to write; stdout when omitted.")] = None,
) -> int:
    """Write the built-in scenario in canonical YAML form."""
    text = dump_scenario(paper_scenario(), paper_config())
    if out is None:
        sys.stdout.write(text)
        return 0
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    except OSError as exc:
        err_console.print(f"[bold red]error:[/bold red] could not write {out}: {exc.strerror or exc}")
        return 2
    console.print(f"wrote {out}")
    return 0


@app.command()
def version() -> int:
    console.print(f"{TOOL_NAME} {TOOL_VERSION}")
    return 0


def cli(argv: Optional[Sequence[str]] = None) -> int:
    command = typer.main.get_command(app)
    try:
        result = command.main(
            args=list(sys.argv[1:] if argv is None else argv),
            prog_name=TOOL_NAME,
            standalone_mode=False,
        )
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()

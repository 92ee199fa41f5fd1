"""
CSV, SVG and manifest emission for runs and ensembles.

CSV is the contract: column 1 is the step k, then mean and std columns,
then optional per-run columns. Floats carry 17 significant digits and the
manifest has no timestamps, so identical inputs give identical bytes.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import orjson
import pandas as pd
from pydantic import BaseModel

from app.core.config import TOOL_NAME, TOOL_VERSION, settings
from app.core.exceptions import OutputError
from app.core.sim import choice
from app.core.sim.ensemble import EnsembleStats
from app.core.sim.loop import SimulationRun


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SEED_RULE = "Generator(Philox(SeedSequence(master_seed, spawn_key=(run_index,))))"

plt.rcParams["svg.hashsalt"] = TOOL_NAME


class OutputBundle(BaseModel):
    directory: str
    csv_files: List[str]
    svg_files: List[str] = []
    manifest: str


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise OutputError(str(path), exc.strerror or str(exc)) from exc


def _series_frame(stats: EnsembleStats, label: str, with_runs: bool) -> pd.DataFrame:
    mean, std = stats.series(label)
    columns: Dict[str, np.ndarray] = {"step": np.arange(stats.steps), "mean": mean, "std": std}
    runs = stats.runs_of(label) if with_runs else None
    if runs is not None:
        for i, trajectory in enumerate(runs):
            columns[f"run_{i}"] = trajectory
    return pd.DataFrame(columns)


def _counts_frame(stats: EnsembleStats, suburb: str, with_runs: bool) -> pd.DataFrame:
    columns: Dict[str, np.ndarray] = {"step": np.arange(stats.steps)}
    for name in stats.profile_names + ["total"]:
        label = f"total_{suburb}" if name == "total" else f"count_{name}_{suburb}"
        mean, std = stats.series(label)
        columns[f"{name}_mean"] = mean
        columns[f"{name}_std"] = std
    if with_runs and stats.raw is not None:
        for name in stats.profile_names:
            for i, trajectory in enumerate(stats.runs_of(f"count_{name}_{suburb}")):
                columns[f"{name}_run_{i}"] = trajectory
    return pd.DataFrame(columns)


def _band_plot(
    path: Path,
    curves: Sequence[tuple],
    title: str,
    ylabel: str,
) -> None:
    """Mean line and one-sigma band per curve; curves are (label, mean, std)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    try:
        for label, mean, std in curves:
            steps = np.arange(mean.size)
            (line,) = ax.plot(steps, mean, label=label, linewidth=1.0)
            ax.fill_between(steps, mean - std, mean + std, color=line.get_color(), alpha=0.3, linewidth=0)
        ax.set_title(title)
        ax.set_xlabel("time step k")
        ax.set_ylabel(ylabel)
        if len(curves) > 1:
            ax.legend(loc="best")
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OutputError(str(path), exc.strerror or str(exc)) from exc
    finally:
        plt.close(fig)


def write_manifest(path: Path, manifest: dict) -> None:
    try:
        path.write_bytes(
            orjson.dumps(
                manifest,
                option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY,
            )
            + b"\n"
        )
    except OSError as exc:
        raise OutputError(str(path), exc.strerror or str(exc)) from exc


def emit(
    outputs: Union[EnsembleStats, SimulationRun],
    directory: Union[str, Path],
    manifest_extra: Optional[dict] = None,
    render_svg: Optional[bool] = None,
    chunk_runs: Optional[int] = None,
) -> OutputBundle:
    stats = EnsembleStats.from_run(outputs) if isinstance(outputs, SimulationRun) else outputs
    render_svg = settings.RENDER_SVG if render_svg is None else render_svg
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(str(directory), exc.strerror or str(exc)) from exc

    # a single run is already its own mean column
    with_runs = isinstance(outputs, EnsembleStats) and stats.raw is not None
    csv_files, svg_files = [], []
    suburbs = choice.location_names(stats.n_suburbs)[:-1]

    for j, suburb in enumerate(suburbs, start=1):
        name = f"suburb_{j}_counts"
        _write_csv(_counts_frame(stats, suburb, with_runs), directory / f"{name}.csv")
        csv_files.append(f"{name}.csv")
        if render_svg:
            curves = [
                (profile, *stats.series(f"count_{profile}_{suburb}"))
                for profile in stats.profile_names
            ]
            _band_plot(directory / f"{name}.svg", curves, f"Drivers parked in suburb {j}", "drivers")
            svg_files.append(f"{name}.svg")

    for prefix, label_stem, ylabel in (("incentive", "pi", "incentive"), ("error", "e", "vehicles")):
        for j in range(1, stats.n_suburbs + 1):
            name = f"{prefix}_{j}"
            label = f"{label_stem}_{j}"
            _write_csv(_series_frame(stats, label, with_runs), directory / f"{name}.csv")
            csv_files.append(f"{name}.csv")
            if render_svg:
                _band_plot(
                    directory / f"{name}.svg",
                    [(label, *stats.series(label))],
                    f"{prefix.capitalize()} for suburb {j}",
                    ylabel,
                )
                svg_files.append(f"{name}.svg")

    manifest = {
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "scenario_digest": stats.scenario_digest,
        "master_seed": stats.master_seed,
        "runs": stats.runs,
        "steps": stats.steps,
        "ic_policy": stats.policy,
        "chunk_runs": chunk_runs or settings.CHUNK_RUNS,
        "seed_rule": SEED_RULE,
        "std": "sample (n - 1); 0 for a single run",
        "files": sorted(csv_files + svg_files),
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    write_manifest(directory / "manifest.json", manifest)
    logger.info("wrote %d CSV and %d SVG files to %s", len(csv_files), len(svg_files), directory)

    return OutputBundle(
        directory=str(directory),
        csv_files=csv_files,
        svg_files=svg_files,
        manifest="manifest.json",
    )


def write_surface(
    profile: choice.DriverProfile,
    grid_1: Sequence[float],
    grid_2: Sequence[float],
    path: Union[str, Path],
) -> Path:
    """Long-format probability grid: pi_1, pi_2, then one column per location."""
    surface = choice.probability_surface(profile, grid_1, grid_2)
    p1, p2 = np.meshgrid(np.asarray(grid_1, float), np.asarray(grid_2, float), indexing="ij")
    columns = {"pi_1": p1.ravel(), "pi_2": p2.ravel()}
    for index, loc in enumerate(choice.location_names(2)):
        columns[f"p_{loc}"] = surface[..., index].ravel()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(str(path.parent), exc.strerror or str(exc)) from exc
    _write_csv(pd.DataFrame(columns), path)
    return path

import logging
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from app.core.config import settings
from app.core.exceptions import ScenarioValidationError, exit_code_for
from app.core.output import emit
from app.core.sim import ensemble
from app.core.sim.ensemble import EnsembleConfig
from app.core.sim.loop import InitialConditionPolicy, Scenario, ensure_stable, run


class RunStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


class JobStep(str, Enum):
    STABILITY = "stability"
    SIMULATE = "simulate"
    ENSEMBLE = "ensemble"
    ORACLE = "oracle"
    ERGODICITY = "ergodicity"
    EMIT = "emit"


logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class RunLogger:
    """Structured step log for one job, mirrored to the module logger."""

    def __init__(self, job: str):
        self.job = job
        self.start_time = datetime.now()
        self.logs = []

    def log(self, step: Union[JobStep, str], message: str, level: str = "info"):
        step = step.value if isinstance(step, JobStep) else step
        self.logs.append(
            {
                "timestamp": datetime.now().isoformat(),
                "step": step,
                "message": message,
                "level": level,
                "elapsed_seconds": (datetime.now() - self.start_time).total_seconds(),
            }
        )
        getattr(logger, level if level in ("error", "warning") else "info")(
            "[%s] %s: %s", self.job, step, message
        )

    def get_logs(self) -> List[Dict[str, Any]]:
        return self.logs

    def get_summary(self) -> Dict[str, Any]:
        end_time = datetime.now()
        return {
            "job": self.job,
            "start_time": self.start_time.isoformat(),
            "end_time": end_time.isoformat(),
            "duration_seconds": (end_time - self.start_time).total_seconds(),
            "total_logs": len(self.logs),
        }


def _failed(job_logger: RunLogger, step: JobStep, exc: BaseException) -> Dict[str, Any]:
    job_logger.log(step, f"{type(exc).__name__}: {exc}", "error")
    result = {
        "status": RunStatus.FAILED,
        "error": str(exc),
        "exit_code": exit_code_for(exc),
        "logs": job_logger.get_logs(),
    }
    if isinstance(exc, ScenarioValidationError):
        result["errors"] = [err.model_dump() for err in exc.errors]
    return result


def _completed(job_logger: RunLogger, result: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "status": RunStatus.COMPLETED,
        "result": result,
        "exit_code": 0,
        "logs": job_logger.get_logs(),
        "summary": job_logger.get_summary(),
    }


def late_window(steps: int, fraction: float = 0.1) -> Tuple[int, int]:
    width = max(1, int(steps * fraction))
    return steps - width, steps


def run_simulation_job(
    scenario: Scenario,
    steps: int,
    seed: int,
    out: Optional[Path] = None,
    policy: Optional[InitialConditionPolicy] = None,
    render_svg: Optional[bool] = None,
) -> Dict[str, Any]:
    job_logger = RunLogger("simulate")
    step = JobStep.SIMULATE
    try:
        job_logger.log(step, f"{steps} steps, seed {seed}")
        sim = run(scenario, steps, seed, policy=policy)
        result: Dict[str, Any] = {"run": sim, "digest": sim.digest()}
        if out is not None:
            step = JobStep.EMIT
            bundle = emit(sim, out, manifest_extra={"run_digest": sim.digest()}, render_svg=render_svg)
            job_logger.log(step, f"{len(bundle.csv_files)} CSV files in {bundle.directory}")
            result["bundle"] = bundle
        return _completed(job_logger, result)
    except Exception as exc:
        return _failed(job_logger, step, exc)


def run_ensemble_job(
    scenario: Scenario,
    config: EnsembleConfig,
    out: Optional[Path] = None,
    workers: Optional[int] = None,
    render_svg: Optional[bool] = None,
    manifest_extra: Optional[dict] = None,
) -> Dict[str, Any]:
    job_logger = RunLogger("ensemble")
    step = JobStep.ENSEMBLE
    try:
        job_logger.log(step, f"{config.runs} runs x {config.steps} steps, master seed {config.master_seed}")
        stats = ensemble.run_ensemble(scenario, config, workers=workers)
        job_logger.log(step, f"aggregated {stats.runs} runs")
        result: Dict[str, Any] = {"stats": stats}
        if out is not None:
            step = JobStep.EMIT
            result["bundle"] = emit(stats, out, manifest_extra=manifest_extra, render_svg=render_svg)
            job_logger.log(step, f"bundle written to {out}")
        return _completed(job_logger, result)
    except Exception as exc:
        return _failed(job_logger, step, exc)


def run_oracle_job(
    scenario: Scenario,
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> Dict[str, Any]:
    job_logger = RunLogger("oracle")
    try:
        prediction = ensemble.fixed_point(scenario, tolerance, max_iter)
        job_logger.log(
            JobStep.ORACLE,
            f"converged after {prediction.evaluations} evaluations, residual {prediction.residual:.3g}",
        )
        return _completed(job_logger, {"prediction": prediction})
    except Exception as exc:
        return _failed(job_logger, JobStep.ORACLE, exc)


def run_paper_job(
    scenario: Scenario,
    config: EnsembleConfig,
    out: Path,
    workers: Optional[int] = None,
    render_svg: Optional[bool] = None,
) -> Dict[str, Any]:
    """
    End-to-end reproduction: stability gate, mean-field oracle, the ensemble,
    late-window comparison against the oracle, drift between the last two
    windows, and the CSV bundle with all of it recorded in the manifest.
    """
    job_logger = RunLogger("paper")
    step = JobStep.STABILITY
    try:
        ensure_stable(scenario)
        job_logger.log(step, "all controller and filter channels stable")

        step = JobStep.ORACLE
        prediction = ensemble.fixed_point(scenario)
        job_logger.log(step, f"pi* = {prediction.incentives}, e* = {prediction.errors}")

        step = JobStep.ENSEMBLE
        stats = ensemble.run_ensemble(scenario, config, workers=workers)
        job_logger.log(step, f"aggregated {stats.runs} runs x {stats.steps} steps")

        late = late_window(config.steps)
        comparison = ensemble.oracle_comparison(stats, prediction, late)
        level = "info" if comparison.passed else "warning"
        job_logger.log(
            step,
            f"oracle comparison over {late}: passed={comparison.passed}, "
            f"mean-field gap {[round(g, 3) for g in comparison.mean_field_gap]}",
            level,
        )

        drift = None
        width = late[1] - late[0]
        if late[0] - width >= 0:
            drift = ensemble.convergence_of_means(stats, (late[0] - width, late[0]), late)
            level = "info" if drift.passed else "warning"
            job_logger.log(step, f"max drift between windows {drift.max_drift:.3g}", level)

        step = JobStep.EMIT
        extra = {
            "oracle": prediction.model_dump(),
            "oracle_comparison": comparison.model_dump(),
            "convergence_of_means": drift.model_dump() if drift else None,
        }
        if stats.policy == "random-simplex":
            extra["ic_policy_note"] = (
                "the initial probability distribution is unspecified for this "
                "scenario; each profile draws one vector uniformly on the simplex"
            )
        bundle = emit(stats, out, manifest_extra=extra, render_svg=render_svg)
        job_logger.log(step, f"{len(bundle.csv_files)} CSV files in {bundle.directory}")
        return _completed(
            job_logger,
            {
                "stats": stats,
                "prediction": prediction,
                "comparison": comparison,
                "drift": drift,
                "bundle": bundle,
            },
        )
    except Exception as exc:
        return _failed(job_logger, step, exc)


def run_ergodicity_job(
    scenario: Scenario,
    config: EnsembleConfig,
    policies: Sequence[InitialConditionPolicy],
    window: int,
    tolerance: float,
    workers: Optional[int] = None,
) -> Dict[str, Any]:
    job_logger = RunLogger("ergodicity")
    try:
        job_logger.log(
            JobStep.ERGODICITY,
            f"{' vs '.join(p.describe() for p in policies)}, {config.runs} runs each",
        )
        report = ensemble.ergodicity_check(
            scenario, config, policies, window, tolerance, workers=workers
        )
        if not report.precondition_ok:
            job_logger.log(JobStep.STABILITY, "stability precondition violated; nothing was run", "warning")
        else:
            job_logger.log(JobStep.ERGODICITY, f"max difference {report.max_difference:.3g}, passed={report.passed}")
        return _completed(job_logger, {"report": report})
    except Exception as exc:
        return _failed(job_logger, JobStep.ERGODICITY, exc)

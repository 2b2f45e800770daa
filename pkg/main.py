"""MDIQKD toolkit entry point."""
import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from audit import ReproductionLog
from config_manager import ConfigManager, RunConfig
from decoy import KeyResult, ObservedStats, analyze
from errors import (
    ConfigurationError,
    DomainError,
    InfeasibleError,
    PrecisionError,
    ValidationError,
)
from feedback import run_scheduled_session
from logger import get_logger, run_log
from metrics import get_metrics
from photonics import (
    montecarlo_session,
    realize_tables,
    sample_session_tables,
    session_tables_from_blocks,
)
from report import emit_feedback_report, emit_report, load_result
from rng import make_rng
from table_io import export_tables, ingest_tables

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "config" / "config.json"

EXIT_OK = 0
EXIT_ZERO_KEY = 2
EXIT_INVALID = 3
EXIT_NUMERIC = 4

TABLES_FILE = "tables.json"
REPRO_LOG = "reproduction.log"
RUN_LOG = "run.log"
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.json"

logger = get_logger(__name__)


@dataclass
class PipelineOutcome:
    exit_code: int
    result: Optional[KeyResult] = None
    artifacts: Dict[str, Path] = field(default_factory=dict)


def simulate_tables(manager: ConfigManager, seed: int, log: ReproductionLog) -> ObservedStats:
    """Produce one session's tables with the configured engine."""
    spec = manager.session_spec(seed)
    session = manager.config["session"]
    clock_rate = spec.model.channel.clock_rate
    duration = spec.duration
    metrics = get_metrics()
    with metrics.stage("simulate"):
        if manager.engine == "montecarlo":
            n_pulses = int(session["n_pulses"])
            tables = montecarlo_session(spec, n_pulses, workers=int(session.get("workers", 1)))
            duration = n_pulses / clock_rate
            metrics.increment("pulses_simulated", n_pulses)
        elif session.get("use_feedback", True):
            controller = manager.controller_config()
            schedule = run_scheduled_session(spec, manager.drift_model(), controller)
            expected = session_tables_from_blocks(spec, schedule.block_list())
            tables = realize_tables(expected, make_rng(seed, "session"))
            log.record(
                "feedback",
                blocks=len(schedule.blocks),
                calibrations=len(schedule.calibrations),
                duty_cycle=schedule.duty_cycle,
                violations=schedule.violations(controller),
            )
        else:
            tables = sample_session_tables(spec)
    log.record("simulate", engine=manager.engine, seed=seed, duration_s=duration,
               pulses=tables.total_pulses)
    return ObservedStats(
        tables=tables, alice=spec.alice, bob=spec.bob, duration=duration, clock_rate=clock_rate,
        qber_decimals=None,
    )


def _analyze(stats: ObservedStats, manager: ConfigManager, run: RunConfig,
             log: ReproductionLog) -> PipelineOutcome:
    sec = manager.security_params()
    log.record("tables", M_signal=stats.signal_count, E_signal=stats.signal_qber,
               rounded=stats.rounded)
    result = analyze(stats, sec)
    log.record("bounds", M11_lower=result.M11_lower, e11_upper=result.e11_upper,
               estimator=result.estimator)
    log.record("key", K_ec=result.K_ec, K=result.K, rate=result.rate)
    extra = {
        "mode": run.mode,
        "seed": run.seed,
        "duration_s": stats.duration,
        "epsilon_total": sec.epsilon_total,
        "f": sec.f,
    }
    artifacts = emit_report(result, run.output_dir, extra)
    return PipelineOutcome(EXIT_OK if result.K > 0 else EXIT_ZERO_KEY, result, artifacts)


def run_pipeline(run: RunConfig, defaults_path: Path = DEFAULT_CONFIG_PATH) -> PipelineOutcome:
    """Run one mode end to end and write its artifacts to ``run.output_dir``."""
    manager = run.load(defaults_path)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manager.save(out / CONFIG_FILE)
    log = ReproductionLog(out / REPRO_LOG)
    log.record("config", mode=run.mode, seed=run.seed if run.seed is not None else "none",
               overrides=sorted(f"{k}={v}" for k, v in run.overrides.items()))

    with run_log(out / RUN_LOG):
        logger.info("Starting %s run (seed=%s) in %s", run.mode, run.seed, out)
        outcome = _run_mode(run, manager, out, log)
        log.write()
    outcome.artifacts["log"] = log.path
    outcome.artifacts["run_log"] = out / RUN_LOG
    outcome.artifacts["config"] = out / CONFIG_FILE
    get_metrics().write_metrics(out / METRICS_FILE)
    return outcome


def _run_mode(run: RunConfig, manager: ConfigManager, out: Path, log: ReproductionLog) -> PipelineOutcome:
    if run.mode == "feedback-demo":
        spec = manager.session_spec(run.seed or 0)
        controller = manager.controller_config()
        schedule = run_scheduled_session(spec, manager.drift_model(), controller)
        artifacts = emit_feedback_report(schedule, out)
        log.record("feedback", blocks=len(schedule.blocks), calibrations=len(schedule.calibrations),
                   duty_cycle=schedule.duty_cycle, violations=schedule.violations(controller),
                   transmission_fluctuation=schedule.transmission_fluctuation)
        outcome = PipelineOutcome(EXIT_OK, None, artifacts)
    elif run.mode == "report":
        result = load_result(run.input_path)
        log.record("report", K=result.K, rate=result.rate)
        artifacts = emit_report(result, out)
        outcome = PipelineOutcome(EXIT_OK if result.K > 0 else EXIT_ZERO_KEY, result, artifacts)
    elif run.mode == "analyze":
        stats = ingest_tables(run.input_path)
        outcome = _analyze(stats, manager, run, log)
    else:
        stats = simulate_tables(manager, run.seed, log)
        export_tables(stats, out / TABLES_FILE)
        if run.mode == "simulate":
            outcome = PipelineOutcome(EXIT_OK, None, {"tables": out / TABLES_FILE})
        else:
            outcome = _analyze(stats, manager, run, log)
            outcome.artifacts["tables"] = out / TABLES_FILE
    return outcome


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {
        "epsilon": "security.epsilon_total",
        "f": "security.f",
        "lp_cutoff": "security.lp_cutoff",
        "estimator": "security.estimator",
        "cutoff": "model.cutoff",
        "engine": "session.engine",
        "pulses": "session.n_pulses",
        "duration": "session.duration_s",
        "workers": "session.workers",
    }
    overrides: Dict[str, Any] = {
        key: getattr(args, name) for name, key in flags.items() if getattr(args, name, None) is not None
    }
    if getattr(args, "no_feedback", False):
        overrides["session.use_feedback"] = False
        overrides["feedback.enabled"] = False
    if getattr(args, "lp_cross_check", False):
        overrides["security.lp_cross_check"] = True
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file merged over config/config.json")
    common.add_argument("-o", "--output", type=Path, help="output directory (default $MDIQKD_OUTPUT_DIR or ./output)")
    common.add_argument("--seed", type=int)
    common.add_argument("--epsilon", type=float, help="total failure probability")
    common.add_argument("--f", type=float, help="error-correction inefficiency")
    common.add_argument("--cutoff", type=int, help="photon-number cutoff of the model")
    common.add_argument("--lp-cutoff", type=int, dest="lp_cutoff")
    common.add_argument("--estimator", choices=("analytic", "lp"))
    common.add_argument("--lp-cross-check", action="store_true", dest="lp_cross_check")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--engine", choices=("session", "montecarlo"))
    sim.add_argument("--pulses", type=int, help="pulses for the montecarlo engine")
    sim.add_argument("--duration", type=float, help="session duration in seconds")
    sim.add_argument("--workers", type=int)
    sim.add_argument("--no-feedback", action="store_true", dest="no_feedback")

    parser = argparse.ArgumentParser(prog="mdiqkd", description="Decoy-state MDIQKD simulator and key-rate analysis")
    sub = parser.add_subparsers(dest="mode", required=True)
    sub.add_parser("simulate", parents=[common, sim], help="simulate coincidence tables")
    sub.add_parser("pipeline", parents=[common, sim], help="simulate, analyze and report")
    sub.add_parser("feedback-demo", parents=[common, sim], help="drift and feedback time series")
    analyze_p = sub.add_parser("analyze", parents=[common], help="analyze a table file")
    analyze_p.add_argument("input", type=Path)
    report_p = sub.add_parser("report", parents=[common], help="re-render a result.json")
    report_p.add_argument("input", type=Path)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = RunConfig(
            mode=args.mode,
            input_path=getattr(args, "input", None),
            seed=args.seed,
            config_path=args.config,
            overrides=_overrides(args),
        )
        if args.output is not None:
            run.output_dir = args.output
        outcome = run_pipeline(run)
    except (ValidationError, ConfigurationError) as exc:
        logger.error("Invalid input: %s", exc)
        return EXIT_INVALID
    except (PrecisionError, InfeasibleError, DomainError) as exc:
        logger.error("Numerical failure: %s", exc)
        return EXIT_NUMERIC
    if outcome.result is not None:
        print(f"M11 >= {outcome.result.M11_lower:.5g}  e11 <= {outcome.result.e11_upper:.4f}  "
              f"K = {outcome.result.K:.5g} bits  rate = {outcome.result.rate:.2f} bps")
    for kind, path in sorted(outcome.artifacts.items()):
        print(f"{kind}: {path}")
    return outcome.exit_code


if __name__ == '__main__':
    sys.exit(main())

#!/usr/bin/env python3
"""
Command-line front end.

    conformal-kit simulate --dgp 1 --n 500 --d 10 --alpha 0.1 --methods scp,cqr --seed 7
    conformal-kit shift --sigma 1.2 --methods cqr,cqr_shift,wcp
    conformal-kit select | graph | hier | pvalue | decompose [--config run.json] [flags]

Settings resolve as defaults < JSON config < flags. The seed falls back to
CONFORMAL_KIT_SEED (a .env file is honoured). Exit codes: 0 success,
2 configuration error, 1 runtime error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .errors import ConfigurationError, ConformalKitError
from .reports import build_metadata, digest, save_report
from .simulate import (CoverageConfig, GraphExperimentConfig,
                       HierExperimentConfig, HierSpec, MetricsTable, SbmSpec,
                       run_coverage_experiment, run_decompose,
                       run_graph_experiment, run_hier_experiment,
                       run_pvalue_experiment, run_selection_experiment)

logger = logging.getLogger(__name__)

SEED_ENV = "CONFORMAL_KIT_SEED"
REGRESSION_COMMANDS = ("simulate", "shift", "select", "pvalue", "decompose")
COMMANDS = REGRESSION_COMMANDS + ("graph", "hier")

# per-command defaults layered under the JSON config
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "simulate": {},
    "shift": {"sigma": 1.2, "methods": ["scp", "wcp", "cqr", "cqr_shift"]},
    "select": {"dgp": 3, "methods": ["cqr"], "reps": 50},
    "pvalue": {"methods": ["scp", "cqr"], "reps": 2000, "n": 200},
    "decompose": {"methods": ["scp", "wcp", "rlcp", "cqr", "dcp"], "reps": 1},
    "graph": {},
    "hier": {},
}


def _build(cls, payload: Dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {where} settings: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Fully resolved run settings for one subcommand.

    settings holds the driver payload; it is validated by building the
    driver config in __post_init__, before any computation starts.
    """

    command: str
    settings: Dict[str, Any] = field(default_factory=dict)
    out: str = ""
    targets: List[float] = field(default_factory=lambda: [30.0, 40.0, 50.0])

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown subcommand {self.command!r}")
        if not self.out:
            object.__setattr__(self, "out", str(Path("results") / self.command))
        if any(t <= 1 for t in self.targets):
            raise ConfigurationError("bandwidth targets must exceed 1")
        self.driver_config()

    def driver_config(self):
        if self.command == "graph":
            payload = dict(self.settings)
            sbm = _build(SbmSpec, payload.pop("sbm", {}) or {}, "sbm")
            return _build(GraphExperimentConfig, {**payload, "sbm": sbm}, "graph")
        if self.command == "hier":
            payload = dict(self.settings)
            hier = _build(HierSpec, payload.pop("hier", {}) or {}, "hier")
            return _build(HierExperimentConfig, {**payload, "hier": hier}, "hier")
        return CoverageConfig.from_dict(self.settings)

    def to_dict(self) -> Dict[str, Any]:
        config = self.driver_config()
        resolved = config.to_dict() if isinstance(config, CoverageConfig) else asdict(config)
        payload = {"command": self.command, "out": self.out, "settings": resolved}
        if self.command == "select":
            payload["targets"] = list(self.targets)
        return payload

    @classmethod
    def from_dict(cls, command: str, payload: Dict[str, Any]) -> "ExperimentConfig":
        payload = dict(payload)
        out = str(payload.pop("out", "") or "")
        targets = [float(t) for t in payload.pop("targets", [30.0, 40.0, 50.0])]
        return cls(command, payload, out, targets)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _csv_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-kit", description="Conformal prediction experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON config; flags override its values")
    common.add_argument("--alpha", type=float, help="Miscoverage level")
    common.add_argument("--seed", type=int, help=f"Master seed (fallback: ${SEED_ENV})")
    common.add_argument("--reps", type=int, help="Monte-Carlo repetitions")
    common.add_argument("--jobs", type=int, help="Parallel workers for repetitions")
    common.add_argument("--out", type=str, help="Output prefix (default results/<command>)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    regression = argparse.ArgumentParser(add_help=False)
    regression.add_argument("--dgp", type=int, choices=(1, 2, 3), help="Data-generating process")
    regression.add_argument("--n", type=int, help="Calibration size; training uses 2n")
    regression.add_argument("--d", type=int, help="Covariate dimension")
    regression.add_argument("--n-te", dest="n_te", type=int, help="Number of fixed test covariates")
    regression.add_argument("--sigma", type=float, help="Test covariate scale")
    regression.add_argument("--methods", type=_csv_list, help="Comma-separated method names")
    regression.add_argument("--neff", dest="neff_target", type=float, help="Target effective sample size")
    regression.add_argument("--kernel", dest="kernel_family", choices=("gaussian", "boxcar"), help="Kernel family")
    regression.add_argument("--mode", dest="calibration_mode", choices=("fast", "exact"), help="Calibration mode")
    regression.add_argument("--resolution", type=int, help="Grid resolution")
    regression.add_argument("--dgp1-noise", dest="dgp1_noise", choices=("per_coordinate", "aggregate"),
                            help="Noise scale form of model 1")
    regression.add_argument("--lcp-reference", dest="lcp_reference", choices=("calibration", "training"),
                            help="Sample the LCP localized rank is taken against")
    regression.add_argument("--resample-test", dest="resample_test", action="store_true", default=None,
                            help="Draw fresh test covariates every repetition")

    helps = {
        "simulate": "Coverage experiment without covariate shift",
        "shift": "Coverage experiment under covariate shift",
        "select": "Conditional-coverage-oriented model selection",
        "pvalue": "Conformal p-value validity",
        "decompose": "Intrinsic conditional-mismatch diagnostic",
    }
    for name in REGRESSION_COMMANDS:
        sub = subparsers.add_parser(name, parents=[common, regression], help=helps[name])
        if name == "select":
            sub.add_argument("--targets", type=_float_list, help="Bandwidth n_eff targets, e.g. 30,40,50")

    graph = subparsers.add_parser("graph", parents=[common], help="Community-conditional calibration on SBM graphs")
    graph.add_argument("--blocks", type=_int_list, help="Block sizes, e.g. 500,500,500")
    graph.add_argument("--p-in", dest="p_in", type=float, help="Within-block edge probability")
    graph.add_argument("--p-out", dest="p_out", type=float, help="Between-block edge probability")
    graph.add_argument("--noise", dest="noise_scales", type=_float_list, help="Per-block noise scales")
    graph.add_argument("--tests-per-block", dest="tests_per_block", type=int, help="Test nodes per block and repetition")
    graph.add_argument("--detect", action="store_true", default=None, help="Detect communities instead of using planted blocks")
    graph.add_argument("--mode", choices=("fast", "exact"), help="Rank recomputation mode")
    graph.add_argument("--edges", help="Whitespace-separated 0-indexed edge list; replaces the SBM draw")
    graph.add_argument("--nodes", help="Node CSV with a y column and one column per covariate")
    graph.add_argument("--communities", help="Single-column CSV of community ids, one row per node")

    hier = subparsers.add_parser("hier", parents=[common], help="Two-layer hierarchical calibration")
    hier.add_argument("--branches", dest="n_branches", type=int, help="Number of branches K")
    hier.add_argument("--branch-size", dest="branch_size", type=int, help="Observations per branch N")
    hier.add_argument("--kind", choices=("dcp_branch", "cqr_branch"), help="Branch score")
    hier.add_argument("--own-branch", dest="compare_own_branch", action="store_true", default=None,
                      help="Also calibrate on the test branch alone")
    return parser


_SBM_FLAGS = ("blocks", "p_in", "p_out", "noise_scales")
_HIER_FLAGS = ("n_branches", "branch_size")
_NOT_SETTINGS = {"command", "config", "verbose", "out", "targets", "jobs"}


def _load_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return payload


def _env_seed() -> Optional[int]:
    try:
        from dotenv import load_dotenv

        load_dotenv()
    except ImportError:
        pass  # environment variables set manually
    raw = os.getenv(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Layer command defaults, the JSON config, and explicit flags."""
    command = args.command
    payload = dict(COMMAND_DEFAULTS[command])
    payload.update(_load_config(args.config))
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in _NOT_SETTINGS}
    if command == "graph":
        sbm = dict(payload.get("sbm") or {})
        sbm.update({k: flags.pop(k) for k in _SBM_FLAGS if k in flags})
        payload["sbm"] = sbm
    if command == "hier":
        spec = dict(payload.get("hier") or {})
        spec.update({k: flags.pop(k) for k in _HIER_FLAGS if k in flags})
        payload["hier"] = spec
    payload.update(flags)
    if getattr(args, "jobs", None) is not None:
        payload["n_jobs"] = args.jobs
    if args.out:
        payload["out"] = args.out
    if getattr(args, "targets", None):
        payload["targets"] = args.targets
    if "seed" not in payload:
        env_seed = _env_seed()
        if env_seed is not None:
            payload["seed"] = env_seed
    return ExperimentConfig.from_dict(command, payload)


def execute(config: ExperimentConfig) -> MetricsTable:
    driver = config.driver_config()
    runners = {
        "simulate": lambda: run_coverage_experiment(driver),
        "shift": lambda: run_coverage_experiment(driver),
        "select": lambda: run_selection_experiment(driver, config.targets),
        "pvalue": lambda: run_pvalue_experiment(driver),
        "decompose": lambda: run_decompose(driver),
        "graph": lambda: run_graph_experiment(driver),
        "hier": lambda: run_hier_experiment(driver),
    }
    return runners[config.command]()


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        resolved = config.to_dict()
        table = execute(config)
        kernel = resolved["settings"].get("kernel_family", "gaussian")
        save_report(table, config.out, build_metadata(config.command, resolved, __version__, kernel))
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ConformalKitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(digest(config.command, table))
    return 0


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()

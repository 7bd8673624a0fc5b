"""Command-line entry point: run / sweep / check.

Config files are plain `key = value` text: one assignment per line, `#`
comments, dotted keys for nesting. Unknown keys are hard errors. The
FEDMM_SEED environment variable overrides the config seed with the highest
precedence. Exit codes: 0 success, 1 failed checks or failed sweep sub-runs,
2 config errors, 3 optimizer divergence, 4 I/O errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from fedmm.checks import run_builtin_checks
from fedmm.core import ConvergenceError, DivergenceError, HyperParams
from fedmm.federation import (
    ExperimentConfig,
    PartitionMode,
    PartitionSpec,
    ProblemKind,
    RunLog,
    run_experiment,
)
from fedmm.optim import OptimizerKind

EXIT_OK = 0
EXIT_FAILED_CHECKS = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line


def _parse_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"expected an integer, got {raw!r}") from None


def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"expected a number, got {raw!r}") from None


def _parse_steps(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in raw.split(","))
    except ValueError:
        raise ValueError(f"expected an integer or comma list, got {raw!r}") from None


# key -> (group, field, parser); groups: top / hyper / partition
_SCHEMA = {
    "optimizer": ("top", "optimizer", OptimizerKind.parse),
    "problem": ("top", "problem", ProblemKind.parse),
    "problem.file": ("top", "problem_file", str),
    "problem.n_clients": ("top", "quad_n_clients", _parse_int),
    "problem.d1": ("top", "quad_d1", _parse_int),
    "problem.d2": ("top", "quad_d2", _parse_int),
    "problem.n_per_domain": ("top", "toy_n_per_domain", _parse_int),
    "problem.holdout_n": ("top", "toy_holdout_n", _parse_int),
    "seed": ("top", "seed", _parse_int),
    "metrics_every": ("top", "metrics_every", _parse_int),
    "output_path": ("top", "output_path", str),
    "batch_size": ("top", "batch_size", _parse_int),
    "hyper.mu1": ("hyper", "mu1", _parse_float),
    "hyper.mu2": ("hyper", "mu2", _parse_float),
    "hyper.eta1": ("hyper", "eta1", _parse_float),
    "hyper.eta2": ("hyper", "eta2", _parse_float),
    "hyper.eta3": ("hyper", "eta3", _parse_float),
    "hyper.nu": ("hyper", "nu", _parse_float),
    "hyper.local_steps": ("hyper", "local_steps", _parse_steps),
    "hyper.rounds": ("hyper", "rounds", _parse_int),
    "hyper.prox_mu": ("hyper", "prox_mu", _parse_float),
    "hyper.tol": ("hyper", "tol", _parse_float),
    "hyper.local_tol": ("hyper", "local_tol", _parse_float),
    "hyper.local_max_iters": ("hyper", "local_max_iters", _parse_int),
    "partition.mode": ("partition", "mode", PartitionMode.parse),
    "partition.n_clients": ("partition", "n_clients", _parse_int),
    "partition.p": ("partition", "p", _parse_float),
}


def _read_assignments(path: str | Path) -> list[tuple[int, str, str]]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, _, raw = body.partition("=")
        out.append((lineno, key.strip(), raw.strip()))
    return out


def parse_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse and fully validate a config file plus `key=value` overrides."""
    entries = _read_assignments(path)
    for i, item in enumerate(overrides or []):
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        entries.append((None, key.strip(), raw.strip()))

    groups: dict[str, dict] = {"top": {}, "hyper": {}, "partition": {}}
    for lineno, key, raw in entries:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        group, field, parser = _SCHEMA[key]
        try:
            groups[group][field] = parser(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}", lineno) from None

    top = groups["top"]
    if "optimizer" not in top:
        raise ConfigError("missing required key 'optimizer'")
    if "problem" not in top:
        raise ConfigError("missing required key 'problem'")

    try:
        hyper = HyperParams(**groups["hyper"])
        partition = PartitionSpec(**groups["partition"])
        config = ExperimentConfig(hyper=hyper, partition=partition, **top)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    if config.problem_file is not None and not Path(config.problem_file).is_file():
        raise ConfigError(f"problem.file does not exist: {config.problem_file}")

    env_seed = os.environ.get("FEDMM_SEED")
    if env_seed is not None:
        try:
            config = replace(config, seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"FEDMM_SEED must be an integer, got {env_seed!r}") from None
    return config


def _summary_line(log: RunLog, output: str) -> str:
    parts = ["status=ok", f"rounds={len(log.rounds)}"]
    final = log.final()
    if final is not None:
        parts += [
            f"round={final.round}",
            f"phi_grad_norm={'' if final.phi_grad_norm is None else repr(final.phi_grad_norm)}",
            f"consensus_omega={final.consensus_omega!r}",
            f"consensus_psi={final.consensus_psi!r}",
            f"global_loss={final.global_loss!r}",
            f"target_accuracy={'' if final.target_accuracy is None else repr(final.target_accuracy)}",
            f"floats_communicated={final.floats_communicated}",
        ]
    parts.append(f"output={output}")
    return " ".join(parts)


def _write_atomic(path: str, text: str) -> None:
    """Write-then-rename so failures never leave a partial file behind."""
    tmp = Path(f"{path}.tmp")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError:
        try:
            tmp.unlink(missing_ok=True)
        except OSError:
            pass
        raise


def cmd_run(config: ExperimentConfig) -> int:
    try:
        log = run_experiment(config)
    except DivergenceError as e:
        print(f"status=diverged error={e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ConvergenceError as e:
        print(f"status=failed error={e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    try:
        _write_atomic(config.output_path, log.csv_text())
    except OSError as e:
        print(f"status=io_error error={e}", file=sys.stderr)
        return EXIT_IO
    print(_summary_line(log, config.output_path))
    return EXIT_OK


_AXES = ("partition_p", "optimizer", "local_steps")


def _apply_axis(config: ExperimentConfig, axis: str, raw: str) -> ExperimentConfig:
    if axis == "partition_p":
        return replace(config, partition=replace(config.partition, p=float(raw)))
    if axis == "optimizer":
        return replace(config, optimizer=OptimizerKind.parse(raw))
    if axis == "local_steps":
        return replace(config, hyper=replace(config.hyper, local_steps=(int(raw),)))
    raise ConfigError(f"unknown sweep axis {axis!r} (expected one of: {', '.join(_AXES)})")


def cmd_sweep(config: ExperimentConfig, axis: str, values: list[str]) -> int:
    """One run per value, one CSV per run, plus an index CSV of final metrics."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(config.output_path).parent
    index_rows = []
    any_failed = False
    for raw in values:
        sub_path = out_dir / f"sweep_{axis}_{raw}.csv"
        try:
            sub = _apply_axis(config, axis, raw)
            sub = replace(sub, output_path=str(sub_path))
            log = run_experiment(sub)
            _write_atomic(sub.output_path, log.csv_text())
            final = log.final()
            index_rows.append(
                [
                    raw,
                    "ok",
                    str(len(log.rounds)),
                    "" if final is None or final.phi_grad_norm is None else repr(final.phi_grad_norm),
                    "" if final is None else repr(final.consensus_omega),
                    "" if final is None else repr(final.global_loss),
                    ""
                    if final is None or final.target_accuracy is None
                    else repr(final.target_accuracy),
                    "" if final is None else str(final.floats_communicated),
                    "",
                ]
            )
            print(f"sweep {axis}={raw} status=ok output={sub_path}")
        except Exception as e:
            any_failed = True
            index_rows.append([raw, "error", "", "", "", "", "", "", str(e).replace(",", ";")])
            print(f"sweep {axis}={raw} status=error error={e}", file=sys.stderr)

    header = (
        "value,status,rounds,final_phi_grad_norm,final_consensus_omega,"
        "final_global_loss,final_target_accuracy,floats_communicated,error"
    )
    index_text = "\n".join([header] + [",".join(r) for r in index_rows]) + "\n"
    try:
        _write_atomic(str(out_dir / f"sweep_{axis}_index.csv"), index_text)
    except OSError as e:
        print(f"status=io_error error={e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_FAILED_CHECKS if any_failed else EXIT_OK


def cmd_check() -> int:
    ok = run_builtin_checks()
    print(f"status={'ok' if ok else 'failed'}")
    return EXIT_OK if ok else EXIT_FAILED_CHECKS


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmm",
        description="Federated minimax optimization experiments.",
        epilog=(
            "exit codes: 0 success, 1 failed checks/sub-runs, 2 config error, "
            "3 divergence, 4 I/O error. FEDMM_SEED overrides the config seed."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment and write its CSV")
    run_p.add_argument("--config", required=True, help="path to key=value config file")
    run_p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )

    sweep_p = sub.add_parser("sweep", help="run one experiment per axis value")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--axis", required=True, choices=_AXES)
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")
    sweep_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    sub.add_parser("check", help="run the built-in verification suite")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(parse_config(args.config, args.set))
        if args.command == "sweep":
            config = parse_config(args.config, args.set)
            values = [v for v in args.values.split(",") if v != ""]
            return cmd_sweep(config, args.axis, values)
        if args.command == "check":
            return cmd_check()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())

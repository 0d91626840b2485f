"""Command-line entry point.

Subcommands: prepare (corpus files), run (one experiment), sweep (ablation
CSV), account (epsilon table for a DP-SGD schedule), generate-toy (default
config file). Exit codes are stable contracts: 0 success, 2 configuration
error, 3 privacy budget exhaustion, 4 numerical divergence.

Heavy imports are deferred into the command functions so that --threads can
cap BLAS thread pools through the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import BudgetExhaustedError, ConfigError, NumericalError, PhaseError

OUT_ENV_VAR = "DPDISTILL_OUT"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_NUMERIC = 4

_SPLITS = ("train", "val", "test")
_PREPARED_FILES = ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "schema.json")


@dataclass
class RunManifest:
    """Provenance record written next to every command's outputs."""

    config_hash: str
    input_hashes: dict[str, str]
    outputs: dict[str, str]
    tool_version: str
    seeds: dict[str, int]

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "input_hashes": self.input_hashes,
            "outputs": self.outputs,
            "tool_version": self.tool_version,
            "seeds": self.seeds,
        }


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _dict_sha(blob: dict) -> str:
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode("utf-8")).hexdigest()


def _write_json(path: Path, blob: dict) -> None:
    path.write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n")


def write_manifest(path: Path, manifest: RunManifest) -> Path:
    # The manifest cannot list its own hash, so it covers every other file.
    _write_json(path, manifest.to_json())
    return path


def _set_thread_env(n: int) -> None:
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


def _resolve_out(args: argparse.Namespace) -> Path:
    out = getattr(args, "out", None)
    return Path(out or os.environ.get(OUT_ENV_VAR) or "runs")


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(config_path: str, out_dir: Path) -> int:
    from . import pipeline
    from .config import load_config
    from .corpus import save_records

    config = load_config(config_path)
    data = pipeline.prepare_corpus(config.corpus)
    prep_dir = out_dir / "prepared"
    prep_dir.mkdir(parents=True, exist_ok=True)

    outputs: dict[str, str] = {}
    for split in _SPLITS:
        path = prep_dir / f"{split}.jsonl"
        save_records(path, data.records[split], data.schema)
        outputs[path.name] = file_sha256(path)
    _write_json(prep_dir / "vocab.json", data.vocab.to_json())
    outputs["vocab.json"] = file_sha256(prep_dir / "vocab.json")
    _write_json(prep_dir / "schema.json", data.schema.to_json())
    outputs["schema.json"] = file_sha256(prep_dir / "schema.json")

    manifest = RunManifest(
        config_hash=_dict_sha(config.to_json()),
        input_hashes={str(config_path): file_sha256(config_path)},
        outputs=outputs,
        tool_version=__version__,
        seeds={"root": config.seed, "corpus": config.corpus.seed},
    )
    write_manifest(prep_dir / "manifest.json", manifest)
    sizes = {split: len(data.records[split]) for split in _SPLITS}
    print(
        f"prepared {sizes['train']} train / {sizes['val']} val / "
        f"{sizes['test']} test records -> {prep_dir}"
    )
    return EXIT_OK


def _load_prepared(prep_dir: Path, config):
    """Rebuild PreparedData from cmd_prepare's files, tokenizing with the
    run config's l_max so downstream behavior matches an in-memory run."""
    from .corpus import (
        Schema,
        Vocabulary,
        load_records,
        prepend_and_tokenize,
        render_control_code,
    )
    from .pipeline import PreparedData

    missing = [name for name in _PREPARED_FILES if not (prep_dir / name).exists()]
    if missing:
        raise ConfigError(
            f"prepared dataset incomplete under {prep_dir} "
            f"(missing {', '.join(missing)}); run `dpdistill prepare` first"
        )
    schema = Schema.from_json(json.loads((prep_dir / "schema.json").read_text()))
    vocab = Vocabulary.from_json(json.loads((prep_dir / "vocab.json").read_text()))
    records = {
        split: load_records(prep_dir / f"{split}.jsonl", schema) for split in _SPLITS
    }
    total = sum(len(recs) for recs in records.values())
    if total != config.corpus.n_records:
        raise ConfigError(
            f"prepared dataset holds {total} records but corpus.n_records is "
            f"{config.corpus.n_records}; rerun `dpdistill prepare` with this config"
        )
    examples = {
        split: prepend_and_tokenize(recs, schema, vocab, config.corpus.l_max)
        for split, recs in records.items()
    }
    codes = [render_control_code(r, schema, vocab) for r in records["train"]]
    return PreparedData(
        schema=schema, vocab=vocab, records=records, examples=examples, codes=codes
    )


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(config_path: str, out_dir: Path) -> int:
    from . import pipeline
    from .checkpoint import save_params
    from .config import load_config

    config = load_config(config_path)
    prep_dir = out_dir / "prepared"
    data = _load_prepared(prep_dir, config)
    artifacts = pipeline.run_experiment(config, data)

    run_dir = out_dir / config.method
    run_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, str] = {}
    _write_json(run_dir / "report.json", artifacts.report.to_json())
    outputs["report.json"] = file_sha256(run_dir / "report.json")
    pipeline.write_csv(run_dir / "row.csv", [artifacts.report.csv_row()])
    outputs["row.csv"] = file_sha256(run_dir / "row.csv")
    save_params(run_dir / "student.ckpt", artifacts.student)
    outputs["student.ckpt"] = file_sha256(run_dir / "student.ckpt")
    if artifacts.teacher is not None:
        save_params(run_dir / "teacher.ckpt", artifacts.teacher.params)
        outputs["teacher.ckpt"] = file_sha256(run_dir / "teacher.ckpt")

    input_hashes = {str(config_path): file_sha256(config_path)}
    for name in _PREPARED_FILES:
        input_hashes[str(prep_dir / name)] = file_sha256(prep_dir / name)
    manifest = RunManifest(
        config_hash=_dict_sha(config.to_json()),
        input_hashes=input_hashes,
        outputs=outputs,
        tool_version=__version__,
        seeds={"root": config.seed, "corpus": config.corpus.seed},
    )
    write_manifest(run_dir / "manifest.json", manifest)
    report = artifacts.report
    print(
        f"{config.method}: test PPL {report.test_ppl:.3f}, "
        f"spent epsilon {report.total_spent_epsilon:.4f} "
        f"(budget {report.budget.epsilon:g}) -> {run_dir}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _parse_values(text: str, axis: str) -> list:
    tokens = [tok.strip() for tok in text.split(",") if tok.strip()]
    if not tokens:
        raise ConfigError("--values must be a non-empty comma-separated list")
    values = []
    for tok in tokens:
        try:
            value = float(tok)
        except ValueError:
            raise ConfigError(f"--values entry {tok!r} is not a number") from None
        values.append(int(value) if axis == "synthetic_count" else value)
    return values


def cmd_sweep(config_path: str, axis: str, values_text: str, out_dir: Path) -> int:
    from . import pipeline
    from .config import load_config

    config = load_config(config_path)
    values = _parse_values(values_text, axis)
    prep_dir = out_dir / "prepared"
    data = _load_prepared(prep_dir, config)
    rows = pipeline.ablation_sweep(config, axis, values, data)

    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_path = out_dir / f"sweep_{axis}.csv"
    pipeline.write_csv(sweep_path, rows)
    input_hashes = {str(config_path): file_sha256(config_path)}
    for name in _PREPARED_FILES:
        input_hashes[str(prep_dir / name)] = file_sha256(prep_dir / name)
    manifest = RunManifest(
        config_hash=_dict_sha(config.to_json()),
        input_hashes=input_hashes,
        outputs={sweep_path.name: file_sha256(sweep_path)},
        tool_version=__version__,
        seeds={"root": config.seed, "corpus": config.corpus.seed},
    )
    write_manifest(out_dir / f"sweep_{axis}.manifest.json", manifest)
    failures = sum(1 for row in rows if row.get("error"))
    status = f", {failures} row(s) failed" if failures else ""
    print(f"swept {axis} over {len(values)} value(s){status} -> {sweep_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# account
# ---------------------------------------------------------------------------


def cmd_account(q: float, sigma: float, steps: int, delta: float) -> int:
    if not 0 < q <= 1:
        raise ConfigError(f"--q must lie in (0, 1], got {q}")
    if not sigma > 0:
        raise ConfigError(f"--sigma must be positive, got {sigma}")
    if steps < 0:
        raise ConfigError(f"--steps must be non-negative, got {steps}")
    if not 0 < delta < 1:
        raise ConfigError(f"--delta must lie in (0, 1), got {delta}")

    from .accountant import DEFAULT_ORDERS, rdp_step

    if steps == 0:
        # No mechanism ran, so the output is independent of the data and the
        # spend is exactly zero; the generic conversion bound does not apply.
        rdp = [0.0] * len(DEFAULT_ORDERS)
    else:
        rdp = rdp_step(q, sigma, DEFAULT_ORDERS) * steps

    print("order,rdp,epsilon")
    best_order, best_eps = None, math.inf
    for alpha, r in zip(DEFAULT_ORDERS, rdp):
        r = float(r)
        if steps == 0:
            eps = 0.0
        elif not math.isfinite(r):
            eps = math.inf
        else:
            eps = max(
                0.0,
                r
                + math.log1p(-1.0 / alpha)
                - (math.log(delta) + math.log(alpha)) / (alpha - 1.0),
            )
        print(f"{alpha:g},{r:.10g},{eps:.10g}")
        if eps < best_eps:
            best_order, best_eps = alpha, eps
    print(f"minimum,{best_order:g},{best_eps:.10g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate-toy
# ---------------------------------------------------------------------------


def cmd_generate_toy(path: str) -> int:
    from .config import DEFAULT_CONFIG_TOML

    target = Path(path)
    if target.parent != Path(""):
        target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(DEFAULT_CONFIG_TOML)
    print(f"wrote {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--out",
        default=argparse.SUPPRESS,
        help=f"output directory (default: ${OUT_ENV_VAR} or ./runs)",
    )
    common.add_argument(
        "--threads",
        type=int,
        default=argparse.SUPPRESS,
        help="cap BLAS/OpenMP thread pools at this count",
    )
    # No set_defaults here: the common actions are shared with the
    # subparsers, and overwriting their SUPPRESS default would let a bare
    # subcommand erase a root-level --out or --threads.
    parser = argparse.ArgumentParser(
        prog="dpdistill",
        description="Private teacher, synthetic text, distilled student.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"dpdistill {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "prepare", parents=[common], help="generate, split, and tokenize the corpus"
    )
    p.add_argument("config", help="path to a TOML experiment config")

    p = sub.add_parser("run", parents=[common], help="run one experiment end to end")
    p.add_argument("config", help="path to a TOML experiment config")

    p = sub.add_parser(
        "sweep", parents=[common], help="rerun the student across one swept axis"
    )
    p.add_argument("config", help="path to a TOML experiment config")
    p.add_argument("--axis", required=True, help="lambda, temperature, synthetic_count, or alpha")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0,0.4,1.0")

    p = sub.add_parser(
        "account", parents=[common], help="print the epsilon table for a DP-SGD schedule"
    )
    p.add_argument("--q", type=float, required=True, help="sampling rate in (0, 1]")
    p.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p.add_argument("--steps", type=int, required=True, help="number of composed steps")
    p.add_argument("--delta", type=float, required=True, help="target delta in (0, 1)")

    p = sub.add_parser(
        "generate-toy", parents=[common], help="write a default experiment config"
    )
    p.add_argument("--path", default="config.toml", help="destination file")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "prepare":
        return cmd_prepare(args.config, _resolve_out(args))
    if args.command == "run":
        return cmd_run(args.config, _resolve_out(args))
    if args.command == "sweep":
        return cmd_sweep(args.config, args.axis, args.values, _resolve_out(args))
    if args.command == "account":
        return cmd_account(args.q, args.sigma, args.steps, args.delta)
    if args.command == "generate-toy":
        return cmd_generate_toy(args.path)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = getattr(args, "threads", None)
        if threads is not None:
            _set_thread_env(threads)
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExhaustedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.original, BudgetExhaustedError):
            return EXIT_BUDGET
        if isinstance(exc.original, NumericalError):
            return EXIT_NUMERIC
        if isinstance(exc.original, ConfigError):
            return EXIT_CONFIG
        return 1


if __name__ == "__main__":
    sys.exit(main())

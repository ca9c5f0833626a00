"""Command-line entry point: ``stylefl run SPEC`` and ``stylefl compare SPEC``.

Exit status: 0 on success, 2 for an invalid spec or unusable output
directory, 3 when a run hits a numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import ClientState, GlobalPrototypes, personalized_features
from .config import ExperimentSpec, load_spec
from .data import Dataset
from .errors import ConfigError, DomainError
from .federation import METHODS, RoundFailure, RunResult, build_shards, convergence_round, run
from .metrics import wilcoxon_signed_rank
from .server import dump_round

log = logging.getLogger("stylefl")

METRIC_COLUMNS = (
    "round",
    "mean_acc",
    "std_acc",
    "mean_f1",
    "std_f1",
    "brier",
    "loss_ce",
    "loss_pull",
    "loss_shared",
    "loss_server",
    "bytes_up",
    "bytes_down",
    "wall_ms",
)

EXIT_OK, EXIT_SPEC, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# artifacts


def _fmt(value) -> str:
    # repr is the shortest string that round-trips, so reruns compare byte-for-byte
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_metrics_csv(result: RunResult, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for rec in result.evaluations:
            writer.writerow([_fmt(getattr(rec, col)) for col in METRIC_COLUMNS])


def run_summary(result: RunResult) -> dict:
    evals = result.evaluations
    best_acc = max(evals, key=lambda r: r.mean_acc)
    best_f1 = max(evals, key=lambda r: r.mean_f1)
    min_brier = min(evals, key=lambda r: r.brier)
    last = evals[-1]
    return {
        "method": result.config.method,
        "seed": result.config.seed,
        "best_acc": best_acc.mean_acc,
        "best_acc_round": best_acc.round,
        "best_f1": best_f1.mean_f1,
        "best_f1_round": best_f1.round,
        "min_brier": min_brier.brier,
        "min_brier_round": min_brier.round,
        "convergence_round": convergence_round(evals),
        "final": {"round": last.round, "mean_acc": last.mean_acc, "mean_f1": last.mean_f1, "brier": last.brier},
        "bytes_up_total": sum(r.bytes_up for r in result.records),
        "bytes_down_total": sum(r.bytes_down for r in result.records),
    }


def dump_embeddings(clients: Sequence[ClientState], globals_: GlobalPrototypes, path: str | Path) -> int:
    """Write personalized features of every local sample (train then test) as
    CSV with columns ``client_id, label, f0 .. f{d-1}``; returns the row count."""
    path = Path(path)
    rows = 0
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            d = clients[0].dim if clients else 0
            writer.writerow(["client_id", "label", *(f"f{i}" for i in range(d))])
            for state in clients:
                for part in (state.train, state.test):
                    if part is None or len(part) == 0:
                        continue
                    feats = personalized_features(state, part, globals_)
                    for label, row in zip(part.labels, feats):
                        writer.writerow([state.client_id, int(label), *(format(v, ".17g") for v in row)])
                        rows += 1
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc.strerror}") from exc
    return rows


def _prepare_out(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc.strerror}", field="out") from exc


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _execute(spec: ExperimentSpec, seed: int, method: str | None, out: Path, shards=None) -> RunResult:
    cfg = spec.for_seed(seed, method)
    hook = None
    if spec.output.dump_attention and cfg.method != "uniform_average":
        att_dir = out / "attention"
        att_dir.mkdir(parents=True, exist_ok=True)

        def hook(record, result, cp):
            if result is not None:
                dump_round(att_dir / f"round-{record.round:04d}.json", record.round, result, cp)

    result = run(cfg, spec.scenario, shards=shards, on_round=hook)
    write_metrics_csv(result, out / "metrics.csv")
    if spec.output.dump_embeddings:
        dump_embeddings(result.clients, result.globals, out / "embeddings.csv")
    return result


# ---------------------------------------------------------------------------
# commands


def run_experiment(spec: ExperimentSpec) -> dict:
    """Run the spec's method once per seed; returns the summary written to disk."""
    _prepare_out(spec.out_dir)
    runs = []
    for seed in spec.seeds:
        out = spec.out_dir if len(spec.seeds) == 1 else spec.out_dir / f"seed-{seed}"
        out.mkdir(parents=True, exist_ok=True)
        result = _execute(spec, seed, None, out)
        runs.append(run_summary(result))
    summary = dict(runs[0]) if len(runs) == 1 else {"runs": runs}
    summary["config"] = spec.resolved()
    _write_json(spec.out_dir / "summary.json", summary)
    return summary


def _pair_test(a: np.ndarray, b: np.ndarray) -> tuple[float | None, str | None]:
    try:
        return wilcoxon_signed_rank(a, b), None
    except DomainError as exc:
        return None, str(exc)


def compare(spec: ExperimentSpec, methods: Sequence[str]) -> dict:
    """Run every method on identical partitions for each seed and test all pairs."""
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods", field="methods")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}", field="methods")
    _prepare_out(spec.out_dir)
    columns = [f"{m}#{i}" if methods.count(m) > 1 else m for i, m in enumerate(methods)]
    per_client: dict[str, list[float]] = {c: [] for c in columns}
    per_seed: dict[str, list[float]] = {c: [] for c in columns}
    keys: list[tuple[int, int]] = []
    summaries = []
    for seed in spec.seeds:
        fed = spec.for_seed(seed)
        shards = build_shards(spec.scenario, fed.clients, fed.alpha, fed.noise_var, seed)
        for col, method in zip(columns, methods):
            out = spec.out_dir / col.replace("#", "-") / f"seed-{seed}"
            out.mkdir(parents=True, exist_ok=True)
            result = _execute(spec, seed, method, out, shards=shards)
            summaries.append({"column": col, **run_summary(result)})
            last = result.evaluations[-1]
            per_client[col].extend(m["accuracy"] for m in last.client_metrics)
            per_seed[col].append(last.mean_acc)
            if col == columns[0]:
                keys.extend((seed, m["client"]) for m in last.client_metrics)

    with (spec.out_dir / "paired_accuracy.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "client", *columns])
        for i, (seed, client) in enumerate(keys):
            writer.writerow([seed, client, *(_fmt(per_client[c][i]) for c in columns)])

    pairs = []
    for a, b in itertools.combinations(columns, 2):
        x, y = np.array(per_client[a]), np.array(per_client[b])
        p, note = _pair_test(x, y)
        sa, sb = np.array(per_seed[a]), np.array(per_seed[b])
        pairs.append(
            {
                "a": a,
                "b": b,
                "mean_diff": float(x.mean() - y.mean()),
                "seeds_a_ge_b": int((sa >= sb).sum()),
                "seeds": len(sa),
                "wilcoxon_p": p,
                "note": note,
            }
        )
    with (spec.out_dir / "pairs.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["a", "b", "mean_diff", "seeds_a_ge_b", "seeds", "wilcoxon_p"])
        for row in pairs:
            p = "" if row["wilcoxon_p"] is None else _fmt(row["wilcoxon_p"])
            writer.writerow([row["a"], row["b"], _fmt(row["mean_diff"]), row["seeds_a_ge_b"], row["seeds"], p])
    report = {
        "methods": list(columns),
        "seeds": list(spec.seeds),
        "mean_final_acc": {c: float(np.mean(per_seed[c])) for c in columns},
        "per_seed_final_acc": {c: per_seed[c] for c in columns},
        "pairs": pairs,
        "runs": summaries,
        "config": spec.resolved(),
    }
    _write_json(spec.out_dir / "summary.json", report)
    return report


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylefl", description="Style-aware federated prototype learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("spec", help="experiment spec (.toml or .json)")
        p.add_argument("--out", help="output directory (overrides the spec)")
        p.add_argument("--seed", type=int, help="seed (overrides the spec)")
        p.add_argument("--threads", type=int, help="client worker threads")
        p.add_argument("--dump-embeddings", action="store_true", help="write personalized features to embeddings.csv")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one experiment"))
    cmp = sub.add_parser("compare", help="run several methods on the same partitions")
    common(cmp)
    cmp.add_argument("--methods", help="comma-separated method list (default: spec `methods`)")
    return parser


def _apply_flags(spec: ExperimentSpec, args: argparse.Namespace) -> ExperimentSpec:
    if args.threads is not None:
        fed = replace(spec.federation, threads=args.threads)
        fed.validate()
        spec = replace(spec, federation=fed)
    if args.dump_embeddings:
        spec = replace(spec, output=replace(spec.output, dump_embeddings=True))
    return spec


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = _apply_flags(load_spec(args.spec, args.out, args.seed), args)
        if args.command == "run":
            summary = run_experiment(spec)
            print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2, sort_keys=True))
        else:
            methods = args.methods.split(",") if args.methods else list(spec.methods)
            report = compare(spec, [m.strip() for m in methods if m.strip()])
            for pair in report["pairs"]:
                p = "n/a" if pair["wilcoxon_p"] is None else f"{pair['wilcoxon_p']:.4g}"
                print(f"{pair['a']} vs {pair['b']}: mean diff {pair['mean_diff']:+.4f}, "
                      f"{pair['seeds_a_ge_b']}/{pair['seeds']} seeds a>=b, Wilcoxon p = {p}")
    except ConfigError as exc:
        field = f" [{exc.field}]" if exc.field else ""
        print(f"error: invalid spec{field}: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except RoundFailure as exc:
        print(f"error: numeric failure in round {exc.round_index}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry points.

    frontier-sim run <config> [--seed N] [--out DIR]
    frontier-sim sweep <config> --grid <gridfile> [--jobs K] [--out DIR]
    frontier-sim fit <profiling.csv> --op attention|grouped_gemm --out <model>
    frontier-sim eval-cost-model <model> <profiling.csv>
    frontier-sim validate-config <config>

Exit codes: 0 success, 1 configuration/validation problem, 2 runtime failure.
Artifacts are written atomically (temp file + rename). FRONTIER_SIM_LOG sets
the log level.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile

from frontier_sim.config import (
    DeploymentConfig,
    ParseError,
    ValidationError,
    load_config,
    parse_config,
)
from frontier_sim.costmodel.forest import ForestHyperparams
from frontier_sim.costmodel.model import (
    DegenerateTarget,
    EmptyDataset,
    InsufficientData,
    ModelFileError,
    SchemaMismatch,
    eval_model,
    fit_model,
    load_model_file,
    read_profiling_csv,
)
from frontier_sim.metrics import (
    SUMMARY_CSV_HEADER,
    compute_metrics,
    error_cdf_report,
    pareto_frontier,
    summary_csv_row,
)
from frontier_sim.orchestrator import make_simulation
from frontier_sim.topology import TopologyError
from frontier_sim.workload import WorkloadError

log = logging.getLogger("frontier_sim")

CONFIG_ERRORS = (
    ParseError, ValidationError, TopologyError, WorkloadError,
    SchemaMismatch, ModelFileError, InsufficientData, DegenerateTarget,
    EmptyDataset, FileNotFoundError,
)

FIT_SCHEMA_FOR_OP = {"attention": "attention_v1", "grouped_gemm": "grouped_gemm_v1"}


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_one(config: DeploymentConfig) -> dict:
    """Execute one simulation; returns trace, metrics, and identifiers."""
    deployment = config.deployment()
    requests = config.requests()
    attention_model, grouped_model = config.cost_model.load_models()
    sim = make_simulation(
        config.mode, deployment, requests, config.policy,
        af=config.af,
        routing=config.routing,
        seed=config.seed,
        attention_model=attention_model,
        grouped_gemm_model=grouped_model,
    )
    trace = sim.run()
    bundle = compute_metrics(trace, deployment)
    return {
        "config": config,
        "trace": trace,
        "metrics": bundle,
        "config_hash": config.config_hash(),
    }


def _with_seed(config: DeploymentConfig, seed: int) -> DeploymentConfig:
    import dataclasses
    workload = config.workload
    if workload is not None and workload.seed == config.seed:
        workload = dataclasses.replace(workload, seed=seed)
    return dataclasses.replace(config, seed=seed, workload=workload)


def _metrics_document(result: dict) -> dict:
    doc = result["metrics"].to_dict()
    doc["config_hash"] = result["config_hash"]
    doc["seed"] = result["config"].seed
    doc["mode"] = result["config"].mode
    return doc


def _write_run_artifacts(result: dict, out_dir: str) -> dict[str, str]:
    paths = {
        "trace": os.path.join(out_dir, "trace.log"),
        "metrics": os.path.join(out_dir, "metrics.json"),
        "summary": os.path.join(out_dir, "summary.csv"),
    }
    trace_buf = io.BytesIO()
    trace_buf.write(result["trace"].body_bytes())
    trace_buf.write(f"#hash={result['trace'].hash}\n".encode("utf-8"))
    _atomic_write(paths["trace"], trace_buf.getvalue())

    metrics_bytes = (
        json.dumps(_metrics_document(result), sort_keys=True, indent=2) + "\n"
    ).encode("utf-8")
    _atomic_write(paths["metrics"], metrics_bytes)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(SUMMARY_CSV_HEADER)
    writer.writerow(summary_csv_row(result["metrics"], result["config_hash"]))
    _atomic_write(paths["summary"], buf.getvalue().encode("utf-8"))
    return paths


def _print_workload_report(result: dict) -> None:
    summary = result["metrics"].workload_summary
    print("batch_size,avg_input,output,throughput_tokens_per_s_per_gpu")
    print(
        f"{summary['batch_size']},{summary['avg_input_tokens']:g},"
        f"{summary['avg_output_tokens']:g},"
        f"{summary['throughput_tokens_per_s_per_gpu']:.3f}"
    )


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = _with_seed(config, args.seed)
    out_dir = args.out or config.output_dir
    result = run_one(config)
    paths = _write_run_artifacts(result, out_dir)
    _print_workload_report(result)
    log.info("run complete: %s", paths["metrics"])
    return 0


def _grid_points(grid: dict[str, list]) -> list[dict]:
    keys = sorted(grid)
    points = [{}]
    for key in keys:
        values = grid[key]
        if not isinstance(values, list) or not values:
            raise ParseError(f"grid.{key}: expected a non-empty array")
        points = [dict(p, **{key: v}) for p in points for v in values]
    return points


def _apply_overrides(document: dict, overrides: dict) -> dict:
    doc = json.loads(json.dumps(document))  # deep copy
    for dotted, value in overrides.items():
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return doc


def _point_seed(master_seed: int, overrides: dict) -> int:
    canonical = json.dumps(overrides, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(f"{master_seed}:{canonical}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def _sweep_point(document: dict, overrides: dict, master_seed: int, base_dir: str) -> dict:
    point_doc = _apply_overrides(document, overrides)
    point_doc["seed"] = _point_seed(master_seed, overrides)
    # A workload seed that merely mirrored the master seed follows the
    # derived point seed; an explicitly different one is preserved.
    workload = point_doc.get("workload", {})
    if workload.get("seed") == master_seed:
        del workload["seed"]
    config = parse_config(point_doc, base_dir=base_dir)
    result = run_one(config)
    return {
        "overrides": overrides,
        "metrics": result["metrics"],
        "config_hash": result["config_hash"],
    }


def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_config(args.config)  # validates the base document
    base_dir = os.path.dirname(os.path.abspath(args.config))
    document = config.to_document()
    with open(args.grid, encoding="utf-8") as fh:
        grid_doc = json.load(fh)
    grid_node = grid_doc.get("grid")
    if not isinstance(grid_node, dict) or not grid_node:
        raise ParseError(f"{args.grid}: expected an object with a 'grid' mapping")
    points = _grid_points(grid_node)
    out_dir = args.out or config.output_dir

    results: list[dict | None] = [None] * len(points)
    errors: list[str | None] = [None] * len(points)

    def execute(idx: int) -> None:
        try:
            results[idx] = _sweep_point(document, points[idx], config.seed, base_dir)
        except Exception as exc:  # point failures become failed rows
            errors[idx] = f"{type(exc).__name__}: {exc}"

    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(execute, range(len(points))))
    else:
        for idx in range(len(points)):
            execute(idx)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["point", "overrides", "status"] + SUMMARY_CSV_HEADER)
    ok = []
    for idx, point in enumerate(points):
        overrides_json = json.dumps(point, sort_keys=True)
        if results[idx] is not None:
            row = summary_csv_row(results[idx]["metrics"], results[idx]["config_hash"])
            writer.writerow([idx, overrides_json, "ok"] + row)
            ok.append((idx, results[idx]))
        else:
            writer.writerow([idx, overrides_json, f"failed: {errors[idx]}"]
                            + [""] * len(SUMMARY_CSV_HEADER))
            log.warning("sweep point %d failed: %s", idx, errors[idx])
    _atomic_write(os.path.join(out_dir, "sweep.csv"), buf.getvalue().encode("utf-8"))

    frontier = pareto_frontier([(idx, r["metrics"]) for idx, r in ok])
    frontier_doc = [
        {
            "point": idx,
            "overrides": points[idx],
            "throughput_tokens_per_s_per_gpu":
                bundle.throughput_tokens_per_s_per_gpu,
            "tpot_p90_s": bundle.tpot["p90"] if bundle.tpot else None,
        }
        for idx, bundle in frontier
    ]
    _atomic_write(
        os.path.join(out_dir, "frontier.json"),
        (json.dumps(frontier_doc, sort_keys=True, indent=2) + "\n").encode("utf-8"),
    )
    print(f"sweep: {len(ok)}/{len(points)} points succeeded, "
          f"{len(frontier_doc)} on the frontier")
    return 0 if ok else 2


def cmd_fit(args: argparse.Namespace) -> int:
    expected_schema = FIT_SCHEMA_FOR_OP[args.op]
    dataset = read_profiling_csv(args.csv, expected_schema=expected_schema)
    hyperparams = ForestHyperparams(
        n_trees=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf
    )
    model, report = fit_model(dataset, hyperparams, seed=args.seed)
    data = (json.dumps(model.to_document(), sort_keys=True, separators=(",", ":")) + "\n")
    _atomic_write(args.out, data.encode("utf-8"))
    print(f"fit {args.op}: {report.n_train} train / {report.n_holdout} held-out rows")
    for threshold, fraction in sorted(report.holdout_cdf.items()):
        print(f"holdout cdf({threshold:.2f}) = {fraction:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model_file(args.model)
    dataset = read_profiling_csv(args.csv)
    cdf = eval_model(model, dataset)
    for row in error_cdf_report(cdf):
        print(f"cdf({row['threshold']:.2f}) = {row['fraction']:.4f}")
    print(f"median relative error = {cdf.median:.4f}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    print(f"ok: {config.mode} deployment, hash {config.config_hash()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frontier-sim",
        description="Discrete-event simulator for disaggregated and MoE LLM serving",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one deployment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a config grid and report the frontier")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_fit = sub.add_parser("fit", help="fit an operator runtime model from profiling CSV")
    p_fit.add_argument("csv")
    p_fit.add_argument("--op", choices=sorted(FIT_SCHEMA_FOR_OP), required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--trees", type=int, default=100)
    p_fit.add_argument("--max-depth", type=int, default=12)
    p_fit.add_argument("--min-leaf", type=int, default=2)
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval-cost-model", help="evaluate a model file on a CSV")
    p_eval.add_argument("model")
    p_eval.add_argument("csv")
    p_eval.set_defaults(func=cmd_eval)

    p_val = sub.add_parser("validate-config", help="parse and validate a config")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FRONTIER_SIM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

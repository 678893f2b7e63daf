"""Command-line interface.

Subcommands: generate | filter | train | fuse | evaluate | dump.
Every command is deterministic under (seed, config).  Errors print one
`error:<category>: message` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..tpmb import FilterNumericsError, estimate
from .config import (DESK_EVAL_RUNS, DESK_LEARNING_RATE,
                     DESK_PLATEAU_PATIENCE, DESK_TRAIN_STEPS, GROUP_SIZE,
                     ConfigError, load_task)
from .dataset import (DatasetFormatError, append_record, count_records,
                      read_dataset, write_header)
from . import pipeline


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def fmt(value: float) -> str:
    """Stable shortest-repr float formatting for CSV output."""
    return repr(float(value))


def _write_csv(path: Path, header: list[str], rows: list[list]):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating))
                              else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _load_task_args(args) -> "TaskSpec":
    try:
        return load_task(args.scenario, args.task, config_path=args.config)
    except (ConfigError, FileNotFoundError) as err:
        raise CliError("config", str(err))


def cmd_generate(args) -> int:
    task = _load_task_args(args)
    out = Path(args.out)
    total = args.groups * GROUP_SIZE
    start = 0
    if out.exists():
        if args.resume:
            try:
                start = count_records(out)
            except DatasetFormatError as err:
                raise CliError("io", f"cannot resume: {err}")
        elif not args.overwrite:
            raise CliError("usage",
                           f"{out} exists; pass --overwrite or --resume")
    if start >= total and out.exists():
        print(f"dataset already complete ({start} records)")
        return 0
    mode = "ab" if start > 0 else "wb"
    header = {**task.header_dict(), "seed": args.seed,
              "group_size": GROUP_SIZE, "groups": args.groups}
    done = start
    try:
        with open(out, mode) as fh:
            if start == 0:
                write_header(fh, header)
            done = start
            for rec in pipeline.generate_records(task, args.seed, start,
                                                 total, args.workers):
                append_record(fh, rec)
                done += 1
                if done % (10 * GROUP_SIZE) == 0:
                    print(f"group {done // GROUP_SIZE}/{args.groups}",
                          flush=True)
    except OSError as err:
        raise CliError("io", f"group {done // GROUP_SIZE}: {err}")
    print(f"wrote {total - start} records to {out}")
    return 0


def cmd_filter(args) -> int:
    task = _load_task_args(args)
    rng = pipeline._rng_for(args.seed, args.index, pipeline._GEN_TAG)
    run, pmbs = pipeline.run_scenario_and_filters(task, rng)
    payload = {"scenario": task.scenario, "task": task.task,
               "seed": args.seed, "sensors": []}
    for pmb in pmbs:
        ests = estimate(pmb, task.filter_settings)
        payload["sensors"].append({
            "sensor": pmb.sensor_index,
            "num_bernoullis": len(pmb.bernoullis),
            "bernoullis": [
                {"existence": b.existence, "start_time": b.start_time,
                 "max_length": b.max_length,
                 "length_probs": b.length_probs.tolist(),
                 "mean": b.mean.tolist()}
                for b in pmb.bernoullis
            ],
            "estimates": [
                {"start_time": e.start_time, "states": e.states.tolist()}
                for e in ests
            ],
        })
    Path(args.out).write_text(json.dumps(payload, indent=1))
    print(f"wrote filter output to {args.out}")
    return 0


def _load_model(path, need: bool = True):
    from ..fusenet import load_checkpoint
    from ..fusenet.training import CheckpointFormatError

    if path is None:
        if need:
            raise CliError("usage", "a checkpoint is required")
        return None
    try:
        model, _ = load_checkpoint(path)
    except FileNotFoundError as err:
        raise CliError("io", str(err))
    except CheckpointFormatError as err:
        raise CliError("config", str(err))
    return model


def cmd_train(args) -> int:
    import torch

    from ..fusenet import (EmbeddingConfig, FusionModel, NetConfig,
                           TrainConfig, TrainingDiverged, load_checkpoint,
                           save_checkpoint, train)
    from ..fusenet.training import PlateauSchedule

    try:
        header, records = read_dataset(args.data)
    except (FileNotFoundError, DatasetFormatError) as err:
        raise CliError("io", str(err))
    train_records = [pipeline.record_to_train(r) for r in records]
    train_records = [r for r in train_records if len(r) > 0]
    if not train_records:
        raise CliError("config", "dataset contains no nonempty sequences")

    cfg = TrainConfig(steps=args.steps, learning_rate=args.lr,
                      plateau_patience=args.patience,
                      plateau_factor=args.plateau_factor, seed=args.seed)
    torch.manual_seed(args.seed)
    if args.resume:
        model, start_step, optimizer, schedule = load_checkpoint(
            args.resume, with_optimizer=True)
    else:
        emb = EmbeddingConfig(
            max_time=int(header["horizon"]),
            max_traj_index=int(header["horizon"]),
            num_sensors=int(header["num_sensors"]),
            input_dim=int(header["input_dim"]),
            model_dim=args.model_dim,
        )
        net = NetConfig(num_queries=args.queries)
        model = FusionModel(emb, net)
        start_step = 0
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        schedule = PlateauSchedule(cfg.plateau_patience, cfg.plateau_factor,
                                   cfg.min_learning_rate)

    curve_path = Path(args.curve) if args.curve else None
    log_rows = []

    def log(step, loss, lr):
        log_rows.append([step, loss, lr])
        if step % args.log_every == 0:
            print(f"step {step} loss {loss:.4f} lr {lr:.2e}", flush=True)

    try:
        train(model, train_records, cfg, start_step=start_step,
              optimizer=optimizer, schedule=schedule, log_callback=log)
    except TrainingDiverged as err:
        raise CliError("numeric", str(err))
    save_checkpoint(args.out, model, optimizer=optimizer, schedule=schedule,
                    step=cfg.steps)
    if curve_path:
        _write_csv(curve_path, ["step", "loss", "lr"], log_rows)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    task = _load_task_args(args)
    rng = pipeline._rng_for(args.seed, args.index, pipeline._GEN_TAG)
    run, pmbs = pipeline.run_scenario_and_filters(task, rng)
    payload = {"scenario": task.scenario, "task": task.task,
               "seed": args.seed, "methods": {}}
    if args.method in ("bayesian", "both"):
        output, _ = pipeline.bayesian_fusion_for_run(task, run, pmbs)
        payload["methods"]["bayesian"] = [
            {"existence": c.existence, "mean": c.mean.tolist(),
             "cov": c.cov.tolist()} for c in output.components
        ]
    if args.method in ("transformer", "both"):
        model = _load_model(args.checkpoint)
        output, _, _ = pipeline.transformer_fusion_for_run(
            task, run, pmbs, model)
        payload["methods"]["transformer"] = [
            {"existence": c.existence, "mean": c.mean.tolist(),
             "cov": c.cov.tolist()} for c in output.components
        ]
    Path(args.out).write_text(json.dumps(payload, indent=1))
    print(f"wrote fusion output to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    task = _load_task_args(args)
    methods = {"bayesian": ("bayesian",), "transformer": ("transformer",),
               "both": ("bayesian", "transformer")}[args.method]
    model = _load_model(args.checkpoint, need="transformer" in methods)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    def progress(done, total):
        if done % 20 == 0 or done == total:
            print(f"run {done}/{total}", flush=True)

    try:
        results, floors = pipeline.evaluate(
            task, args.seed, args.runs, model=model, methods=methods,
            tune_runs=args.tune_runs, progress=progress)
    except FilterNumericsError as err:
        raise CliError("numeric", str(err))

    rows = []
    for res in results:
        for method in methods:
            m = getattr(res, method)
            rows.append([task.scenario, task.task, method, res.run]
                        + pipeline._method_row(m))
    _write_csv(outdir / "results.csv",
               ["scenario", "task", "method", "run"] + pipeline.METRIC_ROWS,
               rows)

    table = pipeline.mean_table(results)
    summary_rows = []
    for i, metric in enumerate(pipeline.METRIC_ROWS):
        row = [metric]
        for method in ("bayesian", "transformer"):
            row.append(table[method][i] if method in table else "")
        summary_rows.append(row)
    lines = ["metric,bayesian,transformer"]
    for row in summary_rows:
        lines.append(",".join(
            fmt(v) if isinstance(v, (float, np.floating)) else str(v)
            for v in row))
    (outdir / "summary.csv").write_text("\n".join(lines) + "\n")
    _write_csv(outdir / "ppp_floors.csv", ["method", "floor"],
               [[m, floors[m]] for m in methods])
    print(f"wrote results to {outdir}")
    return 0


def cmd_dump(args) -> int:
    from ..dataprep import NormalizationBounds

    try:
        header, records = read_dataset(args.data)
    except (FileNotFoundError, DatasetFormatError) as err:
        raise CliError("io", str(err))
    if not 0 <= args.index < len(records):
        raise CliError("usage", f"record index {args.index} out of range "
                       f"(dataset has {len(records)} records)")
    record = records[args.index]
    task = load_task(record.scenario, record.task, config_path=args.config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    bounds = NormalizationBounds.from_array(record.bounds)

    # (a) local-filter trajectory estimates straight from the record
    local_rows = [
        [int(record.sensors[i]), int(record.times[i]),
         int(record.steps[i])] + [float(v) for v in record.values[i][:4]]
        + [float(record.values[i][-1])]
        for i in range(len(record.times))
    ]
    _write_csv(outdir / "local_estimates.csv",
               ["sensor", "time", "traj_step", "x", "y", "vx", "vy",
                "marginal_existence"], local_rows)

    # (b) ground truth at the final step
    _write_csv(outdir / "truth.csv", ["x", "y", "vx", "vy"],
               [[float(v) for v in row] for row in record.truth])

    # (c) fused predictions with 3-sigma ellipse parameters
    fused_rows = []

    def add_fused(method, output):
        for idx, comp in enumerate(output.components):
            pos_cov = comp.cov[:2, :2]
            eigvals, eigvecs = np.linalg.eigh(pos_cov)
            angle = float(np.arctan2(eigvecs[1, 1], eigvecs[0, 1]))
            fused_rows.append(
                [method, idx, comp.existence]
                + [float(v) for v in comp.mean]
                + [3.0 * float(np.sqrt(max(e, 0.0))) for e in eigvals]
                + [angle])

    attention = None
    if args.method in ("transformer", "both"):
        model = _load_model(args.checkpoint)
        train_rec = pipeline.record_to_train(record)
        from ..fusenet import infer
        output, attention = infer(model, train_rec.values, record.times,
                                  record.steps, record.sensors, bounds,
                                  capture_attention=True)
        add_fused("transformer", output)
    if args.method in ("bayesian", "both"):
        rng = pipeline._rng_for(record.seed, record.index, pipeline._GEN_TAG)
        run, pmbs = pipeline.run_scenario_and_filters(task, rng)
        output, _ = pipeline.bayesian_fusion_for_run(task, run, pmbs)
        add_fused("bayesian", output)
    _write_csv(outdir / "fused.csv",
               ["method", "component", "existence", "x", "y", "vx", "vy",
                "ellipse_minor_3sigma", "ellipse_major_3sigma",
                "ellipse_angle"], fused_rows)

    # (d) decoder cross-attention weights over input positions
    attn_rows = []
    if attention is not None:
        for layer_idx, layer in enumerate(attention.layers):
            for query in range(layer.shape[0]):
                for pos in range(layer.shape[1]):
                    attn_rows.append([layer_idx, query, pos,
                                      float(layer[query, pos])])
    _write_csv(outdir / "attention.csv",
               ["layer", "query", "position", "weight"], attn_rows)
    print(f"wrote dump files to {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modfuse",
        description="multi-sensor multi-object density fusion workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_task_args(p):
        p.add_argument("--scenario", type=int, default=1, choices=(1, 2, 3))
        p.add_argument("--task", type=int, default=1, choices=(1, 2))
        p.add_argument("--config", type=str, default=None,
                       help="path to a scenario YAML overriding the "
                            "packaged one")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="generate a dataset file")
    add_task_args(p)
    p.add_argument("--groups", type=int, required=True,
                   help=f"number of data groups ({GROUP_SIZE} records each)")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("filter", help="run the per-sensor filters once")
    add_task_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("train", help="train the fusion model")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--steps", type=int, default=DESK_TRAIN_STEPS)
    p.add_argument("--lr", type=float, default=DESK_LEARNING_RATE)
    p.add_argument("--patience", type=int, default=DESK_PLATEAU_PATIENCE)
    p.add_argument("--plateau-factor", type=float, default=0.75,
                   help="0.75 reads 'decrease by 1/4' as a quarter off; "
                        "use 0.25 for the multiply-to-a-quarter reading")
    p.add_argument("--model-dim", type=int, default=256)
    p.add_argument("--queries", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve", type=str, default=None,
                   help="write the (step, loss, lr) curve CSV here")
    p.add_argument("--log-every", type=int, default=500)
    p.add_argument("--resume", type=str, default=None,
                   help="checkpoint to continue from")

    p = sub.add_parser("fuse", help="fuse one scenario with either method")
    add_task_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--method", choices=("transformer", "bayesian", "both"),
                   default="bayesian")
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("evaluate", help="Monte Carlo evaluation")
    add_task_args(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--runs", type=int, default=DESK_EVAL_RUNS)
    p.add_argument("--tune-runs", type=int, default=25)
    p.add_argument("--method", choices=("transformer", "bayesian", "both"),
                   default="both")
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("dump", help="emit plot-ready CSV files for a record")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--method", choices=("transformer", "bayesian", "both"),
                   default="transformer")
    p.add_argument("--out", type=str, required=True)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "filter": cmd_filter,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "dump": cmd_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as err:
        print(f"error:{err.category}: {err}", file=sys.stderr)
        return 2
    except FilterNumericsError as err:
        print(f"error:numeric: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: dataset generation, training, evaluation, and
diagnostics.  Exit codes: 0 success, 1 usage error, 2 validation failure,
3 runtime divergence.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checks, io, pipeline, simulate
from .losses import LossError
from .pipeline import CrowdCounter, PipelineError, TrainingDiverged
from .simulate import DatasetError, SimConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_root(path):
    root = os.environ.get("VIEWSYNC_OUT", ".")
    p = Path(path)
    return p if p.is_absolute() else Path(root) / p


def _print_effective_config(name, config):
    print(f"# effective config ({name})")
    print(json.dumps(config, indent=1, default=str))


def build_parser():
    parser = _Parser(prog="viewsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file of SimConfig overrides")
    g.add_argument("--mode", choices=["constant", "random"], default="random")
    g.add_argument("--tau", type=float, nargs="+",
                   help="per non-reference-view constant offsets (s)")
    g.add_argument("--kappa", type=float, nargs="+",
                   help="per non-reference-view random-offset bounds (s)")
    g.add_argument("--views", type=int, default=3)
    g.add_argument("--frames", type=int, default=40)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-sync", action="store_true",
                   help="omit synchronized counterpart frames")
    g.add_argument("--gt-mode", choices=["reference", "unsync_average"],
                   default="reference")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", required=True, help="experiment config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--log", help="loss-log output path (JSON lines)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="metrics output path (JSON)")

    d = sub.add_parser("demo-sync", help="dump sync visualizations for one frame")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--frame", type=int, default=0)
    d.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="plot a training loss log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run the oracle check suites")
    return parser


def cmd_gen_data(args):
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    params = args.tau if args.mode == "constant" else args.kappa
    if params is None:
        params = (3.0,) * (args.views - 1) if args.mode == "random" else (3.0, -3.0)
    config = SimConfig(**{**dict(
        n_views=args.views, n_frames=args.frames, mode=args.mode,
        desync_params=tuple(params), seed=args.seed,
        include_sync=not args.no_sync, gt_mode=args.gt_mode), **overrides})
    out = _out_root(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DatasetError(f"output directory {out} is not empty (use --force)")
    _print_effective_config("gen-data", asdict(config))
    dataset = simulate.generate_dataset(config)
    simulate.export_dataset(dataset, out)
    sched = dataset.schedule
    print(f"dataset written to {out}")
    print(f"views={dataset.n_views} frames={dataset.n_frames} mode={sched.mode} "
          f"dt={sched.frame_interval}s params={list(params)} "
          f"sync_pairs={dataset.sync_frames is not None}")
    return 0


def _counter_from_config(doc) -> CrowdCounter:
    known = {k: doc[k] for k in CrowdCounter._params if k in doc}
    unknown = set(doc) - set(CrowdCounter._params)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return CrowdCounter(**known)


def cmd_train(args):
    doc = json.loads(Path(args.config).read_text())
    dataset = simulate.ingest_dataset(args.data)
    counter = _counter_from_config(doc)
    if counter.n_views != dataset.n_views:
        raise PipelineError(
            f"config expects {counter.n_views} views, dataset has {dataset.n_views}")
    _print_effective_config("train", counter.get_params())
    if args.resume:
        model, _ = io.load_checkpoint(args.resume)
        counter.model_ = model
    else:
        counter.build(dataset.cameras, dataset.scene)
    log_path = _out_root(args.log) if args.log else None
    log_fh = open(log_path, "w") if log_path else None
    try:
        counter.fit(dataset, log=(lambda rec: print(json.dumps(rec), file=log_fh))
                    if log_fh else None)
    finally:
        if log_fh:
            log_fh.close()
    out = _out_root(args.out)
    io.save_checkpoint(out, counter.model_)
    final = counter.history_[-1]
    print(f"checkpoint written to {out} (final loss {final['total']:.6g})")
    return 0


def cmd_eval(args):
    model, manifest = io.load_checkpoint(args.checkpoint)
    dataset = simulate.ingest_dataset(args.data)
    metrics = pipeline.evaluate(model, dataset)
    variant = manifest["config"]["variant"]
    mode = dataset.schedule.mode
    print(f"{'variant':10s} {'latency':10s} {'MAE':>8s} {'NAE':>8s}")
    print(f"{variant:10s} {mode:10s} {metrics['MAE']:8.3f} {metrics['NAE']:8.3f}")
    if args.out:
        records = [{"frame": k, "pred": p, "gt": g}
                   for k, (p, g) in enumerate(zip(metrics["pred_counts"],
                                                  metrics["gt_counts"]))]
        _out_root(args.out).write_text(json.dumps(
            {"variant": variant, "mode": mode, "MAE": metrics["MAE"],
             "NAE": metrics["NAE"], "frames": records}, indent=1))
    return 0


def cmd_demo_sync(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .sync import flow_to_rgb

    model, _ = io.load_checkpoint(args.checkpoint)
    dataset = simulate.ingest_dataset(args.data)
    k = args.frame
    if not 0 <= k < dataset.n_frames:
        raise DatasetError(f"frame {k} out of range (0..{dataset.n_frames - 1})")
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = [dataset.frames[i, k] for i in range(dataset.n_views)]
    import torch
    model.eval()
    with torch.no_grad():
        result = model(frames)
    density = result["density"].numpy()
    for i, frame in enumerate(frames):
        plt.imsave(out / f"input_view_{i}.png", frame, cmap="gray")
    for i, flow in result["flows"].items():
        plt.imsave(out / f"flow_view_{i}.png", flow_to_rgb(flow))
        io.write_flow_dump(out / f"flow_view_{i}.f32", flow,
                           (model.config.reference_view, i))
    plt.imsave(out / "density_pred.png", density, cmap="viridis")
    plt.imsave(out / "density_gt.png", dataset.gt[k], cmap="viridis")
    print(f"frame {k}: predicted count {density.sum():.2f}, "
          f"gt count {dataset.counts[k]:.2f}")
    print(f"artifacts written to {out}")
    return 0


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = [json.loads(line) for line in Path(args.log).read_text().splitlines()
               if line.strip()]
    if not records:
        raise DatasetError(f"empty loss log {args.log}")
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots()
    ax.semilogy(steps, [r["total"] for r in records], label="total")
    ax.semilogy(steps, [r["task"] for r in records], label="task")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.savefig(_out_root(args.out), dpi=120)
    print(f"plot written to {args.out}")
    return 0


def cmd_selftest(args):
    ok = checks.run_selftest()
    print("selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "demo-sync": cmd_demo_sync, "plot": cmd_plot, "selftest": cmd_selftest,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, PipelineError, LossError, io.CheckpointError,
            ValueError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: synth / train / eval / diag / bench / plot. Every command is
deterministic given its flags and seed (bench timings excepted). Exit codes:
0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import diagnostics, evaluation
from .eome import attention_cost
from .scenesynth import synth_scene, write_dataset, read_dataset, DatasetError
from .trainer import (TrainConfig, train_teacher, train_student,
                      save_checkpoint, load_checkpoint, CheckpointError)

REPORT_SCHEMA_VERSION = 1

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _sanitize(obj):
    """JSON-safe copy: non-finite floats become explicit string sentinels."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if f != f:
            return "NaN"
        if f == float("inf"):
            return "Infinity"
        if f == float("-inf"):
            return "-Infinity"
        return f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_report(path, payload):
    payload = dict(payload)
    payload["schema_version"] = REPORT_SCHEMA_VERSION
    payload["timestamp"] = datetime.now(timezone.utc).isoformat()
    with open(path, "w") as f:
        json.dump(_sanitize(payload), f, indent=1, sort_keys=True)


def _load_config(path):
    if path is None:
        return TrainConfig()
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))


def cmd_synth(args):
    samples = [
        synth_scene(args.seed + i, args.size, args.classes, args.pols,
                    tau=args.tau, octaves=args.octaves,
                    cloud_gain=args.cloud_gain)
        for i in range(args.count)
    ]
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    samples = read_dataset(args.data)
    if args.role == "teacher":
        model, opt, history = train_teacher(samples, cfg,
                                            log_every=args.log_every)
    else:
        if not args.teacher:
            raise UsageError("--teacher is required for --role student")
        teacher, _, tcfg, _, trole = load_checkpoint(args.teacher)
        model, opt, history = train_student(samples, teacher, cfg,
                                            log_every=args.log_every)
    save_checkpoint(model, opt, cfg, cfg.steps, args.out, role=args.role)
    print(f"{args.role} trained for {cfg.steps} steps; "
          f"final loss {history[-1]:.5f}; checkpoint at {args.out}")
    return 0


def cmd_eval(args):
    samples = read_dataset(args.data)
    if args.oracle_gt:
        cfg = _load_config(args.config)
        predict = evaluation.oracle_predictor(cfg.num_classes)
        num_classes = cfg.num_classes
        chash = "oracle-gt"
    else:
        if not args.ckpt:
            raise UsageError("either --ckpt or --oracle-gt is required")
        model, _, cfg, _, _ = load_checkpoint(args.ckpt)
        predict = evaluation.model_predictor(model)
        num_classes = cfg.num_classes
        chash = _config_hash(cfg)
    wanted = args.subsets.split(",")
    bad = set(wanted) - set(evaluation.SUBSETS)
    if bad:
        raise UsageError(f"unknown subsets: {sorted(bad)}")
    blocks = evaluation.evaluate_dataset(samples, predict, num_classes,
                                         bins=args.bins)
    report = {
        "command": "eval",
        "dataset": args.data,
        "config_hash": chash,
        "num_samples": len(samples),
        "subsets": {s: blocks[s] for s in wanted},
    }
    _write_report(args.report, report)
    print(f"eval report written to {args.report}")
    return 0


def cmd_diag(args):
    import torch

    samples = read_dataset(args.data)
    model, _, cfg, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    probes = args.probes.split(",")

    feats = {p: [] for p in probes}
    logits_rows = []
    dumped = False
    os.makedirs(args.dump_dir, exist_ok=True)
    for sample in samples:
        opt = torch.from_numpy(sample.cloudy_opt).double().permute(2, 0, 1)[None]
        sar = torch.from_numpy(sample.sar).double().permute(2, 0, 1)[None]
        with torch.no_grad():
            out = model(opt, sar)
        for p in probes:
            if p not in out.probes:
                raise UsageError(f"unknown probe '{p}'; "
                                 f"available: {sorted(out.probes)}")
            t = out.probes[p][0]  # [C, H', W']
            feats[p].append(t.reshape(t.shape[0], -1).T.numpy())
        logits_rows.append(
            out.logits[0].reshape(out.logits.shape[1], -1).T.numpy())
        if not dumped:
            for i, gate in enumerate(out.gates, start=1):
                if gate is None:
                    continue
                for name, tensor in (("D", gate.D), ("A", gate.A),
                                     ("R_opt", gate.R_opt)):
                    arr = tensor[0].numpy().astype("<f4")
                    arr.tofile(os.path.join(args.dump_dir,
                                            f"stage{i}_{name}.f32"))
            dumped = True

    records = {}
    for p in probes:
        x = np.concatenate(feats[p])
        st = diagnostics.erank(x)
        records[p] = {
            "channels": x.shape[1],
            "erank": st.erank,
            "nerank": st.nerank,
            "entropy": st.entropy,
            "sparsity": st.sparsity,
        }
    logits = np.concatenate(logits_rows)
    cka = {}
    for p in probes:
        x = np.concatenate(feats[p])
        if x.shape[0] == logits.shape[0]:  # same spatial resolution as logits
            cka[p] = diagnostics.linear_cka(x, logits)
    report = {
        "command": "diag",
        "dataset": args.data,
        "config_hash": _config_hash(cfg),
        "probes": records,
        "cka_with_logits": cka,
        "dchf_dump_dir": args.dump_dir,
    }
    _write_report(args.report, report)
    print(f"diag report written to {args.report}")
    return 0


def cmd_bench(args):
    import torch

    model, _, cfg, _, _ = load_checkpoint(args.ckpt)
    model.eval()

    def forward(batch, size):
        opt = torch.zeros(batch, 4, size, size, dtype=torch.float64)
        sar = torch.zeros(batch, cfg.sar_pols, size, size, dtype=torch.float64)
        with torch.no_grad():
            model(opt, sar)

    counts = {}
    for stage, stride in (("stage3", 16), ("stage4", 32)):
        h = max(args.input_size // stride, cfg.window)
        counts[stage] = {
            "dense": attention_cost(h, h, mode="dense"),
            "carrier": attention_cost(h, h, window=cfg.window, mode="carrier"),
        }
    rec = diagnostics.throughput_bench(
        forward, args.input_size, args.batch, args.warmup, args.iters,
        parameter_count=model.parameter_count(),
        interaction_counts=counts)
    report = {"command": "bench", "config_hash": _config_hash(cfg)}
    report.update(rec.to_dict())
    _write_report(args.report, report)
    print(f"bench report written to {args.report} "
          f"({rec.throughput_img_s:.2f} img/s)")
    return 0


def _desanitize(v):
    if v == "NaN":
        return float("nan")
    if v == "Infinity":
        return float("inf")
    if v == "-Infinity":
        return float("-inf")
    return v


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(args.out, exist_ok=True)
    reports = []
    for path in args.report:
        with open(path) as f:
            reports.append((path, json.load(f)))

    produced = []
    for path, rep in reports:
        if rep.get("command") != "eval":
            continue
        stem = os.path.splitext(os.path.basename(path))[0]
        for subset, block in rep.get("subsets", {}).items():
            curve = block.get("residual_curve") or []
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.axhline(0.0, color="gray", lw=0.8)
            if curve:
                xs = [c[0] for c in curve]
                ys = [_desanitize(c[1]) for c in curve]
                ax.plot(xs, ys, marker="o")
            ax.set_xlabel("confidence")
            ax.set_ylabel("accuracy - confidence")
            ax.set_title(f"residual calibration ({subset})")
            ax.set_xlim(0, 1)
            out = os.path.join(args.out, f"{stem}_residual_{subset}.svg")
            fig.savefig(out)
            plt.close(fig)
            produced.append(out)

    # throughput-vs-mIoU scatter: pair eval and bench reports by config hash
    points = []
    for _, rep in reports:
        if rep.get("command") != "eval":
            continue
        miou = _desanitize(rep.get("subsets", {}).get("all", {}).get("miou"))
        if miou is None:
            continue
        for _, other in reports:
            if (other.get("command") == "bench"
                    and other.get("config_hash") == rep.get("config_hash")):
                points.append((other["throughput_img_s"], miou,
                               other.get("parameter_count", 0)))
    if points:
        fig, ax = plt.subplots(figsize=(4, 3))
        for thrp, miou, nparam in points:
            ax.scatter(thrp, miou, s=20 + nparam / 5e4)
        ax.set_xlabel("throughput (img/s)")
        ax.set_ylabel("mIoU")
        ax.set_title("efficiency vs accuracy")
        out = os.path.join(args.out, "throughput_vs_miou.svg")
        fig.savefig(out)
        plt.close(fig)
        produced.append(out)

    print(f"wrote {len(produced)} plot files to {args.out}")
    return 0


class UsageError(Exception):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="edc",
                                description="cloud-resilient optical-SAR "
                                            "segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--pols", type=int, default=2, choices=(1, 2))
    s.add_argument("--tau", type=float, default=0.3)
    s.add_argument("--octaves", type=int, default=3)
    s.add_argument("--cloud-gain", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a teacher or student model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None,
                   help="flat JSON file of training config keys")
    t.add_argument("--out", required=True)
    t.add_argument("--role", choices=("teacher", "student"), required=True)
    t.add_argument("--teacher", default=None,
                   help="teacher checkpoint (required for --role student)")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--subsets", default="all,clear,cloudy")
    e.add_argument("--report", required=True)
    e.add_argument("--bins", type=int, default=diagnostics.DEFAULT_BINS)
    e.add_argument("--oracle-gt", action="store_true",
                   help="testing mode: echo ground truth as the prediction")
    e.add_argument("--config", default=None,
                   help="config for --oracle-gt (class count)")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diag", help="representation diagnostics")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--probes", default="stage4_cm,cm_decoder_out")
    d.add_argument("--report", required=True)
    d.add_argument("--dump-dir", default="diag_dump")
    d.set_defaults(fn=cmd_diag)

    b = sub.add_parser("bench", help="throughput and cost measurement")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--input-size", type=int, default=160)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--report", required=True)
    b.set_defaults(fn=cmd_bench)

    g = sub.add_parser("plot", help="render report plots as SVG")
    g.add_argument("--report", action="append", required=True,
                   help="report file (repeatable)")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    threads = os.environ.get("EDC_NUM_THREADS")
    if threads:
        import torch
        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ValueError) as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``panet {train,quantize,export,eval,analyze,bench}``.

Exit codes: 0 success, 1 runtime failure (missing data, bad files),
2 invalid arguments, 3 a requested verification failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

log = logging.getLogger("panet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3
DATASET_FORMATS = {"mnist": "idx", "cifar10": "cifar-binary"}
DEFAULT_ARCH = {"mnist": "lenet", "cifar10": "resnet20"}


class UsageError(Exception):
    pass


def _even_m(text):
    m = int(text)
    if m < 2 or m % 2:
        raise argparse.ArgumentTypeError(f"M must be an even integer >= 2, got {m}")
    return m


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _int_list(text):
    return tuple(int(t) for t in text.split(",") if t)


def _add_data_args(p, required=True):
    p.add_argument("--dataset", choices=sorted(DATASET_FORMATS), required=required)
    p.add_argument("--data", help="dataset directory (default: $PA_MNIST_DIR or $PA_CIFAR_DIR)")
    p.add_argument("--limit", type=_positive_int, help="use only the first LIMIT examples of each split")


def _add_scheme_args(p):
    p.add_argument("--M", type=_even_m, default=None, help="weight pieces (even)")
    p.add_argument("--N", type=_positive_int, default=None, help="activation pieces")
    p.add_argument("--lambda-w", type=float, default=1.0)
    p.add_argument("--lambda-a", type=float, default=1.0)
    p.add_argument("--lambda-delta", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panet", description="Piecewise-binarized CNN toolkit")
    ap.add_argument("--threads", type=_positive_int, help="worker threads for bitwise kernels (sets PA_THREADS)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_data_args(p)
    p.add_argument("--arch", choices=["lenet", "resnet20"])
    _add_scheme_args(p)
    p.add_argument("--real", action="store_true", help="train the full-precision twin")
    p.add_argument("--channels", type=_int_list, help="LeNet conv widths, e.g. 8,16")
    p.add_argument("--width", type=_positive_int, help="ResNet-20 base width")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--optimizer", choices=["sgd-momentum", "adam"], default="sgd-momentum")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true", help="random flip and crop (CIFAR)")
    p.add_argument("--pretrained", help="initialize from a real-valued checkpoint")
    p.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="JSON-lines metrics path")

    p = sub.add_parser("quantize", help="export a checkpoint in quantized form")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=["pa"], help="binarize a real-valued checkpoint")
    _add_scheme_args(p)
    _add_data_args(p, required=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=_positive_int, default=32)
    p.add_argument("--hist-csv", help="write histograms as CSV")

    p = sub.add_parser("export", help="export an already quantized checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="top-1/top-5 accuracy of a checkpoint or export")
    p.add_argument("model")
    _add_data_args(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--batch-size", type=_positive_int, default=500)
    p.add_argument("--verify", action="store_true", help="cross-check binarized layers with the bitwise kernel")
    p.add_argument("--json", help="write the accuracy report here")

    p = sub.add_parser("analyze", help="memory / Flops / latency report")
    p.add_argument("--arch", required=True)
    p.add_argument("--scheme", choices=["full", "single-binary", "multi-binary", "abc"], default="multi-binary")
    p.add_argument("--M", type=_positive_int, default=4)
    p.add_argument("--N", type=_positive_int, default=5)
    p.add_argument("--downsampling-real", action="store_true")
    p.add_argument("--worst-case-reduction", action="store_true")
    p.add_argument("--compare", action="store_true", help="all schemes side by side")
    p.add_argument("--format", choices=["text", "json", "csv"], default="text")
    p.add_argument("--gates", help="JSON file overriding gate timings")
    p.add_argument("--out")

    p = sub.add_parser("bench", help="time packed kernels against naive loops")
    p.add_argument("--sizes", type=_int_list, default=(0, 1024, 1 << 16, 1 << 18))
    p.add_argument("--repeat", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    return ap


# ---------------------------------------------------------------- helpers

def _data_dir(args) -> str:
    if args.data:
        return args.data
    env = "PA_MNIST_DIR" if args.dataset == "mnist" else "PA_CIFAR_DIR"
    if os.environ.get(env):
        return os.environ[env]
    raise UsageError(f"no dataset directory: pass --data or set {env}")


def _load_split(args, split):
    from .nn.data import ingest_dataset

    d = ingest_dataset(_data_dir(args), DATASET_FORMATS[args.dataset], split)
    if args.limit:
        return d.x[:args.limit], d.y[:args.limit]
    return d.x, d.y


def _scheme_kwargs(args, arch_id):
    defaults = {"lenet": (8, 7), "resnet20": (4, 5)}[arch_id]
    return dict(M=args.M or defaults[0], N=args.N or defaults[1], lambda_W=args.lambda_w,
                lambda_A=args.lambda_a, lambda_delta=args.lambda_delta)


def _is_export(path) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == b"PAQ1"


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    from .nn.checkpoint import load_checkpoint, load_pretrained, save_checkpoint
    from .nn.data import flip_crop
    from .nn.models import lenet, resnet20
    from .nn.train import Optimizer, TrainConfig, config_dict, train

    arch_id = args.arch or DEFAULT_ARCH[args.dataset]
    cfg = TrainConfig(lr=args.lr, decay=args.decay, optimizer=args.optimizer, momentum=args.momentum,
                      batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    x_tr, y_tr = _load_split(args, "train")
    x_te, y_te = _load_split(args, "test")
    start = 0
    if args.resume:
        net, meta, opt_state = load_checkpoint(args.resume)
        opt = Optimizer(cfg)
        opt.state, start = opt_state, meta["epoch"]
        opt.lr, opt.t = meta["optimizer"]["lr"], meta["optimizer"]["t"]
    else:
        kw = _scheme_kwargs(args, arch_id)
        kw.update(quantized=not args.real, seed=args.seed)
        if arch_id == "lenet":
            if args.channels:
                kw["channels"] = args.channels
            net = lenet(**kw)
        else:
            if args.width:
                kw["width"] = args.width
            net = resnet20(**kw)
        opt = Optimizer(cfg)
        if args.pretrained:
            load_pretrained(net, args.pretrained, x_tr[:cfg.batch_size * 4])
    if net.input_shape != x_tr.shape[1:]:
        raise UsageError(f"architecture {arch_id} expects inputs {net.input_shape}, dataset has {x_tr.shape[1:]}")

    def checkpoint(epoch, net, opt):
        save_checkpoint(args.out, net, opt, epoch, {"train_config": config_dict(cfg)})

    hist = train(net, x_tr, y_tr, cfg, x_te, y_te, metrics_path=args.metrics,
                 augment=flip_crop if args.augment else None, start_epoch=start, optimizer=opt,
                 on_epoch=checkpoint)
    if not hist:
        checkpoint(start, net, opt)
    for row in hist:
        print(json.dumps(row))
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .export import export_model, format_histograms, histograms_csv, weight_histograms
    from .nn.checkpoint import load_checkpoint, load_pretrained
    from .nn.models import build

    net, meta, _ = load_checkpoint(args.checkpoint)
    if not net.arch.get("quantized"):
        if not args.scheme:
            raise UsageError(f"{args.checkpoint} holds a real-valued network; pass --scheme pa to binarize it")
        if not args.dataset:
            raise UsageError("binarizing needs --dataset to calibrate the activation quantizers")
        arch = dict(net.arch)
        arch.update(_scheme_kwargs(args, arch["id"]), quantized=True)
        x, _ = _load_split(args, "train")
        rng = np.random.default_rng(args.seed)
        net = load_pretrained(build(arch), args.checkpoint, x[rng.permutation(len(x))[:256]])
    export_model(net, args.out)
    hists = weight_histograms(net, args.bins)
    sys.stdout.write(format_histograms(hists))
    if args.hist_csv:
        with open(args.hist_csv, "w") as f:
            f.write(histograms_csv(hists))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .export import export_model
    from .nn.checkpoint import load_checkpoint

    net, _, _ = load_checkpoint(args.checkpoint)
    export_model(net, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .export import import_model, verify_bitops
    from .nn.checkpoint import load_checkpoint
    from .nn.models import predict
    from .nn.train import topk_accuracy

    net = import_model(args.model) if _is_export(args.model) else load_checkpoint(args.model)[0]
    x, y = _load_split(args, args.split)
    failures = []
    if args.verify:
        if not net.pa_activations():
            raise UsageError("--verify needs a quantized model")
        for s in range(0, len(x), args.batch_size):
            for rec in verify_bitops(net, x[s:s + args.batch_size]):
                if not rec["ok"]:
                    failures.append(rec)
    logits = predict(net, x, args.batch_size)
    report = {"top1": topk_accuracy(logits, y, 1), "top5": topk_accuracy(logits, y, 5), "count": int(len(y))}
    if args.verify:
        report["verified"] = not failures
    print(json.dumps(report))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f)
    if failures:
        for rec in failures[:10]:
            print(f"verification failed: {rec}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_analyze(args) -> int:
    from . import complexity as cx

    try:
        arch = cx.get_architecture(args.arch)
    except ValueError as e:
        raise UsageError(str(e)) from None
    gates = cx.GateTimings.from_file(args.gates) if args.gates else cx.GateTimings()
    if args.compare:
        reports = cx.compare(arch, args.arch, args.M, args.N, gates)
    else:
        if args.scheme == "full":
            spec = cx.full_precision()
        elif args.scheme == "single-binary":
            spec = cx.SchemeSpec(cx.SINGLE, downsampling_binarized=not args.downsampling_real)
        elif args.scheme == "abc":
            spec = cx.abc(args.M, args.N)
        else:
            spec = cx.SchemeSpec(cx.MULTI, args.M, args.N, downsampling_binarized=not args.downsampling_real,
                                 worst_case_reduction=args.worst_case_reduction)
        reports = [cx.analyze(arch, spec, args.arch, gates)]
    text = cx.emit_report(reports, args.format)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


BENCH_FIELDS = ["kernel", "size", "baseline_seconds", "packed_seconds", "speedup", "note"]


def naive_dot(a: np.ndarray, b: np.ndarray) -> int:
    """Byte-at-a-time dot product of two {0,1} uint8 vectors."""
    total = 0
    for x, y in zip(a.tolist(), b.tolist()):
        total += x & y
    return total


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_rows(sizes, repeat: int = 5, seed: int = 0) -> list[dict]:
    from .bitops import binary_conv2d, dot_and_popcount, merge_coefficients, pack
    from .tensor import conv2d_reference

    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        if n <= 0:
            rows.append({"kernel": "dot", "size": n, "baseline_seconds": "", "packed_seconds": "",
                         "speedup": "", "note": "skipped: zero-size input"})
            continue
        a = rng.integers(0, 2, n, dtype=np.uint8)
        b = rng.integers(0, 2, n, dtype=np.uint8)
        pa_, pb = pack(a), pack(b)
        if dot_and_popcount(pa_, pb) != naive_dot(a, b):
            raise RuntimeError("packed dot product disagrees with the naive loop")
        tn = _best(lambda: naive_dot(a, b), max(1, repeat // 2))
        tp = _best(lambda: dot_and_popcount(pa_, pb), repeat)
        rows.append({"kernel": "dot", "size": n, "baseline_seconds": tn, "packed_seconds": tp,
                     "speedup": tn / tp, "note": ""})
    for c, hw in ((8, 16), (32, 16), (64, 8)):
        M, N = 4, 5
        x = rng.standard_normal((4, c, hw, hw)).astype(np.float32)
        T = [pack(rng.random((c, c, 3, 3)) < 0.2) for _ in range(M)]
        V = [pack(rng.random(x.shape) < 0.2) for _ in range(N)]
        phi = merge_coefficients(rng.random(M), rng.random(N))
        dense_w = sum(float(a) * t.to_array() for a, t in zip(rng.random(M), T)).astype(np.float32)
        tr = _best(lambda: [conv2d_reference(x, dense_w, 1, 1) for _ in range(M * N)], repeat)
        tb = _best(lambda: binary_conv2d(T, V, phi, 1, 1), max(1, repeat // 2))
        rows.append({"kernel": f"conv{c}x{hw}", "size": c * c * 9 * M * N, "baseline_seconds": tr,
                     "packed_seconds": tb, "speedup": tr / tb, "note": "baseline: M*N float32 im2col convolutions"})
    return rows


def cmd_bench(args) -> int:
    rows = bench_rows(args.sizes, args.repeat, args.seed)
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    for r in rows:
        if r["kernel"] == "dot" and r["size"] >= 1 << 16 and r["speedup"] != "" and r["speedup"] < 4:
            log.warning("packed dot speedup %.1fx below 4x at %d bits", r["speedup"], r["size"])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "quantize": cmd_quantize, "export": cmd_export, "eval": cmd_eval,
            "analyze": cmd_analyze, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        os.environ["PA_THREADS"] = str(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"panet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"panet: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``rqmoe <subcommand> [flags]``.

Every subcommand that writes files also writes ``manifest.json`` (or
``<output>.manifest.json`` for single-file outputs) recording the argv,
resolved configuration, seed, version and hardware.
"""

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import io as rio
from .errors import ConfigError, RqMoeError
from .evaluate import (
    STRATEGIES,
    bench_model,
    ground_truth,
    hardware_info,
    latency_bench,
    mse,
    perturbation_table,
    recall_at_k,
    sweep,
    truncation_curve,
)
from .model import decode_parallel, decode_sequential, decode_truncated, encode_batch, flops_estimate
from .rq import rq_train
from .training import LOSS_KINDS, ModelDims, TrainConfig, config_dict, train, warm_start

log = logging.getLogger("rqmoe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _version():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out, args, config=None):
    out = Path(out)
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    record = {
        "command": args.command,
        "argv": args.argv,
        "seed": getattr(args, "seed", None),
        "config": config or {},
        "version": _version(),
        "hardware": hardware_info(),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _limit_threads(args):
    if getattr(args, "threads", None):
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=args.threads)
    return None


def _workers(args):
    return getattr(args, "threads", None) or None


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    spec = rio.SynthSpec(n=args.n, D=args.D, clusters=args.clusters, intrinsic_dim=args.intrinsic_dim,
                         noise=args.noise, seed=args.seed, n_valid=args.n_valid, n_test=args.n_test,
                         n_queries=args.n_queries)
    splits = rio.synth_dataset(spec)
    rio.write_splits(splits, args.out)
    write_manifest(args.out, args, asdict(spec))
    for name, arr in splits.items():
        print(f"{name}\t{arr.shape[0]}x{arr.shape[1]}")
    return 0


_TRAIN_SCHEMA = {
    "learning_rate": float, "batch_size": int, "beta1": float, "beta2": float, "adam_eps": float,
    "patience": int, "max_epochs": int, "loss": str, "seed": int, "nrl_eps": float,
    "M": int, "K": int, "De": int, "N": int, "L": int, "H": int,
}


def _train_settings(args):
    """Merge the optional key=value file with explicit flags (flags win)."""
    values = rio.read_config(args.config, _TRAIN_SCHEMA) if args.config else {}
    for key in _TRAIN_SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    tc = TrainConfig(**{k: values[k] for k in (f.name for f in fields(TrainConfig)) if k in values})
    dims = ModelDims(**{k: values[k] for k in ("M", "K", "De", "N", "L", "H") if k in values},
                     transforms=not args.static)
    return tc, dims


def cmd_train(args):
    tc, dims = _train_settings(args)
    data = Path(args.data)
    splits = {"train": rio.read_vecs(data / "train.fvecs"), "valid": rio.read_vecs(data / "valid.fvecs")}
    out = Path(args.out)
    history_path = out.with_name(out.name + ".history.jsonl")
    rq = rq_train(splits["train"], dims.M, dims.K, seed=tc.seed)
    if args.static:
        model = warm_start(rq, dims)
        history = []
    else:
        history_path.write_text("")
        model, history = train(splits, tc, dims, rq=rq,
                               on_epoch=lambda rec: rio.write_jsonl([rec], history_path, append=True))
    rio.save_model(model, out)
    write_manifest(out, args, config_dict(tc, dims))
    valid = splits["valid"]
    print(f"model\t{out}")
    print(f"valid_mse\t{mse(valid, model):.6g}")
    if history:
        print(f"best_epoch\t{history.best_epoch}")
    return 0


def cmd_encode(args):
    model = rio.load_model(args.model)
    X = rio.read_vecs(args.input)
    codes = encode_batch(X, model).codes
    rio.save_codes(codes, args.out, model.K)
    write_manifest(args.out, args, {"model": str(args.model), "input": str(args.input)})
    print(f"encoded\t{len(codes)}")
    return 0


def cmd_decode(args):
    model = rio.load_model(args.model)
    codes = rio.load_codes(args.codes)
    if args.m_stop is not None:
        X = decode_truncated(codes, args.m_stop, model, workers=_workers(args))
    elif args.sequential:
        X = decode_sequential(codes, model)
    else:
        X = decode_parallel(codes, model, workers=_workers(args))
    rio.write_vecs(X, args.out)
    write_manifest(args.out, args, {"model": str(args.model), "codes": str(args.codes), "m_stop": args.m_stop})
    print(f"decoded\t{len(X)}")
    return 0


def _load_gt(path, queries, base):
    path = Path(path)
    if path.exists():
        gt = rio.read_vecs(path)[:, 0].astype(np.int64)
        if len(gt) != len(queries):
            raise ConfigError(f"cached ground truth {path} has {len(gt)} rows for {len(queries)} queries")
        return gt
    gt = ground_truth(queries, base)
    rio.write_vecs(gt[:, None].astype(np.int32), path)
    return gt


def cmd_eval(args):
    model = rio.load_model(args.model)
    data = Path(args.data)
    base = rio.read_vecs(data / f"{args.base}.fvecs")
    queries = rio.read_vecs(data / "queries.fvecs")
    gt = _load_gt(args.gt or data / f"gt_{args.base}.ivecs", queries, base)
    ks = [k for k in (1, 10, 100) if k <= len(base)]
    recalls = recall_at_k(model, queries, base, gt, ks)
    row = {"model": str(args.model), "base": args.base, "n_base": len(base), "n_queries": len(queries),
           "mse": mse(base, model), **{f"recall@{k}": v for k, v in recalls.items()}}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_csv([row], out / "eval.csv")
    rio.write_jsonl([row], out / "eval.jsonl")
    write_manifest(out, args, {"model": str(args.model), "data": str(data), "base": args.base})
    for k, v in row.items():
        print(f"{k}\t{v}")
    return 0


def cmd_bench(args):
    model = rio.load_model(args.model) if args.model else bench_model(
        M=args.M, N=args.N, L=args.L, D=args.D, K=args.K, H=args.H, seed=args.seed)
    report = latency_bench(model, batch=args.batch, warmup=args.warmup, runs=args.runs, seed=args.seed,
                           workers=_workers(args), include_encode=not args.no_encode)
    if args.out:
        rio.write_jsonl([report], args.out)
        write_manifest(args.out, args, {k: report[k] for k in ("batch", "warmup", "runs", "workers", "dims")})
    for key in ("encode_us", "decode_sequential_us", "decode_parallel_us", "speedup"):
        if key in report:
            print(f"{key}\t{report[key]:.6g}")
    print(f"usable_cores\t{report['hardware']['usable_cores']}")
    return 0


def cmd_perturb(args):
    model = rio.load_model(args.model)
    X = rio.read_vecs(Path(args.data) / f"{args.split}.fvecs")
    table = perturbation_table(X, model)
    trunc = truncation_curve(model, X, workers=_workers(args))
    rows = [{"strategy": name, "step": m + 1, "mse": v} for name, curve in table.items() for m, v in enumerate(curve)]
    rows += [{"strategy": "truncated", "step": m + 1, "mse": v} for m, v in enumerate(trunc)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_csv(rows, out / "perturb.csv")
    rio.write_jsonl(rows, out / "perturb.jsonl")
    write_manifest(out, args, {"model": str(args.model), "split": args.split, "strategies": list(STRATEGIES)})
    print("strategy\t" + "\t".join(f"m={m + 1}" for m in range(model.M)))
    for name, curve in list(table.items()) + [("truncated", trunc)]:
        print(name + "\t" + "\t".join(f"{v:.6g}" for v in curve))
    return 0


def _parse_grid(text):
    configs = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        cfg = {}
        for part in item.split(","):
            if "=" not in part:
                raise ConfigError(f"grid entry {item!r}: expected key=value pairs")
            k, v = (p.strip() for p in part.split("=", 1))
            if k not in ("N", "L", "De"):
                raise ConfigError(f"grid key {k!r} not in N, L, De")
            cfg[k] = int(v)
        configs.append(cfg)
    if not configs:
        raise ConfigError("empty sweep grid")
    return configs


def cmd_sweep(args):
    tc, dims = _train_settings(args)
    data = Path(args.data)
    splits = {s: rio.read_vecs(data / f"{s}.fvecs") for s in ("train", "valid", "test")}
    bench = {"batch": args.bench_batch, "warmup": 2, "runs": args.bench_runs, "include_encode": False,
             "workers": _workers(args)} if args.bench_runs else None
    rows = sweep(_parse_grid(args.grid), splits, tc, dims, bench=bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_csv(rows, out / "sweep.csv")
    rio.write_jsonl(rows, out / "sweep.jsonl")
    write_manifest(out, args, {**config_dict(tc, dims), "grid": args.grid})
    for r in rows:
        print("\t".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_flops(args):
    dims = {k: getattr(args, k) for k in ("M", "K", "D", "N", "L", "H", "Hp", "b")}
    dims["variant"] = args.variant
    value = flops_estimate(dims, args.phase)
    if args.out:
        Path(args.out).write_text(f"{value}\n")
        write_manifest(args.out, args, dims)
    print(value)
    return 0


# ---------------------------------------------------------------------------
# parser


def _dims_flags(p, defaults):
    for name in ("M", "K", "D", "De", "N", "L", "H"):
        if name in defaults:
            p.add_argument(f"--{name}", type=int, default=defaults[name])


def _train_flags(p):
    _dims_flags(p, {k: None for k in ("M", "K", "De", "N", "L", "H")})
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--static", action="store_true", help="degenerate model: D_e=0, no transforms, no training")


def build_parser():
    parser = _Parser(prog="rqmoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic train/valid/test/queries splits")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--D", type=int, default=32)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--intrinsic-dim", dest="intrinsic_dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--n-valid", dest="n_valid", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--n-queries", dest="n_queries", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="RQ warm start, then RQ-MoE training")
    p.add_argument("--data", required=True, help="directory with train.fvecs and valid.fvecs")
    _train_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="vectors -> code blob")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="code blob -> fvecs")
    p.add_argument("--model", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--m-stop", dest="m_stop", type=int, help="decode only the first m_stop indices")
    p.add_argument("--sequential", action="store_true", help="use the step-by-step decoder")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="MSE and Recall@{1,10,100}")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--base", default="test", choices=("train", "valid", "test"))
    p.add_argument("--gt", help="ground-truth ivecs cache (computed if missing)")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="encode/decode latency")
    p.add_argument("--model", help="model file; a random model of the given dims otherwise")
    _dims_flags(p, {"M": 16, "K": 64, "D": 32, "N": 4, "L": 2, "H": 64})
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--no-encode", dest="no_encode", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("perturb", help="step-wise MSE under the three perturbations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("sweep", help="train a grid of (N, L, De) configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, help='e.g. "N=1,L=4;N=2,L=2;N=4,L=1"')
    _train_flags(p)
    p.add_argument("--bench-runs", dest="bench_runs", type=int, default=0)
    p.add_argument("--bench-batch", dest="bench_batch", type=int, default=4096)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("flops", help="closed-form per-vector FLOPs")
    p.add_argument("--variant", choices=("rqmoe", "qinco", "unq"), default="rqmoe")
    p.add_argument("--phase", choices=("encode", "decode"), required=True)
    _dims_flags(p, {k: None for k in ("M", "K", "D", "N", "L", "H")})
    p.add_argument("--Hp", type=int, help="UNQ hidden width H'")
    p.add_argument("--b", type=int, help="UNQ code width")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)
    return parser


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = _limit_threads(args)
    try:
        return args.func(args)
    except RqMoeError as exc:
        print(f"error: {exc.kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1
    finally:
        if limits is not None:
            limits.restore_original_limits()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

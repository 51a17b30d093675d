"""``gldr`` command-line entry point.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on
numeric or data errors (divergence, corrupt checkpoint, bad dataset).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff
from .analysis import memory_sweep_depth, scaling_exponent
from .autodiff import ConfigError, NumericError
from .bench import ENCODERS, bench_latency, bench_memory, bench_path, records_to_csv
from .checkpoint import CheckpointError, load_model, save_model
from .data import DataError, gen_dataset, load_dataset, save_dataset
from .encoder import CONVENTIONS, layer_table, load_config, receptive_field
from .gradcheck import grad_check
from .reader import (
    DivergenceError,
    ReaderConfig,
    TrainConfig,
    ablation_config,
    init_reader,
    reader_forward,
    run_eval,
    span_loss,
    train,
)

METRICS_HEADER = ["step", "loss", "em", "f1"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _encoder_list(text):
    vals = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in ENCODERS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown encoder(s) {bad}; choose from {', '.join(ENCODERS)}")
    return vals


def _default_threads():
    try:
        return max(1, int(os.environ.get("READER_THREADS", "1")))
    except ValueError:
        return 1


def _emit(text, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Training configuration files
# ---------------------------------------------------------------------------

_DATA_KEYS = {"count": int, "eval_count": int, "n": int, "distance": int, "vocab": int, "seed": int,
              "distractors": int, "path": str, "eval_path": str}
_MODEL_KEYS = {f.name: f.type for f in fields(ReaderConfig)} | {"ablation": "str", "init_seed": "int"}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_CASTS = {"int": int, "float": float, "str": str, "bool": None}


def _cast(section, key, raw, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    kind = kind.split("|")[0].strip()  # optional fields are written "float | None"
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return _CASTS[kind](raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind}") from None


def parse_train_config(text: str):
    """Parse an INI file with ``[data]``, ``[model]`` and ``[train]`` sections."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse config: {err}") from None
    known = {"data": _DATA_KEYS, "model": _MODEL_KEYS, "train": _TRAIN_KEYS}
    out = {"data": {}, "model": {}, "train": {}}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in known[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            out[section][key] = _cast(section, key, raw, known[section][key])
    return out["data"], out["model"], out["train"]


def _build_reader_config(model_kw, preset=None):
    model_kw = dict(model_kw)
    ablation = preset or model_kw.pop("ablation", None)
    model_kw.pop("ablation", None)
    model_kw.pop("init_seed", None)
    try:
        base = ReaderConfig(**model_kw)
    except TypeError as err:
        raise ConfigError(str(err)) from None
    return ablation_config(ablation, base) if ablation else base


def _datasets(data_kw):
    if "path" in data_kw:
        tr = load_dataset(data_kw["path"])
        te = load_dataset(data_kw["eval_path"]) if "eval_path" in data_kw else tr
        return tr, te
    n, dist = data_kw.get("n", 128), data_kw.get("distance", 40)
    vocab, seed = data_kw.get("vocab", 64), data_kw.get("seed", 17)
    extra = {"distractors": data_kw["distractors"]} if "distractors" in data_kw else {}
    tr = gen_dataset(data_kw.get("count", 4000), n, dist, vocab, seed, **extra)
    te = gen_dataset(data_kw.get("eval_count", 300), n, dist, vocab, seed + 10000, **extra)
    return tr, te


def write_metrics(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["step"], repr(row["loss"]), repr(row["em"]), repr(row["f1"])])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args):
    if not args.config:
        raise UsageError("train needs --config")
    try:
        text = Path(args.config).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {args.config}: {err.strerror}") from None
    data_kw, model_kw, train_kw = parse_train_config(text)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    rcfg = _build_reader_config(model_kw, args.preset)
    tcfg = TrainConfig(**train_kw)
    if args.data:
        data_kw["path"] = args.data
    tr, te = _datasets(data_kw)
    autodiff.set_num_threads(args.threads)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    model = init_reader(rcfg, model_kw.get("init_seed", tcfg.seed))
    print(f"reader: passage {model.passage_config.name} (rf {model.passage_rf}), "
          f"{len(tr)} train / {len(te)} eval examples, {tcfg.steps} steps")

    def log(row):
        print(f"step {row['step']:>5}  loss {row['loss']:.4f}  em {row['em']:.4f}  f1 {row['f1']:.4f}", flush=True)

    try:
        history = train(model, tr, tcfg, te, log=log)
    except DivergenceError as err:
        write_metrics(out / "metrics.csv", err.history)
        print(f"diverged at step {err.step}", file=sys.stderr)
        return 2
    write_metrics(out / "metrics.csv", history)
    save_model(out / "model.ckpt", model, {"train": tcfg.to_dict()})
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    if not args.checkpoint or not args.data:
        raise UsageError("eval needs --checkpoint and --data")
    model, meta = load_model(args.checkpoint)
    ds = load_dataset(args.data)
    max_span = meta.get("train", {}).get("max_span", 3)
    autodiff.set_num_threads(args.threads)
    r = run_eval(model, ds, max_span)
    print(f"em {r.exact_match:.4f}  f1 {r.f1:.4f}  ({len(ds)} examples)")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["index", "pred_start", "pred_end", "gold_start", "gold_end"])
            for i, (pred, ex) in enumerate(zip(r.predictions, ds)):
                w.writerow([i, int(pred[0]), int(pred[1]), *ex.answer_span])
    return 0


def cmd_bench_latency(args):
    recs = bench_latency(args.encoders, args.n, args.batch or 1, args.threads_sweep or [args.threads],
                         args.reps, args.width, args.preset or "drqa-passage-9", args.seed or 0)
    _emit(records_to_csv(recs), args.out)
    print("note: CPU wall time with position-parallel threads stands in for GPU latency; "
          "see bench-path for the dependency-depth side", file=sys.stderr)
    return 0


def cmd_bench_memory(args):
    recs = bench_memory(args.n, args.width, args.batch or 64)
    _emit(records_to_csv(recs), args.out)
    if len(args.n) >= 4:
        for enc in ("self-attn", "gldr"):
            pts = [(r.n, r.value) for r in recs if r.encoder == enc and r.metric == "activation_elements"]
            print(f"{enc}: log-log slope {scaling_exponent(pts):.3f}", file=sys.stderr)
    print("gldr depth per n: " + ", ".join(f"{n}->{memory_sweep_depth(n)}" for n in args.n), file=sys.stderr)
    return 0


def cmd_bench_path(args):
    recs = bench_path(args.encoders, args.n, args.preset or "drqa-passage-9")
    _emit(records_to_csv(recs), args.out)
    return 0


def cmd_rf(args):
    target = args.target or args.preset or args.config
    if not target:
        raise UsageError("rf needs a preset name or config file")
    cfg = load_config(target)
    for conv in CONVENTIONS:
        print(f"{conv:<10} {receptive_field(cfg, conv)}")
    print()
    print(f"{'layer':>5} {'conv':<10} {'in':>4} {'pre':>4} {'k':>2} {'dil':>4} {'act':<5} {'rf_c1':>6} {'rf_full':>7}")
    for row in layer_table(cfg):
        print(f"{row['layer']:>5} {row['kind']:<10} {row['in_channels']:>4} {row['pre_channels']:>4} "
              f"{row['kernel']:>2} {row['dilation']:>4} {row['activation']:<5} {row['rf_c1']:>6} {row['rf_full']:>7}")
    return 0


def cmd_gen_data(args):
    if not args.out:
        raise UsageError("gen-data needs --out")
    ds = gen_dataset(args.count, args.n[0] if args.n else 128, args.distance, args.vocab, args.seed or 0)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} examples to {args.out}")
    return 0


def cmd_grad_check(args):
    """Finite-difference check of a small reader's span loss."""
    rcfg = ReaderConfig(vocab=16, embed_dim=4, width=4, query_preset="bidaf-output-3",
                        passage_preset=args.preset or "drqa-passage-9")
    model = init_reader(rcfg, args.seed or 0)
    rng = np.random.default_rng(args.seed or 0)
    for p in (model.start_w, model.end_w):
        p.data[...] = rng.normal(0, 0.5, p.shape)
    n = args.n[0] if args.n else 12
    q = rng.integers(2, 16, size=(2, 3))
    p_ids = rng.integers(2, 16, size=(2, n))
    spans = np.array([[1, 2], [n - 2, n - 1]])

    def build():
        start, end = reader_forward(model, q, p_ids)
        return span_loss(start, end, spans)

    worst = 0.0
    for name, prm in model.named_parameters():
        err = grad_check(build, [prm], samples=args.reps or 20, seed=args.seed or 0)
        worst = max(worst, err)
        print(f"{name:<28} {err:.3e}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < 1e-4 else 2


def build_parser():
    p = _Parser(prog="gldr", description="Dilated convolutional encoders: training, diagnostics and benchmarks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="config file")
        sp.add_argument("--out", help="output path or directory")
        sp.add_argument("--threads", type=int, default=_default_threads(), help="worker threads (READER_THREADS)")
        sp.add_argument("--batch", type=int)
        sp.add_argument("--n", type=_int_list, help="sequence length(s), comma separated")
        sp.add_argument("--reps", type=int, default=5)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset")
        return sp

    sp = common(sub.add_parser("train", help="train a reader from a config file"))
    sp.add_argument("--data", help="dataset file (overrides [data])")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset file"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("bench-latency", help="median forward wall time"))
    sp.add_argument("--encoders", type=_encoder_list, default=list(ENCODERS))
    sp.add_argument("--threads-sweep", type=_int_list)
    sp.add_argument("--width", type=int, default=100)
    sp.set_defaults(func=cmd_bench_latency, n=[128, 256, 512])

    sp = common(sub.add_parser("bench-memory", help="activation element counts"))
    sp.add_argument("--width", type=int, default=100)
    sp.set_defaults(func=cmd_bench_memory, n=[128, 256, 512, 1024, 2048, 4096])

    sp = common(sub.add_parser("bench-path", help="longest dependency chain of a traced forward pass"))
    sp.add_argument("--encoders", type=_encoder_list, default=list(ENCODERS))
    sp.set_defaults(func=cmd_bench_path, n=[16, 64, 256, 1024])

    sp = common(sub.add_parser("rf", help="receptive field of a preset or config file"))
    sp.add_argument("target", nargs="?")
    sp.set_defaults(func=cmd_rf)

    sp = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--distance", type=int, default=40)
    sp.add_argument("--vocab", type=int, default=64)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("grad-check", help="finite-difference check of the reader loss"))
    sp.set_defaults(func=cmd_grad_check, reps=20)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as err:
        print(f"gldr: error: {err}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, NumericError, DivergenceError) as err:
        print(f"gldr: error: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"gldr: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

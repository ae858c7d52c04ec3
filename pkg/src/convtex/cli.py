"""Command-line entry point.

Commands: gen-data, train, eval, infer, bench, bench-kernels.  Machine
output (reports, metrics, decoded strings) goes to standard output as
tab-separated text; progress and diagnostics go to standard error.  Exit
codes: 0 success, 1 usage or configuration error, 2 runtime failure.

The CONVMATH_THREADS variable (default 1, kept at 1 for reproducible runs)
caps the numeric libraries' thread pools; it is applied before they load,
so heavy imports happen lazily inside the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, DataError, TrainingDiverged


def _apply_thread_cap():
    raw = os.environ.get("CONVMATH_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CONVMATH_THREADS must be a positive integer, got {raw!r}")
    for var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)
    return n


def _say(*parts):
    print(*parts, file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are exit code 1, not 2
        raise ConfigError(message)


def _parse_range(text):
    lo, sep, hi = text.partition(":")
    if not sep or not lo.isdigit() or not hi.isdigit():
        raise ConfigError(f"bad length range {text!r}, expected LO:HI")
    return (int(lo), int(hi))


# ------------------------------------------------------------- commands

def cmd_gen_data(args):
    from .config import parse_buckets
    from .data import DEFAULT_BUCKETS, GrammarConfig, build_corpus

    if args.n <= 0:
        raise ConfigError("empty dataset requested (--n must be positive)")
    tweaks = {}
    if args.max_depth is not None:
        tweaks["max_depth"] = args.max_depth
    if args.top_len is not None:
        tweaks["top_len"] = _parse_range(args.top_len)
    if args.nested_len is not None:
        tweaks["nested_len"] = _parse_range(args.nested_len)
    grammar = GrammarConfig(**tweaks)
    buckets = parse_buckets(args.buckets) if args.buckets else DEFAULT_BUCKETS
    report = build_corpus(
        args.n,
        args.seed,
        args.out,
        grammar=grammar,
        base_glyph_px=args.base_glyph_px,
        buckets=buckets,
    )
    _say(f"corpus of {report.n} samples written to {args.out}")
    for (w, h), count in sorted(report.bucket_counts.items()):
        print(f"bucket\t{w}x{h}\t{count}")
    for name in ("train", "val", "test"):
        print(f"split\t{name}\t{report.splits.get(name, 0)}")
    print(f"vocab_size\t{report.vocab_size}")
    print(f"mean_tokens\t{report.mean_tokens:.2f}")
    print(f"resampled\t{report.resampled}")
    return 0


def _load_split(data_dir, split, buckets):
    from .data import load_corpus

    return load_corpus(
        os.path.join(data_dir, f"{split}.tsv"),
        os.path.join(data_dir, "vocab.txt"),
        buckets=buckets,
    )


_OVERRIDE_KEYS = (
    "d_model",
    "decoder_layers",
    "kernel_width",
    "encoder_variant",
    "max_target_positions",
    "lr",
    "decay",
    "decay_every_epochs",
    "batch_size",
    "epochs",
    "seed",
    "buckets",
)


def _add_override_flags(sub):
    sub.add_argument("--d-model", type=int)
    sub.add_argument("--decoder-layers", type=int)
    sub.add_argument("--kernel-width", type=int)
    sub.add_argument("--encoder-variant", choices=("residual", "simple"))
    sub.add_argument("--max-target-positions", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--decay", type=float)
    sub.add_argument("--decay-every-epochs", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--buckets")


def cmd_train(args):
    from . import config as C
    from .checkpoint import load_checkpoint, restore_parameters
    from .model import Model
    from .training import train

    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS}
    if args.grad_check:
        overrides["grad_check"] = True
    rc = C.make_run_config(args.config, overrides)
    rc.validate()
    buckets = rc.bucket_list()
    train_set = _load_split(args.data, "train", buckets)
    val_set = _load_split(args.data, "val", buckets)
    vocab = train_set.vocab
    start_epoch = 0
    if args.resume:
        meta, arrays = load_checkpoint(args.resume)
        if meta.get("vocab_sha256") != vocab.sha256():
            raise DataError(
                f"{args.resume}: checkpoint vocabulary does not match "
                f"{os.path.join(args.data, 'vocab.txt')}; refusing to resume"
            )
        mc = C.model_config_from_meta(meta)
        model = Model(mc, seed=rc.seed)
        restore_parameters(model.parameters(), arrays, args.resume)
        start_epoch = int(meta.get("epoch", -1)) + 1
        _say(f"resumed from {args.resume} at epoch {start_epoch}")
    else:
        mc = rc.model_config(len(vocab))
        model = Model(mc, seed=rc.seed)
    _say(
        f"model: d={mc.d_model} layers={mc.decoder.depth} "
        f"k={mc.decoder.kernel_width} params={model.param_count()}"
    )
    meta = C.model_meta(mc, vocab, buckets, extra={"seed": rc.seed})
    result = train(
        model,
        train_set,
        val_set,
        rc.train_config(),
        args.out,
        meta=meta,
        start_epoch=start_epoch,
        echo=print,
    )
    _say(
        f"best epoch {result.best_epoch} "
        f"(val exact {result.best_exact:.2f}) -> {result.best_path}"
    )
    return 0


def _restore_model(path):
    from . import config as C
    from .checkpoint import load_checkpoint, restore_parameters
    from .model import Model

    meta, arrays = load_checkpoint(path)
    mc = C.model_config_from_meta(meta)
    model = Model(mc, seed=0)
    restore_parameters(model.parameters(), arrays, path)
    return model, meta


def cmd_eval(args):
    import time

    from . import config as C
    from .metrics import evaluate
    from .training import decode_dataset

    model, meta = _restore_model(args.checkpoint)
    buckets = C.buckets_from_meta(meta)
    dataset = _load_split(args.data, args.split, buckets)
    t0 = time.perf_counter()
    candidates, references = decode_dataset(
        model, dataset, beam=args.beam, max_len=args.max_len
    )
    seconds = time.perf_counter() - t0
    report = evaluate(candidates, references)
    _say(f"{args.split}: bleu, edit, exact, seconds, n over {report.n} samples")
    print(report.tsv_line(seconds))
    return 0


def cmd_infer(args):
    from . import config as C
    from . import tensor as T
    from .data import bucket_and_pad, detokenize, image_to_input, read_pgm

    model, meta = _restore_model(args.checkpoint)
    vocab = C.vocab_from_meta(meta)
    image = read_pgm(args.image)
    padded, _bucket = bucket_and_pad(image, C.buckets_from_meta(meta))
    img = T.Tensor(image_to_input(padded)[None])
    if args.beam and args.beam > 1:
        result = model.beam_decode(img, beam=args.beam, max_len=args.max_len)
    else:
        result = model.greedy_decode(img, max_len=args.max_len)
    if result.truncated:
        _say("warning: decode hit the length limit without an end marker")
    print(detokenize(vocab.tokens_of(result.ids)))
    return 0


def cmd_bench(args):
    import numpy as np

    from . import config as C
    from . import tensor as T
    from .model import Model
    from .training import bench_decode

    if args.checkpoint:
        model, meta = _restore_model(args.checkpoint)
        buckets = C.buckets_from_meta(meta)
    else:
        overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
        rc = C.make_run_config(args.config, overrides)
        rc.validate()
        model = Model(rc.model_config(args.vocab_size), seed=rc.seed)
        buckets = rc.bucket_list()
    w, h = buckets[0]
    rng = np.random.default_rng(model.config.vocab_size)
    images = T.Tensor(
        rng.random((args.batch, 1, h, w), dtype=np.float32)
    )
    modes = {
        "both": ("parallel_scoring", "stepwise"),
        "parallel": ("parallel_scoring",),
        "stepwise": ("stepwise",),
    }[args.mode]
    report = bench_decode(
        model, images, positions=args.len, reps=args.reps, modes=modes
    )
    for line in report.lines():
        print(line)
    return 0


def cmd_bench_kernels(args):
    import time

    import numpy as np

    from .kernels import available_backends

    backends = available_backends()
    _say(f"backends: {', '.join(backends)}")
    rng = np.random.default_rng(0)
    x2 = rng.standard_normal((4, 32, 32, 64), dtype=np.float32)
    w2 = rng.standard_normal((64, 32, 3, 3), dtype=np.float32)
    b2 = rng.standard_normal(64, dtype=np.float32)
    x1 = rng.standard_normal((8, 64, 256), dtype=np.float32)
    w1 = rng.standard_normal((512, 256, 3), dtype=np.float32)
    b1 = rng.standard_normal(512, dtype=np.float32)
    ma = rng.standard_normal((1024, 256), dtype=np.float32)
    mb = rng.standard_normal((256, 256), dtype=np.float32)
    px = rng.standard_normal((4, 64, 32, 64), dtype=np.float32)
    cases = {
        "conv2d_fwd": lambda k: k.conv2d_fwd(x2, w2, b2, 1, 1),
        "conv1d_fwd": lambda k: k.conv1d_fwd(x1, w1, b1),
        "rowmm": lambda k: k.rowmm(ma, mb),
        "maxpool2d_fwd": lambda k: k.maxpool2d_fwd(px, 2, 2),
    }
    for op, thunk in cases.items():
        base = None
        for name, mod in backends.items():
            thunk(mod)  # warm-up
            times = []
            for _ in range(args.reps):
                t0 = time.perf_counter()
                thunk(mod)
                times.append(time.perf_counter() - t0)
            median = float(np.median(times))
            if base is None:
                base = median
            print(f"{op}\t{name}\t{median:.6f}\t{base / median:.2f}x")
    return 0


# -------------------------------------------------------------- wiring

def build_parser():
    parser = _Parser(
        prog="convtex",
        description="Rasterized math expressions to token strings, end to end.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--base-glyph-px", type=int, default=10)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--top-len", help="LO:HI expression length range")
    g.add_argument("--nested-len", help="LO:HI script/fraction length range")
    g.add_argument("--buckets")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a model on a corpus")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--grad-check", action="store_true")
    _add_override_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--beam", type=int, default=0)
    e.add_argument("--max-len", type=int)
    e.add_argument("--seed", type=int, default=0)  # decoding is deterministic
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="decode one PGM image")
    i.add_argument("--image", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--beam", type=int, default=0)
    i.add_argument("--max-len", type=int)
    i.add_argument("--seed", type=int, default=0)  # decoding is deterministic
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="time parallel vs stepwise scoring")
    b.add_argument("--checkpoint")
    b.add_argument("--config")
    b.add_argument("--vocab-size", type=int, default=40)
    b.add_argument("--batch", type=int, default=2)
    b.add_argument("--len", type=int, default=64)
    b.add_argument("--reps", type=int, default=21)
    b.add_argument("--mode", choices=("both", "parallel", "stepwise"), default="both")
    _add_override_flags(b)
    b.set_defaults(func=cmd_bench)

    k = sub.add_parser("bench-kernels", help="compare compute backends")
    k.add_argument("--reps", type=int, default=9)
    k.set_defaults(func=cmd_bench_kernels)

    return parser


def main(argv=None):
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        _say(f"error: {e}")
        return 1
    except (DataError, TrainingDiverged) as e:
        _say(f"error: {e}")
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        _say(f"error: {e}")
        return 2
    except KeyboardInterrupt:
        _say("interrupted")
        return 2


def entry():
    sys.exit(main())

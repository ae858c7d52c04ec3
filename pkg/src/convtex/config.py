"""Run configuration: flat key=value files, override merging, validation.

The file format is deliberately plain: one ``key=value`` per line, ``#``
comments, no sections.  Command-line flags override file values.  All
validation problems are collected and reported in a single error so a bad
config never needs more than one round trip to fix.

This module also owns the translation between a model configuration and the
flat metadata stored in checkpoints, so a checkpoint is self-describing:
evaluation and inference rebuild the model (and vocabulary) from it alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .data import DEFAULT_BUCKETS, Vocabulary
from .decoder import DecoderConfig
from .encoder import EncoderConfig, scaled_plan, scaled_stem
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

INIT_SCHEME = (
    "he-uniform sqrt(6/fan_in) relu convs; uniform sqrt(12/fan_in) glu convs; "
    "uniform sqrt(3/fan_in) shortcut projections; uniform sqrt(1/fan_in) "
    "attention/output; biases zero; embeddings normal(0,0.1)"
)
INK_RULE = "files dark-on-light; model input (255-v)/255 so 1=ink"


def format_buckets(buckets):
    return ",".join(f"{w}x{h}" for w, h in buckets)


def parse_buckets(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        w, sep, h = part.partition("x")
        if not sep or not w.isdigit() or not h.isdigit():
            raise ConfigError(f"bad bucket {part!r}, expected WIDTHxHEIGHT")
        out.append((int(w), int(h)))
    if not out:
        raise ConfigError("empty bucket list")
    return tuple(out)


def format_block_plan(plan):
    return ",".join(f"{c}d" if down else str(c) for c, down in plan)


def parse_block_plan(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        down = part.endswith("d")
        digits = part[:-1] if down else part
        if not digits.isdigit():
            raise ConfigError(
                f"bad block {part!r}, expected CHANNELS or CHANNELSd (d = halve the grid)"
            )
        out.append((int(digits), down))
    if not out:
        raise ConfigError("empty block plan")
    return tuple(out)


@dataclass
class RunConfig:
    # model
    d_model: int = 512
    decoder_layers: int = 7
    kernel_width: int = 3
    max_target_positions: int = 512
    max_source_positions: int = 1024
    encoder_variant: str = "residual"
    stem_channels: int = 0  # 0 = scale with d_model
    block_plan: str = ""  # "" = scale with d_model; e.g. "64,128d,128,256d,256,512"
    # optimization
    lr: float = 0.001
    decay: float = 0.8
    decay_every_epochs: int = 3
    batch_size: int = 15
    epochs: int = 10
    seed: int = 0
    grad_check: bool = False
    # data
    buckets: str = format_buckets(DEFAULT_BUCKETS)
    base_glyph_px: int = 10

    def train_config(self):
        return TrainConfig(
            lr=self.lr,
            decay=self.decay,
            decay_every_epochs=self.decay_every_epochs,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            grad_check=self.grad_check,
        )

    def encoder_config(self):
        stem = self.stem_channels or scaled_stem(self.d_model)
        if self.block_plan:
            plan = parse_block_plan(self.block_plan)
        else:
            plan = scaled_plan(self.d_model)
        return EncoderConfig(
            stem_channels=stem, block_plan=plan, variant=self.encoder_variant
        )

    def decoder_config(self):
        return DecoderConfig(
            depth=self.decoder_layers,
            kernel_width=self.kernel_width,
            channels=self.d_model,
            max_target_positions=self.max_target_positions,
        )

    def model_config(self, vocab_size):
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            decoder=self.decoder_config(),
            encoder=self.encoder_config(),
            max_source_positions=self.max_source_positions,
        )

    def bucket_list(self):
        return parse_buckets(self.buckets)

    def validate(self, vocab_size=None):
        """Collect every problem before raising; cross-field checks included."""
        problems = []

        def attempt(thunk):
            try:
                return thunk()
            except ConfigError as e:
                problems.append(str(e))
                return None

        attempt(lambda: self.train_config().validate())
        enc = attempt(self.encoder_config)
        dec = attempt(self.decoder_config)
        if dec is not None:
            attempt(dec.validate)
        if enc is not None:
            attempt(lambda: enc.validate(self.d_model))
        buckets = attempt(self.bucket_list)
        if enc is not None and buckets is not None:
            factor = enc.downsample_factor()
            for w, h in buckets:
                if w % factor or h % factor:
                    problems.append(
                        f"bucket {w}x{h} not divisible by the encoder "
                        f"downsample factor {factor}"
                    )
        if self.base_glyph_px < 5:
            problems.append(f"base_glyph_px must be >= 5, got {self.base_glyph_px}")
        if vocab_size is not None and vocab_size < 5:
            problems.append(f"vocabulary size {vocab_size} too small (needs >= 5)")
        if problems:
            raise ConfigError("configuration invalid:\n  " + "\n  ".join(problems))
        return self


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(key, raw, kind):
    try:
        if kind is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[word]
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def read_config_file(path):
    """Parse a key=value file -> str dict; line numbers in every complaint."""
    pairs = {}
    problems = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                problems.append(f"{path}:{ln}: expected key=value, got {line!r}")
                continue
            key = key.strip()
            if key in pairs:
                problems.append(f"{path}:{ln}: duplicate key {key!r}")
                continue
            pairs[key] = value.strip()
    if problems:
        raise ConfigError("\n".join(problems))
    return pairs


def make_run_config(file_path=None, overrides=None):
    """Config file then overrides, with unknown keys and type errors batched."""
    kinds = {f.name: type(f.default) for f in fields(RunConfig)}
    values = {}
    problems = []
    sources = []
    if file_path:
        sources.append(read_config_file(file_path))
    if overrides:
        sources.append({k: v for k, v in overrides.items() if v is not None})
    for source in sources:
        for key, raw in source.items():
            name = key.replace("-", "_")
            if name not in kinds:
                problems.append(f"unknown configuration key {key!r}")
                continue
            if isinstance(raw, str):
                try:
                    values[name] = _convert(name, raw, kinds[name])
                except ConfigError as e:
                    problems.append(str(e))
            else:
                values[name] = raw
    if problems:
        raise ConfigError("configuration invalid:\n  " + "\n  ".join(problems))
    return RunConfig(**values)


# ------------------------------------------------- checkpoint metadata

def model_meta(config, vocab, buckets=None, extra=None):
    """Flat string map describing a model; stored verbatim in checkpoints."""
    meta = {
        "arch": config.encoder.variant,
        "d_model": config.d_model,
        "decoder_layers": config.decoder.depth,
        "kernel_width": config.decoder.kernel_width,
        "vocab_size": config.vocab_size,
        "max_target_positions": config.decoder.max_target_positions,
        "max_source_positions": config.max_source_positions,
        "stem_channels": config.encoder.stem_channels,
        "init": INIT_SCHEME,
        "ink": INK_RULE,
        "vocab": vocab.serialize().replace("\n", " ").strip(),
        "vocab_sha256": vocab.sha256(),
    }
    if config.encoder.variant == "residual":
        meta["block_plan"] = format_block_plan(config.encoder.block_plan)
    if buckets is not None:
        meta["buckets"] = format_buckets(buckets)
    if extra:
        meta.update(extra)
    return {k: str(v) for k, v in meta.items()}


def model_config_from_meta(meta):
    """Rebuild a ModelConfig from checkpoint metadata."""
    try:
        d_model = int(meta["d_model"])
        encoder = EncoderConfig(
            stem_channels=int(meta["stem_channels"]),
            block_plan=parse_block_plan(meta["block_plan"])
            if meta.get("block_plan")
            else scaled_plan(d_model),
            variant=meta["arch"],
        )
        decoder = DecoderConfig(
            depth=int(meta["decoder_layers"]),
            kernel_width=int(meta["kernel_width"]),
            channels=d_model,
            max_target_positions=int(meta["max_target_positions"]),
        )
        return ModelConfig(
            vocab_size=int(meta["vocab_size"]),
            d_model=d_model,
            decoder=decoder,
            encoder=encoder,
            max_source_positions=int(meta["max_source_positions"]),
        )
    except KeyError as e:
        raise ConfigError(f"checkpoint metadata missing {e.args[0]!r}") from None


def vocab_from_meta(meta):
    if "vocab" not in meta:
        raise ConfigError("checkpoint metadata carries no vocabulary")
    return Vocabulary(meta["vocab"].split(" "))


def buckets_from_meta(meta):
    if "buckets" not in meta:
        return DEFAULT_BUCKETS
    return parse_buckets(meta["buckets"])

"""Batching, the cross-entropy objective, the SGD schedule, and the loop.

Batches are bucket-pure: every image in a batch shares its extents, so the
whole batch goes through the encoder as one array.  Targets are padded to
the longest sequence in the batch; padded cells carry the pad id and are
excluded from the loss, and causal convolution keeps them from leaking into
any scored position, so the loss is invariant to trailing padding.

The epoch shuffle is derived from (seed, epoch), which makes resumed runs
reproduce fresh runs exactly: parameters round-trip through checkpoints
bit-for-bit and the batch stream depends only on the epoch number.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import END_ID, PAD_ID, START_ID, image_to_input
from .errors import ConfigError, DataError, TrainingDiverged
from .metrics import evaluate
from .tensor import backward, record, sgd_step


@dataclass
class TrainConfig:
    lr: float = 0.001
    decay: float = 0.8
    decay_every_epochs: int = 3
    batch_size: int = 15
    epochs: int = 10
    seed: int = 0
    grad_check: bool = False

    def validate(self):
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.decay <= 1:
            problems.append(f"decay must be in (0, 1], got {self.decay}")
        if self.decay_every_epochs < 1:
            problems.append(f"decay_every_epochs must be >= 1, got {self.decay_every_epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class Batch:
    images: T.Tensor  # (B, 1, H, W) float, 1 = ink, one bucket throughout
    targets: np.ndarray  # (B, N) int64: tokens then end id, padded with pad id
    lengths: np.ndarray  # scored positions per row (token count + end marker)

    @property
    def teacher(self):
        """Decoder input: start id, then the targets shifted right one slot."""
        t = np.full_like(self.targets, PAD_ID)
        t[:, 0] = START_ID
        for b, n in enumerate(self.lengths):
            t[b, 1:n] = self.targets[b, : n - 1]
        return t

    @property
    def live_positions(self):
        return int(self.lengths.sum())


def _canon_key(sample):
    """Order samples identically no matter how the caller arranged them."""
    if sample.path is not None:
        return (0, sample.path)
    return (1, tuple(int(t) for t in sample.token_ids), sample.image.tobytes())


def _make_batch(samples):
    images = np.stack([image_to_input(s.image) for s in samples])[:, None]
    width = max(len(s.token_ids) for s in samples) + 1  # room for the end id
    targets = np.full((len(samples), width), PAD_ID, dtype=np.int64)
    lengths = np.empty(len(samples), dtype=np.int64)
    for b, s in enumerate(samples):
        n = len(s.token_ids)
        targets[b, :n] = s.token_ids
        targets[b, n] = END_ID
        lengths[b] = n + 1
    return Batch(images=T.Tensor(images), targets=targets, lengths=lengths)


def make_batches(dataset, batch_size, seed):
    """Seeded bucket-pure batches covering every sample exactly once.

    Samples are canonically ordered per bucket before the shuffle, so a
    permuted copy of the dataset yields byte-identical batches.
    """
    if len(dataset) == 0:
        raise DataError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    buckets = {}
    for s in dataset.samples:
        buckets.setdefault(s.bucket, []).append(s)
    rng = np.random.default_rng(seed)
    groups = []
    for key in sorted(buckets):
        members = sorted(buckets[key], key=_canon_key)
        order = rng.permutation(len(members))
        for lo in range(0, len(members), batch_size):
            groups.append([members[i] for i in order[lo : lo + batch_size]])
    batches = [groups[i] for i in rng.permutation(len(groups))]
    return [_make_batch(g) for g in batches]


def batch_loss(batch, model):
    """Teacher-forced mean cross-entropy over the batch's scored positions."""
    logits = model.forward_teacher_forced(batch.images, batch.teacher)
    return T.cross_entropy(logits, batch.targets, ignore_id=PAD_ID)


def lr_at(epoch, config):
    """Step-decayed rate: lr * decay ** floor(epoch / decay_every_epochs)."""
    return config.lr * config.decay ** (epoch // config.decay_every_epochs)


# ------------------------------------------------------------- validation

def decode_dataset(model, dataset, beam=0, max_len=None):
    """Decode every sample -> (candidate id lists, reference id lists)."""
    candidates, references = [], []
    for s in dataset.samples:
        img = T.Tensor(image_to_input(s.image)[None])
        if beam and beam > 1:
            result = model.beam_decode(img, beam=beam, max_len=max_len)
        else:
            result = model.greedy_decode(img, max_len=max_len)
        candidates.append(result.ids)
        references.append([int(t) for t in s.token_ids])
    return candidates, references


def _val_decode_cap(model, val_set):
    # Untrained models rarely emit the end id; capping decode length keeps
    # early validation passes cheap without touching converged behaviour.
    longest = max(len(s.token_ids) for s in val_set.samples)
    return min(model.config.decoder.max_target_positions - 1, 2 * longest + 8)


# ------------------------------------------------------------ grad check

def _grad_spot_check(model, batch, entries=4, eps=1e-2, tol=0.1):
    """Central-difference audit of a few gradient entries on a live batch.

    Single precision limits how tight this can be; it exists to catch sign
    and wiring errors during a real run, not to certify the math (the f64
    harness in the test suite does that).  Only decoder-side parameters are
    sampled: their loss path is smooth, while encoder parameters sit behind
    relu/maxpool kinks that a +-eps probe can cross, making the comparison
    meaningless at f32 step sizes.
    """
    rng = np.random.default_rng(0)
    params = [
        p
        for p in model.parameters()
        if p.value.grad is not None and p.value.data.size and p.name.startswith("dec.")
    ]
    checked = 0
    for p in rng.permutation(len(params))[: 2 * entries]:
        param = params[p]
        flat = param.value.data.reshape(-1)
        idx = int(rng.integers(flat.size))
        analytic = float(param.value.grad.reshape(-1)[idx])
        if abs(analytic) < 1e-3:  # too small to resolve in f32
            continue
        keep = flat[idx]
        flat[idx] = keep + eps
        hi = float(batch_loss(batch, model).data)
        flat[idx] = keep - eps
        lo = float(batch_loss(batch, model).data)
        flat[idx] = keep
        fd = (hi - lo) / (2 * eps)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic))
        if rel > tol:
            raise RuntimeError(
                f"gradient check failed for {param.name}[{idx}]: "
                f"analytic {analytic:.6g} vs finite-difference {fd:.6g}"
            )
        checked += 1
        if checked >= entries:
            break


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    log_lines: list = field(default_factory=list)
    best_epoch: int = -1
    best_exact: float = -1.0
    final_train_loss: float = math.nan
    best_path: str = ""
    last_path: str = ""


def _log_line(epoch, lr, train_loss, report, seconds):
    exact = report.exact_match if report else 0.0
    bleu = report.bleu if report else 0.0
    edit = report.edit_score if report else 0.0
    return (
        f"{epoch}\t{lr:.6g}\t{train_loss:.6f}\t"
        f"{exact:.2f}\t{bleu:.2f}\t{edit:.2f}\t{seconds:.2f}"
    )


def train(model, train_set, val_set, cfg, out_dir, meta=None, start_epoch=0, echo=None):
    """Run the SGD loop, logging one metrics line per epoch.

    Writes ``metrics.tsv``, a checkpoint per epoch, and ``best.cvmt`` for
    the highest validation exact match, all under ``out_dir``.  A non-finite
    loss aborts with the offending batch named; the previous epoch's files
    stay on disk untouched.  Pass ``start_epoch`` and a restored model to
    resume; the metrics log is then appended to.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    meta = {str(k): str(v) for k, v in (meta or {}).items()}
    result = TrainResult()
    result.best_path = os.path.join(out_dir, "best.cvmt")
    log_path = os.path.join(out_dir, "metrics.tsv")
    if start_epoch and os.path.exists(result.best_path):
        prior, _ = load_checkpoint(result.best_path)
        result.best_exact = float(prior.get("val_exact", -1.0))
        result.best_epoch = int(prior.get("epoch", -1))
    val_cap = _val_decode_cap(model, val_set) if val_set and len(val_set) else None
    with open(log_path, "a" if start_epoch else "w") as log:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            batches = make_batches(train_set, cfg.batch_size, seed=[cfg.seed, epoch])
            loss_sum = 0.0
            positions = 0
            lr = cfg.lr
            for i, batch in enumerate(batches):
                with record():
                    loss = batch_loss(batch, model)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch} batch {i}; "
                            f"checkpoints from earlier epochs are retained"
                        )
                    backward(loss)
                if cfg.grad_check and epoch == start_epoch and i == 0:
                    _grad_spot_check(model, batch)
                lr = lr_at(epoch, cfg)
                sgd_step(model.parameters(), lr)
                loss_sum += value * batch.live_positions
                positions += batch.live_positions
            train_loss = loss_sum / positions
            report = None
            if val_cap is not None:
                cands, refs = decode_dataset(model, val_set, max_len=val_cap)
                report = evaluate(cands, refs)
            seconds = time.perf_counter() - t0
            line = _log_line(epoch, lr, train_loss, report, seconds)
            log.write(line + "\n")
            log.flush()
            if echo:
                echo(line)
            epoch_meta = dict(meta)
            epoch_meta["epoch"] = str(epoch)
            epoch_meta["val_exact"] = f"{report.exact_match:.4f}" if report else "-1"
            result.last_path = os.path.join(out_dir, f"epoch_{epoch:03d}.cvmt")
            save_checkpoint(result.last_path, model.parameters(), epoch_meta)
            exact = report.exact_match if report else float(epoch)
            if exact > result.best_exact:
                result.best_exact = exact
                result.best_epoch = epoch
                save_checkpoint(result.best_path, model.parameters(), epoch_meta)
            result.log_lines.append(line)
            result.final_train_loss = train_loss
    return result


# ------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    param_count: int
    batch: int
    positions: int
    reps: int
    medians: dict  # mode -> seconds

    def lines(self):
        out = [f"param_count\t{self.param_count}"]
        for mode in ("parallel_scoring", "stepwise"):
            if mode in self.medians:
                out.append(
                    f"{mode}\t{self.medians[mode]:.6f}\t"
                    f"{self.batch}\t{self.positions}\t{self.reps}"
                )
        return out


def _score_parallel(model, ids, V):
    from . import decoder as dec

    g = dec.embed_targets(ids, model.params, model.config.decoder)
    h, _ = dec.run_decoder(g, V, model.params, model.config.decoder)
    return dec.logits(h, model.params)


def bench_decode(model, images, positions, reps=21, modes=("parallel_scoring", "stepwise"), seed=0):
    """Median wall time of scoring a fixed batch, per decoding mode.

    parallel_scoring runs the whole teacher-forced pass at once; stepwise
    re-runs the decoder on every prefix, the cost profile of decoding
    without parallel scoring.  Encoding is hoisted out of the timed region:
    it is identical work in both modes and would only dilute the contrast.
    """
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    limit = model.config.decoder.max_target_positions
    if positions < 1 or positions > limit:
        raise ConfigError(f"positions must be in [1, {limit}], got {positions}")
    rng = np.random.default_rng(seed)
    batch = images.data.shape[0]
    ids = rng.integers(4, model.config.vocab_size, size=(batch, positions))
    ids[:, 0] = START_ID
    V = model.encode(images)
    medians = {}
    for mode in modes:
        if mode not in ("parallel_scoring", "stepwise"):
            raise ConfigError(f"unknown bench mode {mode!r}")
        times = []
        for _ in range(2):  # warm-up, untimed
            _score_parallel(model, ids[:, :2], V)
        for _ in range(reps):
            t0 = time.perf_counter()
            if mode == "parallel_scoring":
                _score_parallel(model, ids, V)
            else:
                for n in range(1, positions + 1):
                    _score_parallel(model, ids[:, :n], V)
            times.append(time.perf_counter() - t0)
        medians[mode] = float(np.median(times))
    return BenchReport(
        param_count=model.param_count(),
        batch=batch,
        positions=positions,
        reps=reps,
        medians=medians,
    )

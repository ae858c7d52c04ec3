"""Synthetic corpus pipeline: tokenizer, vocabulary, expression generator,
rasterizer, bucketed padding, and manifest I/O.

The package trains on images it draws itself: a depth-limited grammar samples
expression trees, a dot-matrix renderer turns them into grayscale bitmaps
(0 = ink, 255 = background), and manifests in the IM2LATEX style (TSV of
`relative/path.pgm<TAB>tok1 tok2 ...`) tie images to token sequences, so
externally prepared corpora in the same shape load through the same door.

Everything here is deterministic: a corpus is a pure function of
(seed, config), byte for byte.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .glyphs import GLYPHS

log = logging.getLogger(__name__)

PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

# Multiples of the encoder's total downsample factor (8); two taller buckets
# catch stacked fractions.
DEFAULT_BUCKETS = ((128, 32), (160, 32), (192, 32), (256, 32), (160, 64), (256, 64))


# ---------------------------------------------------------------- tokenizer

def tokenize(text):
    """Split math-mode markup into tokens.

    A backslash followed by letters is one token; any other non-space
    character is a token by itself; whitespace only separates.
    """
    toks = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ord(ch) > 127:
            raise DataError(f"non-ASCII character {ch!r} at byte {i}")
        if ch == "\\":
            j = i + 1
            while j < n and text[j].isalpha():
                j += 1
            if j == i + 1:
                raise DataError(f"backslash without command name at byte {i}")
            toks.append(text[i:j])
            i = j
        else:
            toks.append(ch)
            i += 1
    return toks


def detokenize(tokens):
    """Inverse of tokenize on canonical sequences.

    A space is required only where gluing would change the parse: after a
    backslash command that is followed by a token starting with a letter.
    """
    parts = []
    prev = None
    for tok in tokens:
        if prev is not None and prev.startswith("\\") and tok[:1].isalpha():
            parts.append(" ")
        parts.append(tok)
        prev = tok
    return "".join(parts)


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    """Token <-> id table; line number in the vocab file is the id."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise DataError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self._tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_sequences(cls, seqs):
        seen = sorted({t for s in seqs for t in s} - set(RESERVED))
        return cls(list(RESERVED) + seen)

    def __len__(self):
        return len(self._tokens)

    def token(self, i):
        return self._tokens[i]

    def id(self, tok):
        try:
            return self._index[tok]
        except KeyError:
            raise DataError(f"token {tok!r} not in vocabulary") from None

    def encode(self, tokens):
        """Map tokens to ids; unknown (or reserved-literal) tokens become unk.

        Returns (ids, unk_count)."""
        ids = []
        unk = 0
        for t in tokens:
            i = self._index.get(t)
            if i is None or i < len(RESERVED):
                i = UNK_ID
                unk += 1
            ids.append(i)
        return np.asarray(ids, dtype=np.int64), unk

    def tokens_of(self, ids):
        """ids back to token strings, dropping reserved ids."""
        return [self._tokens[i] for i in ids if i >= len(RESERVED)]

    def serialize(self):
        return "".join(t + "\n" for t in self._tokens)

    def sha256(self):
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(self.serialize())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocabulary file not found: {path}")
        lines = path.read_text().splitlines()
        return cls(lines)


# ---------------------------------------------------------------- expression grammar

@dataclass(frozen=True)
class ExprNode:
    """One node of an expression tree.

    kind: symbol | sequence | superscript | subscript | fraction.  A symbol
    holds its token in `symbol`; the others hold children (script nodes store
    (base, arm), fractions (numerator, denominator)).
    """

    kind: str
    symbol: str | None = None
    children: tuple = ()


def sym(s):
    return ExprNode("symbol", symbol=s)


DEFAULT_ALPHABET = tuple(
    list("0123456789abcdntuxyz+-=()") + ["\\alpha", "\\beta", "\\pi", "\\theta"]
)


@dataclass(frozen=True)
class GrammarConfig:
    max_depth: int = 2
    top_len: tuple = (3, 7)
    nested_len: tuple = (1, 2)
    p_symbol: float = 0.64
    p_superscript: float = 0.14
    p_subscript: float = 0.10
    p_fraction: float = 0.12
    alphabet: tuple = DEFAULT_ALPHABET

    def validate(self):
        total = self.p_symbol + self.p_superscript + self.p_subscript + self.p_fraction
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"grammar probabilities sum to {total}, expected 1")
        for lo, hi in (self.top_len, self.nested_len):
            if not (1 <= lo <= hi):
                raise DataError(f"bad length range ({lo}, {hi})")
        missing = [s for s in self.alphabet if s not in GLYPHS]
        if missing:
            raise DataError(f"alphabet symbols without glyphs: {missing}")


def node_tokens(node):
    """Canonical token serialization of a tree."""
    if node.kind == "symbol":
        return [node.symbol]
    if node.kind == "sequence":
        return [t for c in node.children for t in node_tokens(c)]
    if node.kind == "superscript":
        base, arm = node.children
        return node_tokens(base) + ["^", "{"] + node_tokens(arm) + ["}"]
    if node.kind == "subscript":
        base, arm = node.children
        return node_tokens(base) + ["_", "{"] + node_tokens(arm) + ["}"]
    if node.kind == "fraction":
        num, den = node.children
        return ["\\frac", "{"] + node_tokens(num) + ["}", "{"] + node_tokens(den) + ["}"]
    raise DataError(f"unknown node kind {node.kind!r}")


def serialize(node):
    return detokenize(node_tokens(node))


def _gen_symbol(rng, cfg):
    return sym(cfg.alphabet[int(rng.integers(len(cfg.alphabet)))])


def _gen_atom(rng, cfg, depth):
    u = float(rng.random())
    if depth >= cfg.max_depth or u < cfg.p_symbol:
        return _gen_symbol(rng, cfg)
    if u < cfg.p_symbol + cfg.p_superscript:
        return ExprNode("superscript", children=(_gen_symbol(rng, cfg), _gen_expr(rng, cfg, depth + 1)))
    if u < cfg.p_symbol + cfg.p_superscript + cfg.p_subscript:
        return ExprNode("subscript", children=(_gen_symbol(rng, cfg), _gen_expr(rng, cfg, depth + 1)))
    num = _gen_expr(rng, cfg, depth + 1)
    den = _gen_expr(rng, cfg, depth + 1)
    return ExprNode("fraction", children=(num, den))


def _gen_expr(rng, cfg, depth):
    if depth >= cfg.max_depth:
        return _gen_symbol(rng, cfg)
    lo, hi = cfg.top_len if depth == 0 else cfg.nested_len
    count = int(rng.integers(lo, hi + 1))
    atoms = tuple(_gen_atom(rng, cfg, depth) for _ in range(count))
    return atoms[0] if count == 1 else ExprNode("sequence", children=atoms)


def generate_expr(rng, grammar=None):
    """Sample one expression; returns (tree, canonical token sequence).

    `rng` is a numpy Generator or anything default_rng accepts as a seed.
    """
    cfg = grammar or GrammarConfig()
    cfg.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    node = _gen_expr(rng, cfg, 0)
    return node, node_tokens(node)


# ---------------------------------------------------------------- rasterizer

@dataclass
class _Box:
    """Rendered ink mask plus the row other boxes align to (the midline)."""

    ink: np.ndarray  # bool (h, w)
    mid: int

    @property
    def h(self):
        return self.ink.shape[0]

    @property
    def w(self):
        return self.ink.shape[1]


def _glyph_box(symbol, unit):
    rows = GLYPHS.get(symbol)
    if rows is None:
        raise DataError(f"no glyph for symbol {symbol!r}")
    h = max(1, round(7 * unit))
    w = max(1, round(5 * unit))
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        gr = min(6, r * 7 // h)
        line = rows[gr]
        for c in range(w):
            if line[min(4, c * 5 // w)] == "#":
                out[r, c] = True
    return _Box(out, h // 2)


def _hcat(boxes, gap):
    mid = max(b.mid for b in boxes)
    h = mid + max(b.h - b.mid for b in boxes)
    w = sum(b.w for b in boxes) + gap * (len(boxes) - 1)
    out = np.zeros((h, w), dtype=bool)
    x = 0
    for b in boxes:
        r0 = mid - b.mid
        out[r0 : r0 + b.h, x : x + b.w] |= b.ink
        x += b.w + gap
    return _Box(out, mid)


def _beside(base, arm, gap, shift):
    """Place `arm` right of `base`, its midline `shift` rows below base's."""
    a_top = base.mid + shift - arm.mid
    top = min(0, a_top)
    h = max(base.h, a_top + arm.h) - top
    out = np.zeros((h, base.w + gap + arm.w), dtype=bool)
    out[-top : -top + base.h, : base.w] = base.ink
    out[a_top - top : a_top - top + arm.h, base.w + gap :] = arm.ink
    return _Box(out, base.mid - top)


def _stack_fraction(num, den, unit):
    pad = max(1, round(unit))
    barh = max(1, round(unit * 0.5))
    gap = max(1, round(unit * 0.5))
    w = max(num.w, den.w) + 2 * pad
    h = num.h + gap + barh + gap + den.h
    out = np.zeros((h, w), dtype=bool)
    x = (w - num.w) // 2
    out[: num.h, x : x + num.w] = num.ink
    out[num.h + gap : num.h + gap + barh, :] = True
    x = (w - den.w) // 2
    out[num.h + gap + barh + gap :, x : x + den.w] = den.ink
    return _Box(out, num.h + gap + barh // 2)


def _render(node, unit):
    if node.kind == "symbol":
        return _glyph_box(node.symbol, unit)
    if node.kind == "sequence":
        return _hcat([_render(c, unit) for c in node.children], gap=max(1, round(unit)))
    if node.kind in ("superscript", "subscript"):
        base, arm = node.children
        bbox = _render(base, unit)
        abox = _render(arm, unit * 0.7)
        shift = round(0.4 * bbox.h)
        return _beside(bbox, abox, gap=max(1, round(unit * 0.5)), shift=-shift if node.kind == "superscript" else shift)
    if node.kind == "fraction":
        num, den = node.children
        return _stack_fraction(_render(num, unit), _render(den, unit), unit)
    raise DataError(f"unknown node kind {node.kind!r}")


def rasterize(expr, base_glyph_px=10):
    """Render a tree to a u8 bitmap: 0 = ink, 255 = background.

    base_glyph_px sets the width of a top-level glyph; layout follows the
    rules in _render, then the result is tightly cropped and given a 4 px
    margin on every side.
    """
    box = _render(expr, base_glyph_px / 5)
    ink = box.ink
    rows = np.nonzero(ink.any(axis=1))[0]
    cols = np.nonzero(ink.any(axis=0))[0]
    if rows.size == 0:
        raise DataError("expression rendered to an empty bitmap")
    ink = ink[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    framed = np.zeros((ink.shape[0] + 8, ink.shape[1] + 8), dtype=bool)
    framed[4:-4, 4:-4] = ink
    return np.where(framed, np.uint8(0), np.uint8(255))


# ---------------------------------------------------------------- buckets

def bucket_and_pad(image, buckets=DEFAULT_BUCKETS):
    """Center the image in the smallest bucket that holds it.

    Buckets are (width, height).  Raises DataError when none fits; corpus
    loading catches that, logs a warning, and drops the sample.
    """
    h, w = image.shape
    for bw, bh in sorted(buckets, key=lambda b: (b[0] * b[1], b[0])):
        if w <= bw and h <= bh:
            out = np.full((bh, bw), np.uint8(255))
            y0 = (bh - h) // 2
            x0 = (bw - w) // 2
            out[y0 : y0 + h, x0 : x0 + w] = image
            return out, (bw, bh)
    raise DataError(f"image {w}x{h} exceeds the largest bucket")


def image_to_input(image):
    """Invert and scale a stored grayscale image for the model.

    Files keep dark-on-light (0 = ink); the model sees [0, 1] with 1 = ink.
    """
    return (255 - np.asarray(image, dtype=np.float32)) / np.float32(255)


# ---------------------------------------------------------------- PGM I/O

def write_pgm(path, image):
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()

    def bad(pos, why):
        return DataError(f"malformed PGM {path}: {why} at byte {pos}")

    if data[:2] != b"P5":
        raise bad(0, "missing P5 magic")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise bad(pos, "truncated header")
        c = data[pos : pos + 1]
        if c == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise bad(pos, f"unexpected byte {c!r}")
    w, h, maxval = fields
    if maxval != 255:
        raise bad(pos, f"unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    if len(data) - pos < w * h:
        raise bad(len(data), f"expected {w * h} pixels, found {len(data) - pos}")
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- corpus

@dataclass
class Sample:
    image: np.ndarray  # u8 (bucket_h, bucket_w), 0 = ink
    token_ids: np.ndarray  # int64, no reserved ids except unk
    bucket: tuple
    path: str | None = None


@dataclass
class Dataset:
    samples: list
    vocab: Vocabulary
    unk_count: int = 0
    discarded: int = 0

    def __len__(self):
        return len(self.samples)


@dataclass
class CorpusReport:
    n: int
    vocab_size: int
    mean_tokens: float
    bucket_counts: dict = field(default_factory=dict)
    resampled: int = 0
    splits: dict = field(default_factory=dict)


def _fits(image, buckets):
    h, w = image.shape
    return any(w <= bw and h <= bh for bw, bh in buckets)


def build_corpus(n, seed, out_dir, grammar=None, base_glyph_px=10, buckets=DEFAULT_BUCKETS):
    """Write a synthetic corpus: PGMs, split manifests, vocabulary.

    Each sample is a pure function of (seed, index): attempt a draw, and if
    the rendering fits no bucket, redraw with a bumped attempt counter so the
    corpus always holds exactly n samples.
    """
    cfg = grammar or GrammarConfig()
    cfg.validate()
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {out}: {exc}") from exc

    token_seqs = []
    report = CorpusReport(n=n, vocab_size=0, mean_tokens=0.0)
    for i in range(n):
        for attempt in range(50):
            rng = np.random.default_rng([seed, i, attempt])
            node, toks = generate_expr(rng, cfg)
            image = rasterize(node, base_glyph_px)
            if _fits(image, buckets):
                break
            report.resampled += 1
        else:
            raise DataError(f"sample {i}: nothing fit the buckets after 50 draws")
        write_pgm(img_dir / f"{i:06d}.pgm", image)
        token_seqs.append(toks)
        _, bucket = bucket_and_pad(image, buckets)
        report.bucket_counts[bucket] = report.bucket_counts.get(bucket, 0) + 1

    vocab = Vocabulary.from_sequences(token_seqs)
    vocab.save(out / "vocab.txt")
    report.vocab_size = len(vocab)
    report.mean_tokens = float(np.mean([len(t) for t in token_seqs])) if n else 0.0

    split_rng = np.random.default_rng([seed, 7919])  # fixed salt for the split
    order = split_rng.permutation(n)
    n_train = (n * 8) // 10
    n_val = n // 10
    parts = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    for name, idxs in parts.items():
        lines = [f"images/{i:06d}.pgm\t{' '.join(token_seqs[i])}\n" for i in idxs]
        (out / f"{name}.tsv").write_text("".join(lines))
        report.splits[name] = len(idxs)
    return report


def load_corpus(manifest_path, vocab_path, buckets=DEFAULT_BUCKETS):
    """Read a manifest + vocabulary into a Dataset of padded samples."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    vocab = Vocabulary.load(vocab_path)
    root = manifest_path.parent
    samples = []
    unk_total = 0
    discarded = 0
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{manifest_path}:{lineno}: expected TAB-separated path and tokens")
        rel, text = line.split("\t", 1)
        img_path = root / rel
        if not img_path.exists():
            raise DataError(f"{manifest_path}:{lineno}: image file missing: {img_path}")
        image = read_pgm(img_path)
        try:
            padded, bucket = bucket_and_pad(image, buckets)
        except DataError as exc:
            log.warning("%s:%d: %s; sample dropped", manifest_path, lineno, exc)
            discarded += 1
            continue
        ids, unk = vocab.encode(text.split())
        unk_total += unk
        samples.append(Sample(padded, ids, bucket, str(rel)))
    if not samples:
        raise DataError(f"empty dataset: {manifest_path}")
    if unk_total:
        log.warning("%s: %d tokens mapped to unk", manifest_path, unk_total)
    return Dataset(samples, vocab, unk_count=unk_total, discarded=discarded)

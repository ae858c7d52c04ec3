"""Tokenizer, grammar, rasterizer, buckets, PGM I/O, and corpus round trips."""

import numpy as np
import pytest

from convtex import data as D
from convtex.errors import DataError


# ---------------------------------------------------------------- tokenize

def test_tokenize_caret_braces():
    assert D.tokenize("x^{2}") == ["x", "^", "{", "2", "}"]


def test_tokenize_command():
    assert D.tokenize(r"\frac{a}{b}") == ["\\frac", "{", "a", "}", "{", "b", "}"]


def test_tokenize_whitespace_separates():
    assert D.tokenize("a \\alpha") == ["a", "\\alpha"]
    assert D.tokenize("  a\t\nb ") == ["a", "b"]


def test_tokenize_command_glued_to_letter():
    # without a following space the letters would fuse into the command
    assert D.tokenize(r"\alphax") == ["\\alphax"]


def test_tokenize_trailing_backslash():
    with pytest.raises(DataError, match="byte 3"):
        D.tokenize("ab \\")


def test_tokenize_backslash_before_digit():
    with pytest.raises(DataError, match="byte 0"):
        D.tokenize("\\2")


def test_tokenize_rejects_non_ascii():
    with pytest.raises(DataError, match="non-ASCII"):
        D.tokenize("x\u03b1")


def test_detokenize_spaces_only_where_needed():
    toks = ["\\frac", "{", "a", "}", "{", "b", "}"]
    assert D.detokenize(toks) == "\\frac{a}{b}"
    assert D.detokenize(["a", "\\alpha", "b"]) == "a\\alpha b"


@pytest.mark.parametrize("seed", range(30))
def test_tokenize_detokenize_round_trip(seed):
    _, toks = D.generate_expr(seed)
    assert D.tokenize(D.detokenize(toks)) == toks


# ---------------------------------------------------------------- vocabulary

def test_vocab_reserved_prefix_required():
    with pytest.raises(DataError, match="reserved"):
        D.Vocabulary(["a", "b"])


def test_vocab_rejects_duplicates():
    with pytest.raises(DataError, match="duplicate"):
        D.Vocabulary(list(D.RESERVED) + ["a", "a"])


def test_vocab_lookup_round_trip():
    v = D.Vocabulary.from_sequences([["b", "a"], ["c"]])
    # reserved first, then sorted payload tokens
    assert [v.token(i) for i in range(len(v))] == list(D.RESERVED) + ["a", "b", "c"]
    for i in range(len(v)):
        assert v.id(v.token(i)) == i


def test_vocab_encode_counts_unk():
    v = D.Vocabulary.from_sequences([["a", "b"]])
    ids, unk = v.encode(["a", "z", "b", "z"])
    assert unk == 2
    assert ids.tolist() == [v.id("a"), D.UNK_ID, v.id("b"), D.UNK_ID]
    # literal reserved strings in a manifest also become unk
    ids, unk = v.encode(["<pad>"])
    assert ids.tolist() == [D.UNK_ID] and unk == 1


def test_vocab_tokens_of_drops_reserved():
    v = D.Vocabulary.from_sequences([["a"]])
    ids, _ = v.encode(["a"])
    padded = [D.START_ID] + ids.tolist() + [D.END_ID, D.PAD_ID]
    assert v.tokens_of(padded) == ["a"]


def test_vocab_save_load_sha(tmp_path):
    v = D.Vocabulary.from_sequences([["x", "+", "\\pi"]])
    p = tmp_path / "vocab.txt"
    v.save(p)
    w = D.Vocabulary.load(p)
    assert w.serialize() == v.serialize()
    assert w.sha256() == v.sha256()


def test_vocab_load_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        D.Vocabulary.load(tmp_path / "nope.txt")


# ---------------------------------------------------------------- grammar

def test_generate_same_seed_same_tree():
    n1, t1 = D.generate_expr(123)
    n2, t2 = D.generate_expr(123)
    assert n1 == n2 and t1 == t2


def test_generate_depth_zero_single_symbol():
    cfg = D.GrammarConfig(max_depth=0)
    for seed in range(20):
        node, toks = D.generate_expr(seed, cfg)
        assert node.kind == "symbol" and len(toks) == 1


def test_generate_mean_length_in_band():
    rng = np.random.default_rng(0)
    lengths = [len(D.generate_expr(rng)[1]) for _ in range(10_000)]
    assert 8 <= np.mean(lengths) <= 40


def test_grammar_probabilities_must_sum_to_one():
    with pytest.raises(DataError, match="sum"):
        D.GrammarConfig(p_symbol=0.9).validate()


def test_grammar_alphabet_needs_glyphs():
    with pytest.raises(DataError, match="\\\\qqq"):
        D.GrammarConfig(alphabet=("x", "\\qqq")).validate()


def test_node_tokens_fraction_shape():
    node = D.ExprNode("fraction", children=(D.sym("a"), D.sym("b")))
    assert D.node_tokens(node) == ["\\frac", "{", "a", "}", "{", "b", "}"]


# ---------------------------------------------------------------- rasterize

def test_rasterize_deterministic():
    node, _ = D.generate_expr(5)
    a = D.rasterize(node)
    b = D.rasterize(node)
    assert a.dtype == np.uint8 and np.array_equal(a, b)


def test_rasterize_single_symbol_is_glyph_plus_margin():
    img = D.rasterize(D.sym("x"), base_glyph_px=10)
    # 10 px wide glyph at 5x7 dots -> 14 px tall, tight-cropped + 4 px margin
    assert img.shape[1] <= 10 + 8 and img.shape[0] <= 14 + 8
    inner = img[4:-4, 4:-4]
    assert (inner == 0).any()
    # margin is pure background
    assert (img[:4] == 255).all() and (img[:, :4] == 255).all()
    assert (img[-4:] == 255).all() and (img[:, -4:] == 255).all()


def test_rasterize_superscript_grows_both_ways():
    plain = D.rasterize(D.sym("x"))
    scripted = D.rasterize(
        D.ExprNode("superscript", children=(D.sym("x"), D.sym("2")))
    )
    assert scripted.shape[1] > plain.shape[1]
    assert scripted.shape[0] > plain.shape[0]


def test_rasterize_unknown_glyph():
    with pytest.raises(DataError, match="'w'"):
        D.rasterize(D.sym("w"))  # not in the atlas


def test_fraction_taller_than_children():
    frac = D.ExprNode("fraction", children=(D.sym("a"), D.sym("b")))
    img = D.rasterize(frac)
    assert img.shape[0] > D.rasterize(D.sym("a")).shape[0]


# ---------------------------------------------------------------- buckets

def test_bucket_picks_smallest_and_centers():
    img = np.zeros((30, 100), dtype=np.uint8)  # all ink
    out, bucket = D.bucket_and_pad(img, [(160, 32), (128, 32)])
    assert bucket == (128, 32)
    assert out.shape == (32, 128)
    y0, x0 = (32 - 30) // 2, (128 - 100) // 2
    assert (out[y0 : y0 + 30, x0 : x0 + 100] == 0).all()
    mask = np.ones_like(out, dtype=bool)
    mask[y0 : y0 + 30, x0 : x0 + 100] = False
    assert (out[mask] == 255).all()


def test_bucket_exact_fit_unchanged():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(32, 128)).astype(np.uint8)
    out, bucket = D.bucket_and_pad(img, [(128, 32)])
    assert bucket == (128, 32) and np.array_equal(out, img)


def test_bucket_too_wide_rejected():
    img = np.zeros((20, 500), dtype=np.uint8)
    with pytest.raises(DataError, match="exceeds"):
        D.bucket_and_pad(img)


def test_default_buckets_divisible_by_downsample():
    from convtex.encoder import EncoderConfig

    factor = EncoderConfig().downsample_factor()
    for w, h in D.DEFAULT_BUCKETS:
        assert w % factor == 0 and h % factor == 0


def test_image_to_input_polarity():
    img = np.array([[0, 255], [128, 64]], dtype=np.uint8)
    x = D.image_to_input(img)
    assert x.dtype == np.float32
    assert x[0, 0] == 1.0 and x[0, 1] == 0.0
    assert 0.0 < x[1, 0] < 1.0


# ---------------------------------------------------------------- PGM I/O

def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(17, 23)).astype(np.uint8)
    p = tmp_path / "t.pgm"
    D.write_pgm(p, img)
    assert np.array_equal(D.read_pgm(p), img)


def test_pgm_header_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
    img = D.read_pgm(p)
    assert img.shape == (1, 2) and img.tolist() == [[0, 255]]


def test_pgm_bad_magic(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n1 1\n255\n\x00")
    with pytest.raises(DataError, match="magic.*byte 0"):
        D.read_pgm(p)


def test_pgm_truncated_header(tmp_path):
    p = tmp_path / "tr.pgm"
    p.write_bytes(b"P5\n2 2\n")
    with pytest.raises(DataError, match="truncated header"):
        D.read_pgm(p)


def test_pgm_bad_maxval(tmp_path):
    p = tmp_path / "mx.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataError, match="maxval"):
        D.read_pgm(p)


def test_pgm_short_pixel_data(tmp_path):
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n3 2\n255\n\x00\x00")
    with pytest.raises(DataError, match="expected 6 pixels, found 2"):
        D.read_pgm(p)


# ---------------------------------------------------------------- corpus

def test_build_corpus_layout(tmp_path):
    report = D.build_corpus(10, seed=1, out_dir=tmp_path)
    assert sorted(p.name for p in (tmp_path / "images").iterdir()) == [
        f"{i:06d}.pgm" for i in range(10)
    ]
    for name in ("train.tsv", "val.tsv", "test.tsv", "vocab.txt"):
        assert (tmp_path / name).exists()
    assert report.n == 10
    assert report.splits == {"train": 8, "val": 1, "test": 1}
    assert sum(report.bucket_counts.values()) == 10


def _corpus_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_build_corpus_deterministic(tmp_path):
    D.build_corpus(12, seed=9, out_dir=tmp_path / "a")
    D.build_corpus(12, seed=9, out_dir=tmp_path / "b")
    assert _corpus_bytes(tmp_path / "a") == _corpus_bytes(tmp_path / "b")


def test_build_corpus_seed_changes_bytes(tmp_path):
    D.build_corpus(6, seed=1, out_dir=tmp_path / "a")
    D.build_corpus(6, seed=2, out_dir=tmp_path / "b")
    assert _corpus_bytes(tmp_path / "a") != _corpus_bytes(tmp_path / "b")


def test_load_corpus_round_trip(tmp_path):
    D.build_corpus(10, seed=4, out_dir=tmp_path)
    ds = D.load_corpus(tmp_path / "train.tsv", tmp_path / "vocab.txt")
    manifest = (tmp_path / "train.tsv").read_text().splitlines()
    assert len(ds) == len(manifest)
    assert ds.unk_count == 0 and ds.discarded == 0
    for sample, line in zip(ds.samples, manifest):
        rel, text = line.split("\t")
        assert sample.path == rel
        assert ds.vocab.tokens_of(sample.token_ids) == text.split()
        assert sample.image.shape == (sample.bucket[1], sample.bucket[0])


def test_load_corpus_unk_token(tmp_path):
    D.build_corpus(4, seed=4, out_dir=tmp_path)
    manifest = tmp_path / "train.tsv"
    first = manifest.read_text().splitlines()[0]
    manifest.write_text(first + " \\nosuchtoken\n")
    ds = D.load_corpus(manifest, tmp_path / "vocab.txt")
    assert ds.unk_count == 1
    assert ds.samples[0].token_ids[-1] == D.UNK_ID


def test_load_corpus_empty_manifest(tmp_path):
    D.build_corpus(4, seed=4, out_dir=tmp_path)
    empty = tmp_path / "none.tsv"
    empty.write_text("\n")
    with pytest.raises(DataError, match="empty dataset"):
        D.load_corpus(empty, tmp_path / "vocab.txt")


def test_load_corpus_missing_image(tmp_path):
    D.build_corpus(4, seed=4, out_dir=tmp_path)
    manifest = tmp_path / "train.tsv"
    manifest.write_text("images/999999.pgm\tx\n")
    with pytest.raises(DataError, match="999999"):
        D.load_corpus(manifest, tmp_path / "vocab.txt")


def test_load_corpus_malformed_line(tmp_path):
    D.build_corpus(4, seed=4, out_dir=tmp_path)
    manifest = tmp_path / "train.tsv"
    manifest.write_text("no-tab-here\n")
    with pytest.raises(DataError, match="TAB"):
        D.load_corpus(manifest, tmp_path / "vocab.txt")


def test_load_corpus_drops_oversized(tmp_path):
    D.build_corpus(4, seed=4, out_dir=tmp_path)
    ds = D.load_corpus(
        tmp_path / "train.tsv", tmp_path / "vocab.txt", buckets=[(256, 64), (64, 16)]
    )
    full = D.load_corpus(tmp_path / "train.tsv", tmp_path / "vocab.txt")
    assert len(ds) + ds.discarded == len(full)

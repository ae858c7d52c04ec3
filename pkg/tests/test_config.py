"""Config files, override merging, batched validation, checkpoint metadata."""

import numpy as np
import pytest

from convtex import config as CF
from convtex.data import DEFAULT_BUCKETS, Vocabulary
from convtex.errors import ConfigError


def test_bucket_format_round_trip():
    assert CF.parse_buckets("128x32, 160x64") == ((128, 32), (160, 64))
    assert CF.format_buckets(((128, 32),)) == "128x32"
    assert CF.parse_buckets(CF.format_buckets(DEFAULT_BUCKETS)) == DEFAULT_BUCKETS
    with pytest.raises(ConfigError, match="WIDTHxHEIGHT"):
        CF.parse_buckets("128")
    with pytest.raises(ConfigError, match="WIDTHxHEIGHT"):
        CF.parse_buckets("axb")


def test_block_plan_round_trip():
    plan = ((64, False), (128, True), (256, False))
    text = CF.format_block_plan(plan)
    assert text == "64,128d,256"
    assert CF.parse_block_plan(text) == plan
    with pytest.raises(ConfigError, match="CHANNELS"):
        CF.parse_block_plan("64,x")


def test_defaults_validate():
    cfg = CF.RunConfig()
    cfg.validate(vocab_size=40)
    assert cfg.d_model == 512 and cfg.decoder_layers == 7 and cfg.kernel_width == 3
    assert cfg.lr == 0.001 and cfg.decay == 0.8 and cfg.decay_every_epochs == 3
    assert cfg.batch_size == 15


def test_scaled_encoder_from_d_model():
    cfg = CF.RunConfig(d_model=128)
    enc = cfg.encoder_config()
    assert enc.block_plan[-1][0] == 128
    assert enc.stem_channels == 16
    explicit = CF.RunConfig(d_model=128, stem_channels=24, block_plan="32,64d,128")
    enc2 = explicit.encoder_config()
    assert enc2.stem_channels == 24
    assert enc2.block_plan == ((32, False), (64, True), (128, False))


def test_validate_collects_many_problems():
    cfg = CF.RunConfig(d_model=33, kernel_width=0, lr=-1.0, buckets="100x30")
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    msg = str(err.value)
    assert "GLU" in msg
    assert "kernel" in msg
    assert "lr" in msg
    assert "downsample" in msg  # 100x30 not divisible by 8


def test_validate_bucket_cross_check_ok():
    CF.RunConfig(buckets="64x32,128x32").validate()


def test_read_config_file(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text(
        """
# full line comment
d-model = 128   # trailing comment
lr=0.05
grad-check = yes
"""
    )
    pairs = CF.read_config_file(p)
    assert pairs == {"d-model": "128", "lr": "0.05", "grad-check": "yes"}
    cfg = CF.make_run_config(p)
    assert cfg.d_model == 128 and cfg.lr == 0.05 and cfg.grad_check is True


def test_config_file_problems_batched(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text("d-model = 128\nno equals sign\nd-model = 256\n")
    with pytest.raises(ConfigError) as err:
        CF.read_config_file(p)
    msg = str(err.value)
    assert ":2:" in msg and "key=value" in msg
    assert ":3:" in msg and "duplicate" in msg


def test_make_run_config_overrides_beat_file(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text("lr = 0.05\nepochs = 3\n")
    cfg = CF.make_run_config(p, {"lr": 0.2, "seed": None})
    assert cfg.lr == 0.2  # override wins
    assert cfg.epochs == 3  # file value survives
    assert cfg.seed == 0  # None override means "not given"


def test_make_run_config_unknown_and_badly_typed_batched(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text("warp-speed = 9\nepochs = soon\n")
    with pytest.raises(ConfigError) as err:
        CF.make_run_config(p)
    msg = str(err.value)
    assert "warp-speed" in msg
    assert "soon" in msg and "int" in msg


def test_string_override_is_converted():
    cfg = CF.make_run_config(None, {"d-model": "64", "grad-check": "no"})
    assert cfg.d_model == 64 and cfg.grad_check is False
    with pytest.raises(ConfigError, match="float"):
        CF.make_run_config(None, {"lr": "abc"})


def _vocab():
    return Vocabulary.from_sequences([["x", "+", "\\alpha", "2", "{", "}"]])


def test_model_meta_round_trip():
    vocab = _vocab()
    run = CF.RunConfig(d_model=64, decoder_layers=2, kernel_width=3)
    mc = run.model_config(len(vocab))
    meta = CF.model_meta(mc, vocab, buckets=run.bucket_list(), extra={"epoch": 5})
    assert meta["epoch"] == "5"
    assert meta["vocab_sha256"] == vocab.sha256()

    mc2 = CF.model_config_from_meta(meta)
    assert mc2.vocab_size == len(vocab)
    assert mc2.d_model == 64
    assert mc2.decoder.depth == 2
    assert mc2.decoder.kernel_width == 3
    assert mc2.encoder.block_plan == mc.encoder.block_plan
    assert mc2.encoder.stem_channels == mc.encoder.stem_channels

    v2 = CF.vocab_from_meta(meta)
    assert v2.serialize() == vocab.serialize()
    assert CF.buckets_from_meta(meta) == run.bucket_list()


def test_model_meta_missing_key_rejected():
    vocab = _vocab()
    mc = CF.RunConfig(d_model=64).model_config(len(vocab))
    meta = CF.model_meta(mc, vocab)
    meta.pop("d_model")
    with pytest.raises(Exception):
        CF.model_config_from_meta(meta)


def test_model_meta_records_conventions():
    vocab = _vocab()
    mc = CF.RunConfig(d_model=64).model_config(len(vocab))
    meta = CF.model_meta(mc, vocab)
    assert meta["init"] == CF.INIT_SCHEME
    assert meta["ink"] == CF.INK_RULE
    assert meta["arch"] == "residual"

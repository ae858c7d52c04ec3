"""Full image-to-sequence model: encoder + positions + decoder + projection.

Holds the parameter registry (an ordered name -> Parameter dict, which is also
the checkpoint order), seeding/initialization, the teacher-forced forward
pass, and the autoregressive decoders.

Decoding comes in two equivalent modes: `incremental` feeds each new position
through the row-stable kernels reusing per-layer history, `full-prefix`
rescores the whole prefix every step.  They produce bit-identical sequences;
the incremental mode is just cheaper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import tensor as T
from .data import END_ID, START_ID
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    decoder: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    max_source_positions: int = 1024

    def validate(self):
        if self.vocab_size < 5:
            raise ConfigError(f"vocabulary of {self.vocab_size} leaves no real tokens")
        if self.d_model != self.decoder.channels:
            raise ConfigError(
                f"model dimension {self.d_model} != decoder channels {self.decoder.channels}"
            )
        self.decoder.validate()
        self.encoder.validate(self.d_model)


def desk_config(vocab_size, d_model=128, depth=3, kernel_width=3, max_target_positions=512):
    """A ModelConfig with the encoder plan scaled down to d_model."""
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=d_model,
        decoder=dec.DecoderConfig(depth=depth, kernel_width=kernel_width, channels=d_model,
                                  max_target_positions=max_target_positions),
        encoder=enc.EncoderConfig(stem_channels=enc.scaled_stem(d_model),
                                  block_plan=enc.scaled_plan(d_model)),
    )


@dataclass
class DecodeResult:
    ids: list  # generated token ids, start/end stripped
    truncated: bool
    logprob: float = 0.0

    def normalized(self):
        # normalize over emitted tokens including the end marker
        return self.logprob / max(1, len(self.ids) + (0 if self.truncated else 1))


class Model:
    def __init__(self, config, seed=0, params=None):
        config.validate()
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            params = enc.init_encoder_params(config.encoder, rng)
            params["enc.pos"] = T.Parameter(
                "enc.pos", rng.normal(0.0, 0.1, (config.max_source_positions, config.d_model))
            )
            params.update(dec.init_decoder_params(config.decoder, config.vocab_size, rng))
        self.params = params

    # -- registry -----------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def param_count(self):
        return int(sum(p.value.data.size for p in self.params.values()))

    # -- forward ------------------------------------------------------

    def encode(self, images):
        """images (B,1,H,W) or (1,H,W) -> FeatureSequence with positions added."""
        feats = enc.encode(images, self.config.encoder, self.params)
        return enc.add_source_positions(feats, self.params["enc.pos"].value)

    def forward_teacher_forced(self, images, target_ids):
        """Score every next-token position in one pass.

        target_ids (B, N) or (N,) must begin with the start token; row i of
        the result scores token i+1."""
        ids = np.asarray(target_ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            images = T.reshape(images, (1,) + images.data.shape)
        if not (ids[:, 0] == START_ID).all():
            raise ValueError("teacher-forced targets must begin with the start token")
        V = self.encode(images)
        g = dec.embed_targets(ids, self.params, self.config.decoder)
        h, _states = dec.run_decoder(g, V, self.params, self.config.decoder)
        out = dec.logits(h, self.params)
        return T.reshape(out, out.data.shape[1:]) if single else out

    # -- decoding -----------------------------------------------------

    def _logprob_row(self, h_last):
        """Log-softmax of the scores at one position; plain numpy (no tape)."""
        z = dec.logits(h_last, self.params).data.reshape(-1)
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))

    def _decode_limit(self, max_len):
        limit = self.config.decoder.max_target_positions - 1  # minus start slot
        if max_len is None:
            return limit
        if max_len > limit:
            raise ConfigError(f"max_len {max_len} exceeds target position limit {limit}")
        return max_len

    def greedy_decode(self, image, max_len=None, incremental=True):
        """Argmax decoding; returns DecodeResult (ids exclude start/end)."""
        max_len = self._decode_limit(max_len)
        V = self.encode(T.reshape(image, (1,) + image.data.shape) if image.ndim == 3 else image)
        ids = [START_ID]
        logp = 0.0
        if incremental:
            state = _IncrementalState(self, V)
            for n in range(max_len):
                row = state.step(ids[n], n)
                tok = int(np.argmax(row))
                logp += float(row[tok])
                if tok == END_ID:
                    return DecodeResult(ids[1:], truncated=False, logprob=logp)
                ids.append(tok)
            return DecodeResult(ids[1:], truncated=True, logprob=logp)
        for n in range(max_len):
            arr = np.asarray(ids, dtype=np.int64)[None]
            g = dec.embed_targets(arr, self.params, self.config.decoder)
            h, _ = dec.run_decoder(g, V, self.params, self.config.decoder)
            row = self._logprob_row(T.narrow(h, 1, n, 1))
            tok = int(np.argmax(row))
            logp += float(row[tok])
            if tok == END_ID:
                return DecodeResult(ids[1:], truncated=False, logprob=logp)
            ids.append(tok)
        return DecodeResult(ids[1:], truncated=True, logprob=logp)

    def beam_decode(self, image, beam, max_len=None):
        """Length-normalized beam search; beam=1 reproduces greedy exactly."""
        if beam < 1:
            raise ConfigError(f"beam width must be >= 1, got {beam}")
        max_len = self._decode_limit(max_len)
        V = self.encode(T.reshape(image, (1,) + image.data.shape) if image.ndim == 3 else image)
        live = [([START_ID], 0.0, _IncrementalState(self, V))]
        finished = []
        for n in range(max_len):
            candidates = []
            for hyp_idx, (ids, logp, state) in enumerate(live):
                row = state.step(ids[n], n)
                # top `beam` continuations of this hypothesis suffice
                top = np.argsort(-row, kind="stable")[:beam]
                for tok in top:
                    candidates.append((logp + float(row[tok]), hyp_idx, int(tok)))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            next_live = []
            for score, hyp_idx, tok in candidates[:beam]:
                ids, _lp, state = live[hyp_idx]
                if tok == END_ID:
                    finished.append(DecodeResult(ids[1:], truncated=False, logprob=score))
                else:
                    next_live.append((ids + [tok], score, state.fork()))
            if not next_live or len(finished) >= beam:
                break
            live = next_live
        if not finished:  # nothing reached the end marker within max_len
            finished = [DecodeResult(ids[1:], truncated=True, logprob=logp) for ids, logp, _ in live]
        return max(finished, key=lambda r: (r.normalized(), -len(r.ids)))

    def score_sequence(self, image, token_ids):
        """Sum of next-token log-probs for a finished sequence (ids without
        start/end), as the beam search would score it."""
        ids = [START_ID] + list(token_ids) + [END_ID]
        arr = np.asarray(ids, dtype=np.int64)[None]
        V = self.encode(T.reshape(image, (1,) + image.data.shape) if image.ndim == 3 else image)
        g = dec.embed_targets(arr[:, :-1], self.params, self.config.decoder)
        h, _ = dec.run_decoder(g, V, self.params, self.config.decoder)
        z = dec.logits(h, self.params).data[0]
        m = z.max(axis=-1, keepdims=True)
        logprobs = z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))
        return float(sum(logprobs[i, ids[i + 1]] for i in range(len(ids) - 1)))


class _IncrementalState:
    """Per-layer input history for stepwise decoding.

    hist[l] collects the input stream of layer l (embeddings for l=0, the
    previous layer's h otherwise); one decoder step only ever convolves the
    last k rows, which bit-matches the full pass because the kernels are
    row-stable."""

    def __init__(self, model, V, hist=None):
        self.model = model
        self.V = V
        depth = model.config.decoder.depth
        self.hist = hist if hist is not None else [[] for _ in range(depth + 1)]

    def fork(self):
        return _IncrementalState(self.model, self.V, [list(h) for h in self.hist])

    def step(self, token_id, n):
        """Feed position n (its input token) and return the log-prob row."""
        model = self.model
        cfg = model.config.decoder
        params = model.params
        k = cfg.kernel_width
        tok = params["dec.embed.tok"].value.data[token_id]
        pos = params["dec.embed.pos"].value.data[n]
        g_row = tok + pos
        self.hist[0].append(g_row)
        g = T.Tensor._wrap(g_row.reshape(1, 1, -1), False)
        for layer in range(cfg.depth):
            window = np.stack(self.hist[layer][-k:])[None]  # (1, <=k, D)
            m = T.conv1d_causal(
                T.Tensor._wrap(window, False),
                params[f"dec.layer{layer}.conv.w"].value,
                params[f"dec.layer{layer}.conv.b"].value,
            )
            m_last = T.narrow(m, 1, m.data.shape[1] - 1, 1)
            u = T.glu(m_last, axis=-1)
            h_prev = T.Tensor._wrap(self.hist[layer][-1].reshape(1, 1, -1), False)
            r = T.add(u, h_prev)
            content, _w = dec.attention(
                r, g, self.V,
                params[f"dec.layer{layer}.attn.wd"].value,
                params[f"dec.layer{layer}.attn.bd"].value,
            )
            h = T.add(r, content)
            self.hist[layer + 1].append(h.data.reshape(-1))
        return model._logprob_row(T.Tensor._wrap(self.hist[cfg.depth][-1].reshape(1, 1, -1), False))

"""Forecaster zoo: MLP baseline, recurrent models with and without series
decomposition, recurrent encoder-decoders, and an encoder-decoder
transformer with learnable timestamp encoding.

Every model maps a (batch, lx, input_dim) window to either a k-step
regression sequence or 3 movement logits. Recurrent encoder-decoders roll
the horizon out one step at a time (teacher forcing in training, own
predictions at inference); the transformer emits the whole horizon in a
single forward pass. Movement heads follow two designs: recurrent models
classify from the final hidden state, the transformer feeds all k
predicted values into the classification layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError

KINDS = ("mlp", "lstm", "dlstm", "seq2seq", "attention", "transformer")
HEADS = ("regression_seq", "movement")
N_CLASSES = 3


@dataclass
class ModelConfig:
    kind: str
    input_dim: int
    lx: int
    k: int
    head: str = "regression_seq"
    hidden_dim: int = 64
    n_heads: int = 4
    d_model: int = 64
    ffn_dim: int = 256
    n_encoder_layers: int = 2
    n_decoder_layers: int = 1
    decompose_window: int = 25
    context_mode: str = "last"  # "last" or "mean" of encoder hidden states
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind '{self.kind}'")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head '{self.head}'")
        if self.kind in ("seq2seq", "attention") and self.head == "movement":
            raise ConfigError(f"{self.kind} supports only the regression head")
        if self.kind == "transformer":
            if self.d_model % self.n_heads != 0:
                raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
            if self.d_model % 2 != 0:
                raise ConfigError("d_model must be even")
        if self.kind == "dlstm" and self.decompose_window % 2 == 0:
            raise ConfigError("decompose_window must be odd")
        if min(self.input_dim, self.lx, self.k, self.hidden_dim) < 1:
            raise ConfigError("dimensions must be >= 1")

    def out_dim(self) -> int:
        return N_CLASSES if self.head == "movement" else self.k

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def predict_classes(probs_or_logits: np.ndarray) -> np.ndarray:
    """Class prediction; ties resolve to the lowest class index."""
    return np.argmax(probs_or_logits, axis=-1)


class Forecaster(nn.Module):
    cfg: ModelConfig

    def forward(self, x: Tensor, ts: np.ndarray | None = None,
                teacher: np.ndarray | None = None) -> Tensor:
        raise NotImplementedError

    def movement_probs(self, x: Tensor, ts: np.ndarray | None = None) -> Tensor:
        if self.cfg.head != "movement":
            raise ConfigError("movement_probs needs a movement head")
        return ad.softmax(self.forward(x, ts), axis=-1)


class MlpForecaster(Forecaster):
    """Two relu hidden layers on the flattened window."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        flat = cfg.lx * cfg.input_dim
        self._register("fc1", nn.Linear(flat, cfg.hidden_dim, rng))
        self._register("fc2", nn.Linear(cfg.hidden_dim, cfg.hidden_dim, rng))
        self._register("head", nn.Linear(cfg.hidden_dim, cfg.out_dim(), rng))

    def forward(self, x, ts=None, teacher=None):
        b = x.shape[0]
        h = ad.reshape(x, (b, self.cfg.lx * self.cfg.input_dim))
        h = ad.relu(self.fc1(h))
        h = ad.relu(self.fc2(h))
        return self.head(h)


class LstmForecaster(Forecaster):
    """Single recurrent layer; the final hidden state feeds the task head."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._register("cell", nn.LstmCell(cfg.input_dim, cfg.hidden_dim, rng))
        self._register("head", nn.Linear(cfg.hidden_dim, cfg.out_dim(), rng))

    def forward(self, x, ts=None, teacher=None):
        final, _ = self.cell.run(x)
        return self.head(final.h)


class DlstmForecaster(Forecaster):
    """Decompose the window into trend and remainder, run one recurrent
    branch on each, sum the final hidden states, then apply the head."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._register("trend_cell", nn.LstmCell(cfg.input_dim, cfg.hidden_dim, rng))
        self._register("remainder_cell", nn.LstmCell(cfg.input_dim, cfg.hidden_dim, rng))
        self._register("head", nn.Linear(cfg.hidden_dim, cfg.out_dim(), rng))

    def branch_outputs(self, x: Tensor) -> tuple[Tensor, Tensor]:
        trend, remainder = nn.series_decompose(x, self.cfg.decompose_window)
        t_final, _ = self.trend_cell.run(trend)
        r_final, _ = self.remainder_cell.run(remainder)
        return t_final.h, r_final.h

    def forward(self, x, ts=None, teacher=None):
        h_t, h_r = self.branch_outputs(x)
        return self.head(ad.add(h_t, h_r))


class Seq2SeqForecaster(Forecaster):
    """Recurrent encoder-decoder; a fixed context vector bridges the two.

    The context is the encoder's last hidden state (or the mean of all of
    them), the decoder starts from the encoder state and consumes
    [previous target value, context] each step, and each output comes from
    a linear layer on [decoder state, context].
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden_dim
        self._register("encoder", nn.LstmCell(cfg.input_dim, h, rng))
        self._register("decoder", nn.LstmCell(1 + h, h, rng))
        self._register("out", nn.Linear(2 * h, 1, rng))

    def _context(self, final: nn.LstmState, hs: list[Tensor]) -> Tensor:
        if self.cfg.context_mode == "mean":
            stack = ad.concat([ad.reshape(t, (t.shape[0], 1, t.shape[1])) for t in hs], axis=1)
            return ad.mean(stack, axis=1)
        return final.h

    def forward(self, x, ts=None, teacher=None):
        b = x.shape[0]
        final, hs = self.encoder.run(x, collect=self.cfg.context_mode == "mean")
        context = self._context(final, hs)
        state = nn.LstmState(final.h, final.c)
        y_prev = Tensor(np.zeros((b, 1)))
        outputs = []
        for step in range(self.cfg.k):
            d_state = self.decoder.step(ad.concat([y_prev, context], axis=-1), state)
            state = d_state
            y_hat = self.out(ad.concat([d_state.h, context], axis=-1))
            outputs.append(y_hat)
            if teacher is not None:
                y_prev = Tensor(teacher[:, step : step + 1])
            else:
                y_prev = y_hat
        return ad.concat(outputs, axis=-1)


class AttentionForecaster(Forecaster):
    """Seq2seq with a per-step context: each decoder step scores every
    encoder state by dot product, softmax-normalizes the scores, and
    averages the encoder states with those weights."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden_dim
        self._register("encoder", nn.LstmCell(cfg.input_dim, h, rng))
        self._register("decoder", nn.LstmCell(1 + h, h, rng))
        self._register("out", nn.Linear(2 * h, 1, rng))

    def attention_context(self, enc_states: Tensor, d_t: Tensor,
                          return_weights: bool = False):
        # scores s_i = h_i . d_t per batch row
        scores = ad.matmul(enc_states, ad.reshape(d_t, (d_t.shape[0], d_t.shape[1], 1)))
        weights = ad.softmax(ad.reshape(scores, scores.shape[:2]), axis=-1)
        w3 = ad.reshape(weights, (weights.shape[0], 1, weights.shape[1]))
        context = ad.reshape(ad.matmul(w3, enc_states), (d_t.shape[0], d_t.shape[1]))
        if return_weights:
            return context, weights
        return context

    def forward(self, x, ts=None, teacher=None):
        b = x.shape[0]
        final, hs = self.encoder.run(x, collect=True)
        enc_states = ad.concat([ad.reshape(t, (b, 1, t.shape[1])) for t in hs], axis=1)
        state = nn.LstmState(final.h, final.c)
        context = final.h
        y_prev = Tensor(np.zeros((b, 1)))
        outputs = []
        for step in range(self.cfg.k):
            state = self.decoder.step(ad.concat([y_prev, context], axis=-1), state)
            context = self.attention_context(enc_states, state.h)
            y_hat = self.out(ad.concat([state.h, context], axis=-1))
            outputs.append(y_hat)
            if teacher is not None:
                y_prev = Tensor(teacher[:, step : step + 1])
            else:
                y_prev = y_hat
        return ad.concat(outputs, axis=-1)


class _EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, rng):
        self._register("attn", nn.MultiHeadAttention(cfg.d_model, cfg.n_heads, rng))
        self._register("ln1", nn.LayerNorm(cfg.d_model))
        self._register("ffn", nn.FeedForward(cfg.d_model, cfg.ffn_dim, rng))
        self._register("ln2", nn.LayerNorm(cfg.d_model))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.ln1(ad.add(x, self.attn(x)))
        return self.ln2(ad.add(x, self.ffn(x)))


class _DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, rng):
        self._register("self_attn", nn.MultiHeadAttention(cfg.d_model, cfg.n_heads, rng))
        self._register("ln1", nn.LayerNorm(cfg.d_model))
        self._register("cross_attn", nn.MultiHeadAttention(cfg.d_model, cfg.n_heads, rng))
        self._register("ln2", nn.LayerNorm(cfg.d_model))
        self._register("ffn", nn.FeedForward(cfg.d_model, cfg.ffn_dim, rng))
        self._register("ln3", nn.LayerNorm(cfg.d_model))

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        x = self.ln1(ad.add(x, self.self_attn(x, mask=mask)))
        x = self.ln2(ad.add(x, self.cross_attn(x, kv_src=memory)))
        return self.ln3(ad.add(x, self.ffn(x)))


class TransformerForecaster(Forecaster):
    """Encoder-decoder with multi-head self-attention and a causal decoder.

    Inputs enter through the timestamp encoding; the decoder runs on k
    placeholder positions (the window's last row repeated, unless a probe
    supplies values) with timestamps extrapolated at the window's median
    tick spacing, and emits the whole horizon at once. A movement head
    maps the k predicted values to 3 logits.
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        pe_base = 2.0 * cfg.lx
        self._register("enc_embed", nn.TimestampEncoding(cfg.input_dim, cfg.d_model, pe_base, rng))
        self._register("dec_embed", nn.TimestampEncoding(cfg.input_dim, cfg.d_model, pe_base, rng))
        self._enc_blocks = []
        for i in range(cfg.n_encoder_layers):
            block = _EncoderBlock(cfg, rng)
            self._register(f"enc{i}", block)
            self._enc_blocks.append(block)
        self._dec_blocks = []
        for i in range(cfg.n_decoder_layers):
            block = _DecoderBlock(cfg, rng)
            self._register(f"dec{i}", block)
            self._dec_blocks.append(block)
        self._register("out", nn.Linear(cfg.d_model, 1, rng))
        if cfg.head == "movement":
            self._register("movement_head", nn.Linear(cfg.k, N_CLASSES, rng))
        self._mask = nn.causal_mask(cfg.k)

    def _future_ts(self, ts: np.ndarray) -> np.ndarray:
        spacing = np.median(np.diff(ts, axis=1), axis=1).astype(np.int64)
        spacing = np.maximum(spacing, 1)
        steps = np.arange(1, self.cfg.k + 1, dtype=np.int64)
        return ts[:, -1:] + spacing[:, None] * steps[None, :]

    def encode(self, x: Tensor, ts: np.ndarray) -> Tensor:
        h = self.enc_embed(x, ts)
        for block in self._enc_blocks:
            h = block(h)
        return h

    def predicted_sequence(self, x: Tensor, ts: np.ndarray,
                           dec_values: np.ndarray | None = None) -> Tensor:
        if ts is None:
            raise ConfigError("transformer forward requires window timestamps")
        b = x.shape[0]
        memory = self.encode(x, ts)
        if dec_values is None:
            dec_values = np.repeat(x.data[:, -1:, :], self.cfg.k, axis=1)
        d = self.dec_embed(Tensor(dec_values), self._future_ts(ts), pos_offset=self.cfg.lx)
        for block in self._dec_blocks:
            d = block(d, memory, self._mask)
        return ad.reshape(self.out(d), (b, self.cfg.k))

    def forward(self, x, ts=None, teacher=None, dec_values=None):
        seq = self.predicted_sequence(x, ts, dec_values=dec_values)
        if self.cfg.head == "movement":
            return self.movement_head(seq)
        return seq


def build_model(cfg: ModelConfig) -> Forecaster:
    cfg.validate()
    cls = {
        "mlp": MlpForecaster,
        "lstm": LstmForecaster,
        "dlstm": DlstmForecaster,
        "seq2seq": Seq2SeqForecaster,
        "attention": AttentionForecaster,
        "transformer": TransformerForecaster,
    }[cfg.kind]
    return cls(cfg)

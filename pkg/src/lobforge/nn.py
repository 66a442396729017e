"""Neural building blocks on top of the autodiff core.

Weights are initialized uniform in +/-1/sqrt(fan_in); LSTM forget-gate
biases start at 1.0 and every other bias at zero.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container; children register via _modules."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in getattr(self, "_params", {}).items():
            out[name] = p
        for prefix, child in getattr(self, "_modules", {}).items():
            for name, p in child.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def _register(self, name: str, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        else:
            raise TypeError(f"cannot register {type(value)!r}")
        setattr(self, name, value)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self._register("w", ad.param(ad.uniform_init(rng, (in_dim, out_dim), in_dim), "w"))
        self._register("b", ad.param(np.zeros(out_dim), "b"))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


class LstmCell(Module):
    """Gated recurrent cell: forget/input/output gates plus candidate state.

    One step maps (x_t, h_{t-1}, c_{t-1}) to (h_t, c_t):
      f = sig(W_f [h, x] + b_f)    i = sig(W_i [h, x] + b_i)
      g = tanh(W_c [h, x] + b_c)   c_t = f * c + i * g
      o = sig(W_o [h, x] + b_o)    h_t = o * tanh(c_t)
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        z = hidden_dim + input_dim
        for gate in ("f", "i", "c", "o"):
            self._register(f"w_{gate}", ad.param(ad.uniform_init(rng, (z, hidden_dim), z), f"w_{gate}"))
        # forget bias 1.0 keeps early memory open
        self._register("b_f", ad.param(np.ones(hidden_dim), "b_f"))
        self._register("b_i", ad.param(np.zeros(hidden_dim), "b_i"))
        self._register("b_c", ad.param(np.zeros(hidden_dim), "b_c"))
        self._register("b_o", ad.param(np.zeros(hidden_dim), "b_o"))

    def init_state(self, batch: int) -> LstmState:
        return LstmState(Tensor(np.zeros((batch, self.hidden_dim))),
                         Tensor(np.zeros((batch, self.hidden_dim))))

    def step(self, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"lstm input dim {x.shape[-1]} != {self.input_dim}")
        z = ad.concat([state.h, x], axis=-1)
        f = ad.sigmoid(ad.add(ad.matmul(z, self.w_f), self.b_f))
        i = ad.sigmoid(ad.add(ad.matmul(z, self.w_i), self.b_i))
        g = ad.tanh(ad.add(ad.matmul(z, self.w_c), self.b_c))
        c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
        o = ad.sigmoid(ad.add(ad.matmul(z, self.w_o), self.b_o))
        h = ad.mul(o, ad.tanh(c))
        return LstmState(h, c)

    def run(self, xs: Tensor, state: LstmState | None = None,
            collect: bool = False) -> tuple[LstmState, list[Tensor]]:
        """Unroll over xs of shape (batch, steps, input_dim)."""
        batch, steps, _ = xs.shape
        if state is None:
            state = self.init_state(batch)
        hs: list[Tensor] = []
        for t in range(steps):
            state = self.step(xs[:, t, :], state)
            if collect:
                hs.append(state.h)
        return state, hs


def series_decompose(x: Tensor, window: int) -> tuple[Tensor, Tensor]:
    """Split (..., L, d) into a moving-average trend and a remainder.

    The trend uses edge-replicate padding so it keeps length L; the
    remainder is x - trend, so the two always recompose to the input.
    """
    trend = ad.moving_avg(x, window)
    remainder = ad.sub(x, trend)
    return trend, remainder


def causal_mask(length: int) -> np.ndarray:
    """Additive mask hiding positions j > i; broadcastable to (.., L, L)."""
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = -1e9
    return m


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k) + mask) V over the last two axes."""
    d_k = q.shape[-1]
    if k.shape[-1] != d_k:
        raise ValueError(f"query/key dim mismatch: {q.shape} vs {k.shape}")
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), Tensor(1.0 / math.sqrt(d_k)))
    if mask is not None:
        if np.any(np.all(mask <= -1e9, axis=-1)):
            raise ValueError("attention mask leaves a fully masked row")
        scores = ad.add(scores, Tensor(mask))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        for name in ("w_q", "w_k", "w_v", "w_o"):
            self._register(name, ad.param(ad.uniform_init(rng, (d_model, d_model), d_model), name))

    def _split(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return ad.swapaxes(ad.reshape(x, (b, l, self.n_heads, self.d_head)), 1, 2)

    def __call__(self, q_src: Tensor, kv_src: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        if kv_src is None:
            kv_src = q_src
        b, lq, _ = q_src.shape
        q = self._split(ad.matmul(q_src, self.w_q))
        k = self._split(ad.matmul(kv_src, self.w_k))
        v = self._split(ad.matmul(kv_src, self.w_v))
        heads = scaled_dot_attention(q, k, v, mask=mask)
        merged = ad.reshape(ad.swapaxes(heads, 1, 2), (b, lq, self.d_model))
        return ad.matmul(merged, self.w_o)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self._register("g", ad.param(np.ones(dim), "g"))
        self._register("b", ad.param(np.zeros(dim), "b"))

    def __call__(self, x: Tensor) -> Tensor:
        m = ad.mean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, m)
        var = ad.mean(ad.mul(centered, centered), axis=-1, keepdims=True)
        inv = ad.pow_const(ad.add(var, Tensor(self.eps)), -0.5)
        return ad.add(ad.mul(ad.mul(centered, inv), self.g), self.b)


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self._register("fc1", Linear(d_model, hidden, rng))
        self._register("fc2", Linear(hidden, d_model, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


def sinusoid_encoding(length: int, d_model: int, base: float, offset: int = 0) -> np.ndarray:
    """Fixed positional table: sin(pos / base^(2i/d)) on even channels,
    cos on odd, positions offset..offset+length-1."""
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / base ** (i2 / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def calendar_components(ts_ms: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """UTC (hour, minute, second) per millisecond timestamp."""
    s = np.asarray(ts_ms, dtype=np.int64) // 1000
    return (s // 3600) % 24, (s // 60) % 60, s % 60


class TimestampEncoding(Module):
    """Sequence embedding: alpha * value-projection + fixed sinusoid + learned
    calendar embeddings (hour/minute/second tables) summed per position."""

    def __init__(self, input_dim: int, d_model: int, pe_base: float,
                 rng: np.random.Generator, alpha: float = 1.0):
        if d_model % 2 != 0:
            raise ValueError("d_model must be even")
        self.d_model = d_model
        self.pe_base = pe_base
        self.alpha = alpha
        self._register("proj", Linear(input_dim, d_model, rng))
        scale = 1.0 / math.sqrt(d_model)
        self._register("hour_table", ad.param(rng.uniform(-scale, scale, (24, d_model)), "hour_table"))
        self._register("minute_table", ad.param(rng.uniform(-scale, scale, (60, d_model)), "minute_table"))
        self._register("second_table", ad.param(rng.uniform(-scale, scale, (60, d_model)), "second_table"))

    def __call__(self, x: Tensor, ts_ms: np.ndarray, pos_offset: int = 0) -> Tensor:
        b, l, _ = x.shape
        u = ad.mul(self.proj(x), Tensor(self.alpha))
        pe = Tensor(sinusoid_encoding(l, self.d_model, self.pe_base, offset=pos_offset))
        hour, minute, second = calendar_components(ts_ms)
        se = ad.add(ad.add(ad.embedding(self.hour_table, hour),
                           ad.embedding(self.minute_table, minute)),
                    ad.embedding(self.second_table, second))
        return ad.add(ad.add(u, pe), se)

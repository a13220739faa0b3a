"""Token-mixing sublayers and the position-wise Transformer components.

Three mixing kinds share one calling convention, ``[B, L, D] -> [B, L, D]``:

* multi-head scaled dot-product self-attention over all visible positions,
* local attention, the same computation restricted to a window,
* multi-head neural n-gram: per head, a ReLU projection of the concatenated
  window of surrounding representations (optionally with a max-pooled
  global context vector appended), heads concatenated and projected.

Positions are 0-based throughout.  ``pad_mask`` arrays are boolean
``[B, L]`` with True on padded positions; ``visible`` arrays are True where
a query may read a key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    broadcast_to,
    concat_last_dim,
    dropout,
    embedding,
    layer_norm,
    masked_max_pool,
    matmul,
    mul,
    relu,
    reshape,
    shift,
    softmax_last_dim,
    swap_last,
    transpose,
)

SELF_ATTENTION = "self_attention"
LOCAL_ATTENTION = "local_attention"
NGRAM = "ngram"
KINDS = (SELF_ATTENTION, LOCAL_ATTENTION, NGRAM)

LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    """Mixing choice for one layer.

    ``n`` is the window size for local attention and n-gram layers; it is
    ignored for full self-attention.  ``use_global`` appends a max-pooled
    context vector and is only valid for encoder n-gram layers.
    """

    kind: str = SELF_ATTENTION
    n: int = 5
    use_global: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}", "kind")
        if not isinstance(self.n, int) or isinstance(self.n, bool) or self.n < 1:
            raise ConfigError(f"window size must be a positive integer, got {self.n!r}", "n")
        if self.use_global and self.kind != NGRAM:
            raise ConfigError("use_global is only valid for ngram layers", "use_global")

    @property
    def produces_attention(self) -> bool:
        return self.kind != NGRAM


def encoder_window(n: int) -> int:
    return 2 * n - 1


def decoder_window(n: int) -> int:
    return n


# ---------------------------------------------------------------- parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


@dataclass
class AttentionParams:
    """Query/key/value projections stored fused over heads.

    Columns ``k*dh:(k+1)*dh`` of ``wq``, ``wk`` and ``wv`` belong to head
    ``k`` where ``dh = d_model // n_heads``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int) -> "AttentionParams":
        if d_model % n_heads:
            raise ConfigError(f"n_heads={n_heads} does not divide d_model={d_model}")
        ws = [glorot(rng, d_model, d_model) for _ in range(4)]
        return cls(*ws, n_heads=n_heads)

    def named(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


@dataclass
class NGramParams:
    """Head projections ``W_k`` stacked column-wise, plus output ``W``.

    ``w_heads`` has shape ``[window * D (+ D if global), D]``; columns
    ``k*dh:(k+1)*dh`` form head ``k``.
    """

    w_heads: Tensor
    w_out: Tensor
    n_heads: int
    window: int
    use_global: bool = False

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int, window: int, use_global: bool = False):
        if d_model % n_heads:
            raise ConfigError(f"n_heads={n_heads} does not divide d_model={d_model}")
        width = (window + int(use_global)) * d_model
        return cls(
            glorot(rng, width, d_model), glorot(rng, d_model, d_model), n_heads, window, use_global
        )

    def head(self, k: int) -> np.ndarray:
        dh = self.w_out.shape[0] // self.n_heads
        return self.w_heads.data[:, k * dh : (k + 1) * dh]

    def named(self) -> dict[str, Tensor]:
        return {"w_heads": self.w_heads, "w_out": self.w_out}


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d_model: int, d_ff: int) -> "FFNParams":
        return cls(
            glorot(rng, d_model, d_ff),
            Tensor(np.zeros(d_ff), requires_grad=True),
            glorot(rng, d_ff, d_model),
            Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d_model: int) -> "NormParams":
        return cls(
            Tensor(np.ones(d_model), requires_grad=True),
            Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


# ---------------------------------------------------------------- masks


def window_visibility(L: int, n: int | None, causal: bool) -> np.ndarray:
    """``[L, L]`` boolean: may query ``t`` read key ``i``?

    With ``n=None`` the window is unbounded.  Bidirectional windows cover
    ``[t-n+1, t+n-1]``; causal ones ``[t-n+1, t]``.
    """
    t = np.arange(L)[:, None]
    i = np.arange(L)[None, :]
    vis = np.ones((L, L), dtype=bool)
    if n is not None:
        vis &= np.abs(i - t) <= n - 1
    if causal:
        vis &= i <= t
    return vis


def attention_visibility(
    L_q: int,
    L_k: int,
    key_pad=None,
    query_pad=None,
    causal: bool = False,
    n: int | None = None,
) -> np.ndarray:
    """Combine window, causal and padding constraints into ``[B|1, L_q, L_k]``.

    Padded query rows that would otherwise see nothing are allowed to read
    their own position; their outputs never reach unpadded positions.
    """
    if L_q == L_k:
        vis = window_visibility(L_q, n, causal)[None]
    else:
        vis = np.ones((1, L_q, L_k), dtype=bool)
    if key_pad is not None:
        vis = vis & ~np.asarray(key_pad, dtype=bool)[:, None, :]
    if query_pad is not None and L_q == L_k:
        query_pad = np.asarray(query_pad, dtype=bool)
        vis = vis | (np.eye(L_q, dtype=bool)[None] & query_pad[:, :, None])
    return vis


# ---------------------------------------------------------------- mixing


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, D = x.shape
    return transpose(reshape(x, (B, L, n_heads, D // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, K, L, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, L, K * dh))


def attention(query: Tensor, memory: Tensor, visible, params: AttentionParams):
    """Multi-head scaled dot-product attention of ``query`` over ``memory``.

    Returns ``(output [B, L_q, D], weights [B, K, L_q, L_k])``.
    """
    K = params.n_heads
    D = query.shape[-1]
    q = _split_heads(matmul(query, params.wq), K)
    k = _split_heads(matmul(memory, params.wk), K)
    v = _split_heads(matmul(memory, params.wv), K)
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(D // K))
    visible = np.asarray(visible, dtype=bool)
    if visible.ndim == 2:
        visible = visible[None]
    alpha = softmax_last_dim(scores, visible[:, None, :, :])
    heads = matmul(alpha, v)
    return matmul(_merge_heads(heads), params.wo), alpha.data


def self_attention(x: Tensor, visible, params: AttentionParams):
    """Self-attention with an explicit ``[L, L]`` or ``[B, L, L]`` visibility mask."""
    return attention(x, x, visible, params)


def local_attention(
    x: Tensor, n: int, causal: bool, pad_mask, params: AttentionParams
):
    """Self-attention restricted to the same windows the n-gram layer reads."""
    if n < 1:
        raise ConfigError(f"window size must be >= 1, got {n}")
    L = x.shape[1]
    visible = attention_visibility(L, L, pad_mask, pad_mask, causal=causal, n=n)
    return attention(x, x, visible, params)


def _zero_padded(x: Tensor, pad_mask) -> Tensor:
    if pad_mask is None:
        return x
    keep = ~np.asarray(pad_mask, dtype=bool)
    return mul(x, keep[:, :, None].astype(np.float64))


def _ngram_heads(parts: list[Tensor], params: NGramParams) -> Tensor:
    window = concat_last_dim(parts)
    expected = params.w_heads.shape[0]
    if window.shape[-1] != expected:
        raise ConfigError(
            f"n-gram input width {window.shape[-1]} does not match head projection width {expected}"
        )
    return matmul(relu(matmul(window, params.w_heads)), params.w_out)


def ngram_mix_encoder(
    x: Tensor, n: int, use_global: bool, pad_mask, params: NGramParams
) -> Tensor:
    """Bidirectional n-gram mixing over ``x[t-n+1 .. t+n-1]``.

    Slots outside the sequence or on padded positions contribute zero
    vectors.  With ``use_global`` the feature-wise max over unpadded
    positions is appended to every window.
    """
    if params.window != encoder_window(n) or params.use_global != use_global:
        raise ConfigError(
            f"n-gram parameters sized for window={params.window}, global={params.use_global}; "
            f"layer asks for n={n} (window {encoder_window(n)}), global={use_global}"
        )
    xz = _zero_padded(x, pad_mask)
    parts = [shift(xz, o, axis=1) for o in range(-(n - 1), n)]
    if use_global:
        B, L, D = x.shape
        pooled = masked_max_pool(x, pad_mask)
        parts.append(broadcast_to(reshape(pooled, (B, 1, D)), (B, L, D)))
    return _ngram_heads(parts, params)


def ngram_mix_decoder(x: Tensor, n: int, params: NGramParams, pad_mask=None) -> Tensor:
    """Causal n-gram mixing over ``x[t-n+1 .. t]``, zero-filled on the left."""
    if params.window != decoder_window(n) or params.use_global:
        raise ConfigError(
            f"n-gram parameters sized for window={params.window}, global={params.use_global}; "
            f"decoder layer asks for n={n}"
        )
    xz = _zero_padded(x, pad_mask)
    parts = [shift(xz, o, axis=1) for o in range(-(n - 1), 1)]
    return _ngram_heads(parts, params)


def mix(spec: LayerSpec, params, x: Tensor, pad_mask, causal: bool):
    """Dispatch one mixing sublayer; returns ``(output, attention weights or None)``."""
    if spec.kind == SELF_ATTENTION:
        L = x.shape[1]
        visible = attention_visibility(L, L, pad_mask, pad_mask, causal=causal)
        return self_attention(x, visible, params)
    if spec.kind == LOCAL_ATTENTION:
        return local_attention(x, spec.n, causal, pad_mask, params)
    if causal:
        if spec.use_global:
            raise ConfigError("use_global is not available in decoder layers")
        return ngram_mix_decoder(x, spec.n, params, pad_mask), None
    return ngram_mix_encoder(x, spec.n, spec.use_global, pad_mask, params), None


def init_mixing(spec: LayerSpec, rng, d_model: int, n_heads: int, causal: bool):
    if spec.kind == NGRAM:
        if causal and spec.use_global:
            raise ConfigError("use_global is not available in decoder layers", "use_global")
        window = decoder_window(spec.n) if causal else encoder_window(spec.n)
        return NGramParams.init(rng, d_model, n_heads, window, spec.use_global)
    return AttentionParams.init(rng, d_model, n_heads)


# ---------------------------------------------------------------- position-wise parts


def ffn(x: Tensor, params: FFNParams, rate: float = 0.0, rng=None) -> Tensor:
    hidden = relu(matmul(x, params.w1) + params.b1)
    return matmul(dropout(hidden, rate, rng), params.w2) + params.b2


def sublayer(x: Tensor, mixing_output: Tensor, norm: NormParams, rate: float = 0.0, rng=None):
    """Post-norm residual: ``layer_norm(x + dropout(mixing_output))``."""
    return layer_norm(x + dropout(mixing_output, rate, rng), norm.gain, norm.bias, LN_EPS)


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.power(10000.0, -np.arange(0, d_model, 2) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d_model // 2])
    return pe


def embed_and_position(tokens, table: Tensor, max_len: int, positional: bool = True) -> Tensor:
    """Scaled embedding lookup plus (optionally) sinusoidal positions."""
    tokens = np.asarray(tokens)
    V, D = table.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise ValueError(f"token id out of range for vocabulary of size {V}")
    L = tokens.shape[-1]
    if L > max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {max_len}")
    out = mul(embedding(table, tokens), math.sqrt(D))
    if positional:
        out = out + sinusoidal_encoding(L, D)
    return out

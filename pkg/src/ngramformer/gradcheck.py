"""Finite-difference verification of every layer kind at tiny dimensions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .model import ModelConfig, build_model
from .tensor import Tensor, grad_check, mul, track_relu_margin, tsum
from .training import SequenceBatch, cross_entropy_loss

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
D, K, F, V = 8, 2, 12, 9


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE

    def line(self) -> str:
        return f"{self.name:<28} max_rel_err={self.error:.3e}  {'ok' if self.ok else 'FAIL'}"


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    # random projection keeps layer-norm style invariances from zeroing the gradient
    return tsum(mul(out, weights))


def _pad_mask(B: int, length: int) -> np.ndarray:
    pad = np.zeros((B, length), dtype=bool)
    pad[-1, length - 2 :] = True
    return pad


def _x(rng, B, length) -> Tensor:
    return Tensor(rng.normal(size=(B, length, D)), requires_grad=True)


def _mixing_case(spec: L.LayerSpec, causal: bool):
    def build(rng):
        length = max(5, spec.n + 2)
        x = _x(rng, 2, length)
        pad = _pad_mask(2, length)
        params = L.init_mixing(spec, rng, D, K, causal)
        R = rng.normal(size=x.shape)

        def f():
            out, _ = L.mix(spec, params, x, pad, causal)
            return _projected(out, R)

        return f, [x, *params.named().values()]

    return build


def _cross_case(rng):
    x, memory = _x(rng, 2, 4), _x(rng, 2, 5)
    params = L.AttentionParams.init(rng, D, K)
    visible = L.attention_visibility(4, 5, key_pad=_pad_mask(2, 5))
    R = rng.normal(size=x.shape)

    def f():
        out, _ = L.attention(x, memory, visible, params)
        return _projected(out, R)

    return f, [x, memory, *params.named().values()]


def _ffn_case(rng):
    x = _x(rng, 2, 4)
    params = L.FFNParams.init(rng, D, F)
    params.b1.data[...] = rng.normal(scale=0.1, size=F)
    params.b2.data[...] = rng.normal(scale=0.1, size=D)
    R = rng.normal(size=x.shape)
    return (lambda: _projected(L.ffn(x, params), R)), [x, *params.named().values()]


def _norm_case(rng):
    x = _x(rng, 2, 4)
    norm = L.NormParams(
        Tensor(rng.normal(size=D), requires_grad=True), Tensor(rng.normal(size=D), requires_grad=True)
    )
    mixed = _x(rng, 2, 4)
    R = rng.normal(size=x.shape)
    return (lambda: _projected(L.sublayer(x, mixed, norm), R)), [x, mixed, norm.gain, norm.bias]


def _embedding_case(rng):
    table = Tensor(rng.normal(size=(V, D)), requires_grad=True)
    tokens = np.array([[3, 4, 3, 5], [6, 6, 6, 0]])
    R = rng.normal(size=(2, 4, D))
    return (lambda: _projected(L.embed_and_position(tokens, table, 16), R)), [table]


def _model_case(enc: L.LayerSpec, dec: L.LayerSpec):
    def build(rng):
        cfg = ModelConfig(
            d_model=D, n_heads=K, d_ff=F, vocab_size=V, max_len=16,
            encoder_layers=[enc], decoder_layers=[dec], dropout=0.0,
        )
        model = build_model(cfg, int(rng.integers(2**31)))
        pairs = [([3, 4, 5, 6, 7], [7, 6, 5]), ([8, 3, 4], [4, 3, 8, 5])]
        batch = SequenceBatch.from_pairs(pairs)

        def f():
            logits, _ = model.forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
            return cross_entropy_loss(logits, batch.tgt_out, batch.tgt_pad)

        return f, list(model.parameters().values())

    return build


def run_case(name: str, build: Callable, seed: int = 0, attempts: int = 20) -> CheckResult:
    """Build a case, resampling until no ReLU input lies within the kink margin."""
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        f, params = build(rng)
        with track_relu_margin() as margin:
            f()
        if margin[0] >= KINK_MARGIN:
            break
    return CheckResult(name, grad_check(f, params))


def _describe(spec: L.LayerSpec, side: str) -> str:
    tag = side + (",global" if spec.use_global else "")
    return f"{spec.kind}[{tag}]"


def cases_for(config: ModelConfig) -> list[tuple[str, Callable]]:
    """One case per distinct (kind, side, global) in ``config`` plus the fixed parts."""
    cases: dict[str, Callable] = {}
    for spec in config.encoder_layers:
        cases.setdefault(_describe(spec, "encoder"), _mixing_case(spec, causal=False))
    for spec in config.decoder_layers:
        cases.setdefault(_describe(spec, "decoder"), _mixing_case(spec, causal=True))
    if config.decoder_layers:
        cases["cross_attention"] = _cross_case
    cases["ffn"] = _ffn_case
    cases["layer_norm"] = _norm_case
    cases["embedding"] = _embedding_case
    enc = config.encoder_layers[0] if config.encoder_layers else L.LayerSpec()
    dec = config.decoder_layers[0] if config.decoder_layers else L.LayerSpec()
    cases["model_loss[1+1]"] = _model_case(enc, dec)
    return list(cases.items())


def run_gradchecks(config: ModelConfig, seed: int = 0) -> list[CheckResult]:
    return [run_case(name, build, seed) for name, build in cases_for(config)]

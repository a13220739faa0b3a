"""Encoder-decoder assembly, parameter accounting, decoding and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .layers import (
    NGRAM,
    AttentionParams,
    FFNParams,
    LayerSpec,
    NormParams,
    attention,
    attention_visibility,
    decoder_window,
    dropout,
    embed_and_position,
    encoder_window,
    ffn,
    init_mixing,
    mix,
    sublayer,
)
from .tensor import Tensor, matmul, no_grad, swap_last

PAD, BOS, EOS = 0, 1, 2
N_SPECIALS = 3


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 16
    max_len: int = 64
    encoder_layers: list[LayerSpec] = field(default_factory=lambda: [LayerSpec(), LayerSpec()])
    decoder_layers: list[LayerSpec] = field(default_factory=lambda: [LayerSpec(), LayerSpec()])
    dropout: float = 0.1
    tie_embeddings: bool = True
    positional_encoding: bool = True

    def validate(self) -> "ModelConfig":
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", name)
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}", "n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.dropout}", "dropout")
        for i, spec in enumerate(self.decoder_layers):
            if spec.use_global:
                raise ConfigError("use_global is not available in decoder layers", f"decoder_layers[{i}].use_global")
        return self

    def with_dropout(self, rate: float) -> "ModelConfig":
        return ModelConfig(**{**self.__dict__, "dropout": rate})

    def to_dict(self) -> dict:
        return asdict(self)


def _attention_count(D: int) -> int:
    return 4 * D * D


def _mixing_count(spec: LayerSpec, D: int, causal: bool) -> int:
    if spec.kind != NGRAM:
        return _attention_count(D)
    window = decoder_window(spec.n) if causal else encoder_window(spec.n)
    return (window + int(spec.use_global)) * D * D + D * D


def count_params(config: ModelConfig) -> int:
    """Closed-form count of every trainable scalar ``build_model`` creates."""
    D, F, V = config.d_model, config.d_ff, config.vocab_size
    ffn_count = 2 * D * F + F + D
    norm = 2 * D
    total = V * D if config.tie_embeddings else 3 * V * D
    for spec in config.encoder_layers:
        total += _mixing_count(spec, D, causal=False) + ffn_count + 2 * norm
    for spec in config.decoder_layers:
        total += _mixing_count(spec, D, causal=True) + _attention_count(D) + ffn_count + 3 * norm
    return total


def human_count(n: int) -> str:
    for unit, scale in (("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= scale:
            return f"{n / scale:.1f}{unit}"
    return str(n)


class EncoderLayer:
    def __init__(self, spec: LayerSpec, rng, D: int, K: int, F: int):
        self.spec = spec
        self.mix = init_mixing(spec, rng, D, K, causal=False)
        self.norm1 = NormParams.init(D)
        self.ffn = FFNParams.init(rng, D, F)
        self.norm2 = NormParams.init(D)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for part in ("mix", "norm1", "ffn", "norm2"):
            for k, v in getattr(self, part).named().items():
                out[f"{part}.{k}"] = v
        return out

    def __call__(self, x, pad_mask, rate=0.0, rng=None):
        mixed, weights = mix(self.spec, self.mix, x, pad_mask, causal=False)
        x = sublayer(x, mixed, self.norm1, rate, rng)
        x = sublayer(x, ffn(x, self.ffn, rate, rng), self.norm2, rate, rng)
        return x, weights


class DecoderLayer:
    def __init__(self, spec: LayerSpec, rng, D: int, K: int, F: int):
        self.spec = spec
        self.mix = init_mixing(spec, rng, D, K, causal=True)
        self.norm1 = NormParams.init(D)
        self.cross = AttentionParams.init(rng, D, K)
        self.norm2 = NormParams.init(D)
        self.ffn = FFNParams.init(rng, D, F)
        self.norm3 = NormParams.init(D)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for part in ("mix", "norm1", "cross", "norm2", "ffn", "norm3"):
            for k, v in getattr(self, part).named().items():
                out[f"{part}.{k}"] = v
        return out

    def __call__(self, y, memory, tgt_pad, cross_visible, rate=0.0, rng=None):
        mixed, weights = mix(self.spec, self.mix, y, tgt_pad, causal=True)
        y = sublayer(y, mixed, self.norm1, rate, rng)
        attended, cross_weights = attention(y, memory, cross_visible, self.cross)
        y = sublayer(y, attended, self.norm2, rate, rng)
        y = sublayer(y, ffn(y, self.ffn, rate, rng), self.norm3, rate, rng)
        return y, weights, cross_weights


class Model:
    """Encoder-decoder whose self-mixing sublayers follow ``config``.

    Cross-attention in every decoder layer is standard multi-head attention.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        D, K, F, V = config.d_model, config.n_heads, config.d_ff, config.vocab_size
        std = D**-0.5
        self.src_embed = Tensor(rng.normal(0.0, std, (V, D)), requires_grad=True)
        if config.tie_embeddings:
            self.tgt_embed = self.out_proj = self.src_embed
        else:
            self.tgt_embed = Tensor(rng.normal(0.0, std, (V, D)), requires_grad=True)
            self.out_proj = Tensor(rng.normal(0.0, std, (V, D)), requires_grad=True)
        self.encoder = [EncoderLayer(s, rng, D, K, F) for s in config.encoder_layers]
        self.decoder = [DecoderLayer(s, rng, D, K, F) for s in config.decoder_layers]

    def parameters(self) -> dict[str, Tensor]:
        if self.config.tie_embeddings:
            params = {"embed.shared": self.src_embed}
        else:
            params = {"embed.src": self.src_embed, "embed.tgt": self.tgt_embed, "embed.out": self.out_proj}
        for i, layer in enumerate(self.encoder):
            params.update({f"encoder.{i}.{k}": v for k, v in layer.named().items()})
        for i, layer in enumerate(self.decoder):
            params.update({f"decoder.{i}.{k}": v for k, v in layer.named().items()})
        return params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------ forward

    def embed_source(self, src) -> Tensor:
        return embed_and_position(src, self.src_embed, self.config.max_len, self.config.positional_encoding)

    def encode_embedded(self, h: Tensor, src_pad=None, rate=0.0, rng=None, depth=None):
        """Run the first ``depth`` encoder layers; returns ``(outputs per layer, weights)``."""
        outputs, weights = [], {}
        for i, layer in enumerate(self.encoder[:depth]):
            h, w = layer(h, src_pad, rate, rng)
            outputs.append(h)
            if w is not None:
                weights[f"encoder.{i}"] = w
        return outputs, weights

    def encode(self, src, src_pad=None, rate=0.0, rng=None):
        h = dropout(self.embed_source(src), rate, rng)
        outputs, weights = self.encode_embedded(h, src_pad, rate, rng)
        return (outputs[-1] if outputs else h), weights

    def decode(self, tgt_in, memory, src_pad=None, tgt_pad=None, rate=0.0, rng=None):
        y = embed_and_position(tgt_in, self.tgt_embed, self.config.max_len, self.config.positional_encoding)
        y = dropout(y, rate, rng)
        cross_visible = attention_visibility(y.shape[1], memory.shape[1], key_pad=src_pad)
        weights = {}
        for i, layer in enumerate(self.decoder):
            y, w, cw = layer(y, memory, tgt_pad, cross_visible, rate, rng)
            if w is not None:
                weights[f"decoder.{i}"] = w
            weights[f"decoder.{i}.cross"] = cw
        return matmul(y, swap_last(self.out_proj)), weights

    def forward(self, src, tgt_in, src_pad=None, tgt_pad=None, rng=None, train=False):
        """Teacher-forced logits ``[B, L_tgt, V]`` and attention weights by layer name.

        Dropout is active only when ``train`` is set and an ``rng`` is given.
        """
        src, tgt_in = np.atleast_2d(src), np.atleast_2d(tgt_in)
        for name, ids in (("source", src), ("target", tgt_in)):
            if ids.shape[1] > self.config.max_len:
                raise ValueError(f"{name} length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        rate = self.config.dropout if (train and rng is not None) else 0.0
        memory, enc_weights = self.encode(src, src_pad, rate, rng)
        logits, dec_weights = self.decode(tgt_in, memory, src_pad, tgt_pad, rate, rng)
        return logits, {**enc_weights, **dec_weights}

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, np.random.default_rng(seed))


def greedy_decode(model: Model, src, max_steps: int, eos_id: int = EOS, src_pad=None, return_logits=False):
    """Greedy argmax decoding from BOS; returns one body (EOS excluded) per row.

    Each step re-runs the decoder on the full emitted prefix so the step
    distribution is the teacher-forced distribution of that prefix.
    """
    src = np.atleast_2d(np.asarray(src))
    if max_steps > model.config.max_len:
        raise ValueError(f"max_steps {max_steps} exceeds max_len {model.config.max_len}")
    B = src.shape[0]
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    step_logits = []
    with no_grad():
        memory, _ = model.encode(src, src_pad)
        for _ in range(max_steps):
            logits, _ = model.decode(prefix, memory, src_pad)
            last = logits.data[:, -1, :]
            step_logits.append(last)
            nxt = np.where(done, PAD, last.argmax(axis=-1))
            done |= nxt == eos_id
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            if done.all():
                break
    bodies = []
    for row in prefix[:, 1:]:
        body = []
        for tok in row:
            if tok == eos_id or tok == PAD:
                break
            body.append(int(tok))
        bodies.append(body)
    if return_logits:
        return bodies, np.stack(step_logits, axis=1)
    return bodies


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "ngramformer-checkpoint"
CHECKPOINT_VERSION = 1


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: Model, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Write a versioned ``.npz`` container.

    Layout: ``meta`` holds a JSON document with the format tag, version,
    model config and a SHA-256 over all stored tensors; ``param/<name>``
    holds each parameter as a little-endian float64 array; optional extra
    arrays (e.g. optimizer moments) live under their own prefixes.
    """
    stored = {f"param/{k}": v.data for k, v in model.parameters().items()}
    stored.update(arrays or {})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(model.config),
        "sha256": _digest(stored),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **stored)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, meta, extra_arrays)``; raises :class:`CheckpointError`."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in files:
        raise CheckpointError(f"{path}: missing metadata record")
    try:
        meta = json.loads(str(files.pop("meta")))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: metadata is not valid JSON") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format')!r} v{meta.get('version')!r}")
    if _digest(files) != meta.get("sha256"):
        raise CheckpointError(f"{path}: integrity check failed (checksum mismatch)")
    try:
        config = config_from_dict(meta["config"])
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    model = build_model(config, seed=0)
    params = model.parameters()
    stored = {k[len("param/"):]: v for k, v in files.items() if k.startswith("param/")}
    if set(stored) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {stored[name].shape}, config expects {p.shape}")
        p.data[...] = stored[name]
    extra = {k: v for k, v in files.items() if not k.startswith("param/")}
    return model, meta, extra


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["encoder_layers"] = [LayerSpec(**s) for s in d["encoder_layers"]]
    d["decoder_layers"] = [LayerSpec(**s) for s in d["decoder_layers"]]
    return ModelConfig(**d).validate()


def transformer_base_config(vocab_size: int = 32768) -> ModelConfig:
    return ModelConfig(
        d_model=512,
        n_heads=8,
        d_ff=2048,
        vocab_size=vocab_size,
        max_len=1024,
        encoder_layers=[LayerSpec() for _ in range(6)],
        decoder_layers=[LayerSpec() for _ in range(6)],
        dropout=0.1,
        tie_embeddings=True,
    )

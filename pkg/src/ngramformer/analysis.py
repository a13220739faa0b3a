"""Attention-distance histograms and receptive-field probes."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import NGRAM, LayerSpec
from .model import Model
from .tensor import Tensor, no_grad
from .training import Pair, make_batches

AGGREGATION = (
    "mass per relative offset (key - query) averaged over examples, heads and "
    "unpadded query positions; cross-attention excluded"
)


class NoAttentionError(ValueError):
    """The model has no attention-producing self-mixing layer."""


@dataclass
class DistanceHistogram:
    layers: dict[str, dict[int, float]]
    metadata: dict = field(default_factory=dict)

    def total(self, layer: str) -> float:
        return sum(self.layers[layer].values())

    def rows(self):
        for name, bins in self.layers.items():
            for offset in sorted(bins):
                yield name, offset, bins[offset]

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["layer", "offset", "mass"])
            for name, offset, mass in self.rows():
                writer.writerow([name, offset, repr(mass)])
        path.with_name(path.name + ".meta.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")


def read_histogram_csv(path) -> DistanceHistogram:
    layers: dict[str, dict[int, float]] = defaultdict(dict)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            layers[row["layer"]][int(row["offset"])] = float(row["mass"])
    return DistanceHistogram(dict(layers))


def attention_distance_histogram(model: Model, pairs: list[Pair], batch_size: int = 64) -> DistanceHistogram:
    """Per-layer distribution of attention mass over relative offsets.

    Covers every encoder and decoder self-mixing layer that produces
    attention weights.
    """
    specs = [("encoder", i, s) for i, s in enumerate(model.config.encoder_layers)]
    specs += [("decoder", i, s) for i, s in enumerate(model.config.decoder_layers)]
    names = [f"{side}.{i}" for side, i, s in specs if s.produces_attention]
    if not names:
        raise NoAttentionError(
            "model has no attention weights to histogram: every self-mixing layer is an n-gram layer"
        )
    if not pairs:
        raise ValueError("dataset is empty")
    mass = {name: defaultdict(float) for name in names}
    rows = dict.fromkeys(names, 0)
    with no_grad():
        for batch in make_batches(pairs, batch_size):
            _, weights = model.forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
            for name in names:
                alpha = weights[name]  # [B, K, Lq, Lk]
                pad = batch.src_pad if name.startswith("encoder") else batch.tgt_pad
                B, K, L, _ = alpha.shape
                offsets = np.arange(L)[None, :] - np.arange(L)[:, None]
                live = (~pad)[:, None, :, None]
                summed = (alpha * live).sum(axis=(0, 1))  # [Lq, Lk]
                for o in range(-(L - 1), L):
                    m = summed[offsets == o].sum()
                    if m:
                        mass[name][o] += float(m)
                rows[name] += int((~pad).sum()) * K
    layers = {name: {o: m / rows[name] for o, m in sorted(mass[name].items())} for name in names}
    return DistanceHistogram(layers, {"aggregation": AGGREGATION, "examples": len(pairs)})


# ---------------------------------------------------------------- receptive field


@dataclass
class ReceptiveFieldReport:
    """For each depth, the input positions that moved the output at ``probe_position``."""

    probe_position: int
    tolerance: float
    changes: dict[int, dict[int, float]]

    def positions(self, depth: int) -> set[int]:
        return set(self.changes[depth])

    def rows(self):
        for depth in sorted(self.changes):
            for pos in sorted(self.changes[depth]):
                yield depth, self.probe_position, pos, self.changes[depth][pos]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["depth", "probe_position", "input_position", "delta_norm"])
            for row in self.rows():
                writer.writerow([row[0], row[1], row[2], repr(row[3])])


def ngram_window_bound(specs: list[LayerSpec], t: int, length: int) -> tuple[int, int] | None:
    """Analytic receptive field of an encoder stack at position ``t``.

    Returns ``None`` when some layer can see the whole sequence (attention or
    global context).
    """
    reach = 0
    for spec in specs:
        if spec.kind != NGRAM or spec.use_global:
            return None
        reach += spec.n - 1
    return max(0, t - reach), min(length - 1, t + reach)


def receptive_field_probe(
    model: Model, src, t: int, tolerance: float = 1e-9, delta: float = 1.0
) -> ReceptiveFieldReport:
    """Perturb each input position of the encoder stack and watch position ``t``.

    The embedded input gets ``delta`` added to every feature of one
    position; positions whose perturbation moves the depth-``d`` output at
    ``t`` by more than ``tolerance`` (max-abs) are reported with the L2 norm
    of the change.  Positions are 0-based.
    """
    src = np.atleast_2d(np.asarray(src))[:1]
    L = src.shape[1]
    if not 0 <= t < L:
        raise ValueError(f"probe position {t} outside [0, {L})")
    with no_grad():
        h0 = model.embed_source(src).data
        base, _ = model.encode_embedded(Tensor(h0))
        changes: dict[int, dict[int, float]] = {d + 1: {} for d in range(len(base))}
        for pos in range(L):
            h = h0.copy()
            h[:, pos, :] += delta
            outs, _ = model.encode_embedded(Tensor(h))
            for d, (a, b) in enumerate(zip(base, outs), start=1):
                diff = b.data[0, t] - a.data[0, t]
                if np.abs(diff).max() > tolerance:
                    changes[d][pos] = float(np.linalg.norm(diff))
    return ReceptiveFieldReport(t, tolerance, changes)

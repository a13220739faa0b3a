"""Synthetic seq2seq tasks, objective, optimizer, training loop and metrics."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import BOS, EOS, N_SPECIALS, PAD, Model, ModelConfig, build_model, greedy_decode
from .tensor import Tensor, log_softmax_last_dim, mul, no_grad, pick_last_dim, tsum

log = logging.getLogger(__name__)

TASK_KINDS = ("copy", "reverse", "sort")
SPLITS = ("train", "valid", "test")

Pair = tuple[list[int], list[int]]


@dataclass
class SyntheticTask:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 5
    max_len: int = 20
    train_size: int = 10000
    valid_size: int = 500
    test_size: int = 500
    seed: int = 0

    def validate(self) -> "SyntheticTask":
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}", "kind")
        if self.vocab_size <= N_SPECIALS:
            raise ConfigError(f"vocab_size must exceed the {N_SPECIALS} reserved specials", "vocab_size")
        if self.min_len < 1:
            raise ConfigError("min_len must be >= 1", "min_len")
        if self.min_len > self.max_len:
            raise ConfigError(f"min_len {self.min_len} > max_len {self.max_len}", "min_len")
        for name in ("train_size", "valid_size", "test_size"):
            if getattr(self, name) < 0:
                raise ConfigError("split size must be >= 0", name)
        return self


def target_for(kind: str, source: list[int]) -> list[int]:
    if kind == "copy":
        return list(source)
    if kind == "reverse":
        return source[::-1]
    if kind == "sort":
        return sorted(source)
    raise ConfigError(f"unknown task kind {kind!r}", "kind")


def generate_task(task: SyntheticTask) -> dict[str, list[Pair]]:
    """Deterministic train/valid/test pairs for ``task``.

    Candidate ``i`` is drawn from a generator seeded by ``(seed, i)``.  Its
    split is chosen by hashing the source sequence, so no source can land in
    two splits; duplicates within a split are skipped.
    """
    task.validate()
    sizes = {"train": task.train_size, "valid": task.valid_size, "test": task.test_size}
    total = sum(sizes.values())
    out: dict[str, list[Pair]] = {s: [] for s in SPLITS}
    if total == 0:
        return out
    bounds = np.cumsum([sizes[s] for s in SPLITS]) / total
    seen: set[tuple[int, ...]] = set()
    space = sum((task.vocab_size - N_SPECIALS) ** L for L in range(task.min_len, task.max_len + 1))
    if space < total:
        raise ConfigError(f"only {space} distinct sources exist, {total} requested", "train_size")
    i = 0
    while any(len(out[s]) < sizes[s] for s in SPLITS):
        rng = np.random.default_rng([task.seed, i])
        i += 1
        if i > 1000 * total + 10000:
            raise ConfigError("could not fill the requested splits; enlarge vocabulary or lengths")
        length = int(rng.integers(task.min_len, task.max_len + 1))
        src = tuple(int(t) for t in rng.integers(N_SPECIALS, task.vocab_size, size=length))
        if src in seen:
            continue
        digest = hashlib.sha256(np.asarray(src, dtype="<i8").tobytes()).digest()
        u = int.from_bytes(digest[:8], "little") / 2**64
        split = SPLITS[int(np.searchsorted(bounds, u, side="right"))]
        if len(out[split]) >= sizes[split]:
            continue
        seen.add(src)
        out[split].append((list(src), target_for(task.kind, list(src))))
    return out


def save_dataset(path, pairs: list[Pair]) -> None:
    """One pair per line: source ids, a tab, target ids (space-separated)."""
    lines = [" ".join(map(str, s)) + "\t" + " ".join(map(str, t)) for s, t in pairs]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_dataset(path) -> list[Pair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            src, tgt = line.split("\t")
            pairs.append(([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: expected '<source ids>\\t<target ids>'") from exc
    return pairs


# ---------------------------------------------------------------- batching


@dataclass
class SequenceBatch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_pad: np.ndarray
    tgt_pad: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: list[Pair], src_len: int | None = None, tgt_len: int | None = None):
        """Pad to the batch maximum (or the given lengths) with trailing PAD."""
        B = len(pairs)
        Ls = max(src_len or 0, max(len(s) for s, _ in pairs))
        Lt = max(tgt_len or 0, max(len(t) + 1 for _, t in pairs))
        src = np.full((B, Ls), PAD, dtype=np.int64)
        tgt_in = np.full((B, Lt), PAD, dtype=np.int64)
        tgt_out = np.full((B, Lt), PAD, dtype=np.int64)
        for b, (s, t) in enumerate(pairs):
            src[b, : len(s)] = s
            tgt_in[b, : len(t) + 1] = [BOS, *t]
            tgt_out[b, : len(t) + 1] = [*t, EOS]
        return cls(src, tgt_in, tgt_out, src == PAD, tgt_out == PAD)

    def __len__(self) -> int:
        return self.src.shape[0]


def make_batches(pairs: list[Pair], batch_size: int, rng: np.random.Generator | None = None):
    """Bucket by length: sort by (source, target) length, chunk, shuffle chunk order.

    Without ``rng`` the order is fully deterministic and unshuffled.
    """
    keys = np.array([len(s) for s, _ in pairs]), np.array([len(t) for _, t in pairs])
    jitter = rng.random(len(pairs)) if rng is not None else np.arange(len(pairs))
    order = np.lexsort((jitter, keys[1], keys[0]))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [SequenceBatch.from_pairs([pairs[j] for j in c]) for c in chunks]


# ---------------------------------------------------------------- objective


def cross_entropy_loss(logits: Tensor, target_output, pad_mask) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions."""
    target_output = np.asarray(target_output)
    keep = ~np.asarray(pad_mask, dtype=bool)
    if logits.shape[:-1] != target_output.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {target_output.shape}")
    count = keep.sum()
    if count == 0:
        raise ValueError("cross_entropy_loss: every target position is padding")
    nll = pick_last_dim(log_softmax_last_dim(logits), target_output)
    return mul(tsum(mul(nll, keep.astype(np.float64))), -1.0 / count)


def token_counts(logits: np.ndarray, target_output, pad_mask) -> tuple[int, int]:
    keep = ~np.asarray(pad_mask, dtype=bool)
    correct = (logits.argmax(axis=-1) == target_output) & keep
    return int(correct.sum()), int(keep.sum())


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-4
    schedule: str = "fixed"
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    target_token_accuracy: float | None = None
    target_exact_match: float | None = None

    def validate(self) -> "TrainConfig":
        if self.schedule not in ("fixed", "inverse_sqrt"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", "schedule")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.lr < 0:
            raise ConfigError("must be >= 0", "lr")
        if self.warmup_steps < 1:
            raise ConfigError("must be >= 1", "warmup_steps")
        return self


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def learning_rate(hp: TrainConfig, step: int, d_model: int) -> float:
    """Fixed rate, or ``lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if hp.schedule == "fixed":
        return hp.lr
    step = max(step, 1)
    return hp.lr * d_model**-0.5 * min(step**-0.5, step * hp.warmup_steps**-1.5)


def adam_step(
    state: TrainState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """In-place bias-corrected Adam update of every parameter with a gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        params[name].data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- evaluation


def evaluate(model: Model, pairs: list[Pair], batch_size: int = 64, decode: bool = True) -> dict:
    """Teacher-forced loss and token accuracy, plus greedy exact match."""
    if not pairs:
        raise ValueError("evaluate: dataset is empty")
    correct = total = 0
    nll = 0.0
    exact = 0
    with no_grad():
        for batch in make_batches(pairs, batch_size):
            logits, _ = model.forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
            c, n = token_counts(logits.data, batch.tgt_out, batch.tgt_pad)
            correct += c
            total += n
            nll += cross_entropy_loss(logits, batch.tgt_out, batch.tgt_pad).item() * n
            if decode:
                steps = min(batch.tgt_out.shape[1], model.config.max_len)
                decoded = greedy_decode(model, batch.src, steps, EOS, batch.src_pad)
                refs = [list(row[: (~pad).sum() - 1]) for row, pad in zip(batch.tgt_out, batch.tgt_pad)]
                exact += sum(d == r for d, r in zip(decoded, refs))
    return {
        "loss": nll / total,
        "token_accuracy": correct / total,
        "exact_match": exact / len(pairs) if decode else float("nan"),
    }


# ---------------------------------------------------------------- training


def _check_compatible(config: ModelConfig, data: dict[str, list[Pair]]) -> None:
    longest = max((len(t) + 1 for split in data.values() for _, t in split), default=0)
    longest = max(longest, max((len(s) for split in data.values() for s, _ in split), default=0))
    if longest > config.max_len:
        raise ConfigError(f"max_len {config.max_len} is shorter than the longest sequence ({longest})", "max_len")
    top = max((max(s + t) for split in data.values() for s, t in split), default=0)
    if top >= config.vocab_size:
        raise ConfigError(f"dataset uses token id {top} but vocab_size is {config.vocab_size}", "vocab_size")


def train(
    config: ModelConfig,
    task: SyntheticTask,
    hyper: TrainConfig,
    seed: int | None = None,
    data: dict[str, list[Pair]] | None = None,
    model: Model | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[Model, TrainState], None] | None = None,
):
    """Teacher-forced training; returns ``(model, state)``.

    ``state.history`` holds one ``train`` and one ``valid`` row per epoch
    (plus a ``valid`` row for epoch 0, the untrained model).  Passing a
    previously returned ``model``/``state`` resumes where it stopped; the
    per-epoch shuffling and dropout streams are keyed by ``(seed, epoch)``,
    so a resumed run follows the same trajectory as an uninterrupted one.
    """
    hyper.validate()
    seed = hyper.seed if seed is None else seed
    data = generate_task(task) if data is None else data
    _check_compatible(config, data)
    if not data["train"]:
        raise ConfigError("training split is empty", "train_size")
    model = build_model(config, seed) if model is None else model
    state = TrainState() if state is None else state
    params = model.parameters()
    valid = data.get("valid") or []

    def record(epoch: int, split: str, metrics: dict) -> dict:
        row = {"epoch": epoch, "split": split, **{k: float(metrics[k]) for k in ("loss", "token_accuracy", "exact_match")}}
        state.history.append(row)
        return row

    if state.epoch == 0 and not state.history and valid:
        record(0, "valid", evaluate(model, valid, hyper.batch_size))

    while state.epoch < hyper.epochs:
        epoch = state.epoch + 1
        rng = np.random.default_rng([seed, epoch])
        loss_sum = 0.0
        correct = total = 0
        for batch in make_batches(data["train"], hyper.batch_size, rng):
            model.zero_grad()
            logits, _ = model.forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad, rng=rng, train=True)
            loss = cross_entropy_loss(logits, batch.tgt_out, batch.tgt_pad)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {state.step + 1}")
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            lr = learning_rate(hyper, state.step + 1, config.d_model)
            adam_step(state, params, grads, lr, hyper.beta1, hyper.beta2, hyper.adam_eps)
            c, n = token_counts(logits.data, batch.tgt_out, batch.tgt_pad)
            correct += c
            total += n
            loss_sum += value * n
        state.epoch = epoch
        record(epoch, "train", {"loss": loss_sum / total, "token_accuracy": correct / total, "exact_match": float("nan")})
        if valid:
            row = record(epoch, "valid", evaluate(model, valid, hyper.batch_size))
            log.info("epoch %d: valid loss %.4f tok %.4f em %.4f", epoch, row["loss"], row["token_accuracy"], row["exact_match"])
        if on_epoch is not None:
            on_epoch(model, state)
        if valid and _reached_targets(hyper, state.history[-1]):
            break
    return model, state


def _reached_targets(hyper: TrainConfig, row: dict) -> bool:
    if hyper.target_token_accuracy is None and hyper.target_exact_match is None:
        return False
    ok_tok = hyper.target_token_accuracy is None or row["token_accuracy"] >= hyper.target_token_accuracy
    ok_em = hyper.target_exact_match is None or row["exact_match"] >= hyper.target_exact_match
    return ok_tok and ok_em


METRIC_COLUMNS = ("epoch", "split", "loss", "token_accuracy", "exact_match")


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow(
                [row["epoch"], row["split"]]
                + ["" if math.isnan(row[k]) else repr(row[k]) for k in METRIC_COLUMNS[2:]]
            )


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "epoch": int(r["epoch"]),
                    "split": r["split"],
                    **{k: float(r[k]) if r[k] else float("nan") for k in METRIC_COLUMNS[2:]},
                }
            )
    return rows

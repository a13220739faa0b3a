"""``ngramformer`` command line: train, eval, gradcheck, params, analyze.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import NoAttentionError, attention_distance_histogram, ngram_window_bound, receptive_field_probe
from .errors import CheckpointError, ConfigError, DivergenceError
from .gradcheck import run_gradchecks
from .model import count_params, human_count, load_checkpoint, save_checkpoint
from .training import (
    SPLITS,
    TrainState,
    evaluate,
    generate_task,
    load_dataset,
    save_dataset,
    train,
    write_metrics_csv,
)

log = logging.getLogger("ngramformer")

OK, VERIFY_FAILED, USAGE, DIVERGED = 0, 1, 2, 3


def _thread_limit():
    threads = os.environ.get("NGRAMFORMER_THREADS")
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    exp = cfgmod.load_config(args.config)
    if args.seed is not None:
        exp.training.seed = args.seed
    if args.out:
        exp.output_dir = str(args.out)
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_task(exp.task)
    for split in SPLITS:
        save_dataset(out / f"{split}.txt", data[split])
    cfgmod.save_config(out / "config.cfg", exp)

    model = state = None
    ckpt = out / "checkpoint.npz"
    if args.resume and ckpt.exists():
        model, meta, arrays = load_checkpoint(ckpt)
        if model.config != exp.model:
            raise ConfigError(f"{ckpt} was written for a different model config", "model")
        state = _state_from_checkpoint(meta, arrays)

    def persist(m, s):
        _save_run(out, m, s)

    try:
        model, state = train(exp.model, exp.task, exp.training, data=data, model=model, state=state, on_epoch=persist)
    except DivergenceError as exc:
        return _fail(DIVERGED, f"training diverged: {exc}")
    _save_run(out, model, state)
    final = [r for r in state.history if r["split"] == "valid"]
    if final:
        r = final[-1]
        print(f"epoch={r['epoch']} token_accuracy={r['token_accuracy']!r} exact_match={r['exact_match']!r}")
    print(f"wrote {ckpt} and {out / 'metrics.csv'}")
    return OK


def _save_run(out: Path, model, state: TrainState) -> None:
    arrays = {f"adam_m/{k}": v for k, v in state.m.items()}
    arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    extra = {"step": state.step, "epoch": state.epoch, "history": state.history}
    save_checkpoint(out / "checkpoint.npz", model, extra=extra, arrays=arrays)
    write_metrics_csv(out / "metrics.csv", state.history)


def _state_from_checkpoint(meta: dict, arrays: dict) -> TrainState:
    extra = meta.get("extra", {})
    state = TrainState(step=extra.get("step", 0), epoch=extra.get("epoch", 0), history=list(extra.get("history", [])))
    for key, value in arrays.items():
        prefix, _, name = key.partition("/")
        if prefix == "adam_m":
            state.m[name] = np.array(value)
        elif prefix == "adam_v":
            state.v[name] = np.array(value)
    return state


def _load_eval_inputs(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    pairs = load_dataset(args.data)
    if not pairs:
        raise ConfigError(f"dataset {args.data} is empty")
    top = max(max(s + t) for s, t in pairs)
    longest = max(max(len(s), len(t) + 1) for s, t in pairs)
    if top >= model.config.vocab_size or longest > model.config.max_len:
        raise ConfigError(
            f"dataset does not fit the checkpoint (max id {top} vs vocab {model.config.vocab_size}, "
            f"length {longest} vs max_len {model.config.max_len})"
        )
    return model, pairs


def cmd_eval(args) -> int:
    model, pairs = _load_eval_inputs(args)
    metrics = evaluate(model, pairs)
    for key in ("token_accuracy", "exact_match", "loss"):
        print(f"{key}={metrics[key]!r}")
    return OK


def cmd_gradcheck(args) -> int:
    exp = cfgmod.load_config(args.config)
    results = run_gradchecks(exp.model, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return VERIFY_FAILED
    return OK


def cmd_params(args) -> int:
    exp = cfgmod.load_config(args.config)
    n = count_params(exp.model)
    print(f"{n} ({human_count(n)})")
    return OK


def cmd_analyze(args) -> int:
    model, pairs = _load_eval_inputs(args)
    out = Path(args.out or f"{args.mode}.csv")
    if args.mode == "hist":
        try:
            hist = attention_distance_histogram(model, pairs)
        except NoAttentionError as exc:
            return _fail(USAGE, str(exc))
        hist.to_csv(out)
        for name in hist.layers:
            print(f"{name} mass={hist.total(name):.9f}")
    else:
        src = pairs[0][0]
        t = len(src) // 2 if args.position is None else args.position
        report = receptive_field_probe(model, src, t)
        report.to_csv(out)
        for depth in sorted(report.changes):
            bound = ngram_window_bound(model.config.encoder_layers[:depth], t, len(src))
            span = sorted(report.positions(depth))
            print(f"depth={depth} positions={span} analytic_bound={bound}")
    print(f"wrote {out}")
    return OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ngramformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True, help="config path or bundled config name")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="training seed (overrides training.seed)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="teacher-forced accuracy and greedy exact match")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file: '<source ids>\\t<target ids>' per line")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind in a config")
    p.add_argument("--config", default="copy_ngram.cfg")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="exact parameter count of a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("analyze", help="attention-distance histogram or receptive-field probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("hist", "rf"))
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--position", type=int, help="0-based probe position for rf (default: middle)")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        return _fail(USAGE, f"invalid configuration: {exc}")
    except CheckpointError as exc:
        return _fail(USAGE, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())

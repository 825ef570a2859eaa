"""Command-line entry point.

Subcommands: synth, train, eval, saliency, verify, gradcheck, compare.
Option values resolve as command-line flag > config file > default; the
config file is line-oriented ``key = value`` text. SF_SEED provides the
seed when neither a flag nor the config file does. Exit codes: 0 success,
1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    SynthConfig,
    Vocabulary,
    gen_synthetic,
    load_embeddings,
    load_jsonl,
    save_jsonl,
)
from .evaluation import (
    evaluate_model,
    mcnemar_one_sided,
    predict_batch,
    saliency_report,
    serialize_metrics,
    serialize_verification,
    verify_tpr_drop,
)
from .gradcheck import model_cost_gradcheck
from .loss import SaliencyConfig
from .model import LEVELS, ModelConfig, ModelParams
from .report import render_heatmap
from .training import NumericalError, TrainConfig, train

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (validation error) on bad usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"error: {message}")


@dataclass
class RunConfig:
    """A resolved command invocation: every option has a value."""

    command: str
    options: dict

    def __getitem__(self, key):
        return self.options[key]


# option tables: name -> (type, default)
_COMMON = {"config": (str, None), "seed": (int, 0)}

_SPECS = {
    "synth": {
        "mode": (str, "event"),
        "count": (int, 1000),
        "vocab_size": (int, 200),
        "triggers": (int, 8),
        "bias_rate": (float, 0.0),
        "context_size": (int, 0),
        "context_rate_pos": (float, 0.0),
        "context_rate_neg": (float, 0.0),
        "min_len": (int, 6),
        "max_len": (int, 12),
        "positive_fraction": (float, 0.5),
        "out": (str, "dataset.jsonl"),
    },
    "train": {
        "train": (str, None),
        "dev": (str, None),
        "embed_dim": (int, 32),
        "max_len": (int, 40),
        "lambda": (float, 0.0),
        "levels": (str, ",".join(LEVELS)),
        "lr": (float, 1e-4),
        "batch": (int, 32),
        "dropout": (float, 0.5),
        "epochs": (int, 20),
        "patience": (int, 5),
        "embeddings": (str, None),
        "out": (str, "run"),
    },
    "eval": {
        "checkpoint": (str, None),
        "vocab": (str, None),
        "data": (str, None),
        "out": (str, None),
    },
    "saliency": {
        "checkpoint": (str, None),
        "baseline_checkpoint": (str, None),
        "vocab": (str, None),
        "data": (str, None),
        "k": (int, 6),
        "limit": (int, 10),
        "out": (str, "heatmaps"),
    },
    "verify": {
        "checkpoint": (str, None),
        "vocab": (str, None),
        "data": (str, None),
        "out": (str, None),
    },
    "gradcheck": {
        "d": (int, 8),
        "n": (int, 6),
        "examples": (int, 5),
        "eps": (float, 1e-4),
        "strength": (float, 0.5),
    },
    "compare": {
        "checkpoint_a": (str, None),
        "checkpoint_b": (str, None),
        "vocab": (str, None),
        "data": (str, None),
        "out": (str, None),
    },
}


def _parse_config_file(path):
    """Line-oriented ``key = value`` text; blank lines and # comments ok."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path} line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve(command, args) -> RunConfig:
    """Merge flag > config file > environment (seed) > default."""
    spec = dict(_COMMON, **_SPECS[command])
    file_values = {}
    if args.config is not None:
        if not Path(args.config).is_file():
            raise ValueError(f"config file not found: {args.config}")
        file_values = _parse_config_file(args.config)
        unknown = set(file_values) - set(spec)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    options = {}
    for name, (typ, default) in spec.items():
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            options[name] = flag_value
        elif name in file_values:
            options[name] = typ(file_values[name])
        elif name == "seed" and os.environ.get("SF_SEED"):
            options[name] = int(os.environ["SF_SEED"])
        else:
            options[name] = default
    return RunConfig(command=command, options=options)


def _require_file(path, what):
    if path is None:
        raise ValueError(f"missing required path: {what}")
    if not Path(path).is_file():
        raise ValueError(f"{what} not found: {path}")
    return path


def _load_model(checkpoint, vocab_path):
    _require_file(checkpoint, "checkpoint")
    if vocab_path is None:
        vocab_path = str(Path(checkpoint).with_name("vocab.txt"))
    _require_file(vocab_path, "vocabulary")
    params, config = ModelParams.load(checkpoint)
    vocab = Vocabulary.load(vocab_path)
    return params, config, vocab


def _dataset_for(config, path, vocab):
    dataset = load_jsonl(path, vocab)
    mode = "qa" if dataset.mode == "qa" else "event"
    if mode != config.mode:
        config = ModelConfig(
            vocab_size=config.vocab_size,
            embed_dim=config.embed_dim,
            max_len=config.max_len,
            window_sizes=config.window_sizes,
            mode=mode,
        )
    return dataset, config


def cmd_synth(run: RunConfig):
    cfg = SynthConfig(
        count=run["count"],
        vocab_size=run["vocab_size"],
        trigger_count=run["triggers"],
        bias_rate=run["bias_rate"],
        context_size=run["context_size"],
        context_rate_pos=run["context_rate_pos"],
        context_rate_neg=run["context_rate_neg"],
        min_len=run["min_len"],
        max_len=run["max_len"],
        positive_fraction=run["positive_fraction"],
        seed=run["seed"],
        mode=run["mode"],
    )
    dataset = gen_synthetic(cfg)
    out = Path(run["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(dataset, out)
    print(f"wrote {len(dataset.examples)} examples to {out}")
    return 0


def cmd_train(run: RunConfig):
    train_path = _require_file(run["train"], "training set")
    dev_path = _require_file(run["dev"], "dev set")
    train_set = load_jsonl(train_path)
    dev_set = load_jsonl(dev_path, train_set.vocab)
    mode = train_set.mode
    config = ModelConfig(
        vocab_size=len(train_set.vocab),
        embed_dim=run["embed_dim"],
        max_len=run["max_len"],
        mode=mode,
    )
    levels = tuple(s for s in run["levels"].split(",") if s)
    cfg = TrainConfig(
        learning_rate=run["lr"],
        batch_size=run["batch"],
        dropout=run["dropout"],
        epochs=run["epochs"],
        patience=run["patience"],
        seed=run["seed"],
        saliency=SaliencyConfig(strength=run["lambda"], levels=levels),
    )
    params = ModelParams(config, seed=cfg.seed)
    if run["embeddings"] is not None:
        _require_file(run["embeddings"], "embeddings file")
        dim, table, covered = load_embeddings(
            run["embeddings"], train_set.vocab, dim=config.embed_dim, seed=cfg.seed
        )
        if dim != config.embed_dim:
            raise ValueError(f"embeddings are {dim}-dimensional, model wants {config.embed_dim}")
        params.embedding.values[...] = table
        print(f"initialized {covered} embedding rows from file")
    params, log = train(config, train_set, dev_set, cfg, params=params)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "checkpoint.bin")
    train_set.vocab.save(out / "vocab.txt")
    log.to_jsonl(out / "train_log.jsonl")
    best = log.records[log.best_epoch - 1]
    print(f"best epoch {log.best_epoch}: dev F1 {best.dev_f1:.1f}, wrote {out}/checkpoint.bin")
    return 0


def cmd_eval(run: RunConfig):
    params, config, vocab = _load_model(run["checkpoint"], run["vocab"])
    _require_file(run["data"], "dataset")
    dataset, config = _dataset_for(config, run["data"], vocab)
    report = evaluate_model(params, config, dataset)
    text = serialize_metrics(report)
    if run["out"]:
        Path(run["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(run["out"]).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_saliency(run: RunConfig):
    params, config, vocab = _load_model(run["checkpoint"], run["vocab"])
    _require_file(run["data"], "dataset")
    dataset, config = _dataset_for(config, run["data"], vocab)
    baseline = None
    if run["baseline_checkpoint"]:
        baseline, _ = ModelParams.load(run["baseline_checkpoint"], mode=config.mode)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, ex in enumerate(dataset.examples[: run["limit"]]):
        rep = saliency_report(params, config, ex, vocab, k=run["k"])
        predictions = None
        _, own = predict_batch(params, config, [ex])
        if baseline is not None:
            _, other = predict_batch(baseline, config, [ex])
            predictions = {"baseline": int(other[0]), "saliency": int(own[0])}
        else:
            predictions = {"model": int(own[0])}
        (out / f"heatmap_{i:04d}.html").write_text(
            render_heatmap(ex, rep, predictions, k=run["k"]), encoding="utf-8"
        )
        count += 1
    print(f"wrote {count} heatmaps to {out}")
    return 0


def cmd_verify(run: RunConfig):
    params, config, vocab = _load_model(run["checkpoint"], run["vocab"])
    _require_file(run["data"], "dataset")
    dataset, config = _dataset_for(config, run["data"], vocab)
    positives = [ex for ex in dataset.examples if ex.label == 1 and ex.marked_count >= 1]
    if not positives:
        raise ValueError("dataset has no marked positive examples")
    report = verify_tpr_drop(params, config, positives)
    text = serialize_verification(report)
    if run["out"]:
        Path(run["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(run["out"]).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_gradcheck(run: RunConfig):
    worst, errors = model_cost_gradcheck(
        embed_dim=run["d"],
        max_len=run["n"],
        examples=run["examples"],
        eps=run["eps"],
        seed=run["seed"],
        strength=run["strength"],
    )
    for i, err in enumerate(errors):
        print(f"example {i}: max rel error {err:.3e}")
    print(f"max rel error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    if worst >= GRADCHECK_TOLERANCE:
        raise NumericalError(f"gradient check failed: {worst:.3e}")
    return 0


def cmd_compare(run: RunConfig):
    _require_file(run["data"], "dataset")
    params_a, config, vocab = _load_model(run["checkpoint_a"], run["vocab"])
    params_b, _ = ModelParams.load(_require_file(run["checkpoint_b"], "checkpoint"))
    dataset, config = _dataset_for(config, run["data"], vocab)
    labels = np.array(dataset.labels())
    _, pred_a = predict_batch(params_a, config, dataset.examples)
    _, pred_b = predict_batch(params_b, config, dataset.examples)
    a_only = int(np.sum((pred_a == labels) & (pred_b != labels)))
    b_only = int(np.sum((pred_b == labels) & (pred_a != labels)))
    if a_only + b_only == 0:
        text = f"b = {a_only}\nc = {b_only}\np = nan\n"
    else:
        p = mcnemar_one_sided(a_only, b_only)
        text = f"b = {a_only}\nc = {b_only}\np = {p:.6g}\n"
    if run["out"]:
        Path(run["out"]).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def build_parser():
    parser = _Parser(prog="salign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in _SPECS.items():
        p = sub.add_parser(command)
        for name, (typ, _) in dict(_COMMON, **spec).items():
            flag = "--" + name.replace("_", "-")
            if typ is int:
                p.add_argument(flag, type=int, default=None)
            elif typ is float:
                p.add_argument(flag, type=float, default=None)
            else:
                p.add_argument(flag, type=str, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        run = resolve(args.command, args)
        return _HANDLERS[args.command](run)
    except SystemExit as exc:
        if isinstance(exc.code, int):
            return 1 if exc.code else 0
        print(exc.code, file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

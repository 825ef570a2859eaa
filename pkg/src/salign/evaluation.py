"""Measurement protocol: classification metrics, gradient-alignment
accuracy per level, exact one-sided McNemar significance, top-k salient
tokens, and the evidence-removal verification check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .engine import grad, no_grad
from .model import LEVELS, encode, encode_batch


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    f1_undefined: bool = False
    s_acc: dict = field(default_factory=dict)


def classification_metrics(predictions, labels) -> MetricsReport:
    """Standard binary counts and percentage metrics.

    When precision + recall is zero the F1 is reported as 0 with the
    f1_undefined flag raised.
    """
    if len(predictions) != len(labels) or not labels:
        raise ValueError("predictions and labels must be equal-length and nonempty")
    tp = fp = tn = fn = 0
    for p, y in zip(predictions, labels):
        if y == 1:
            tp, fn = tp + (p == 1), fn + (p == 0)
        else:
            fp, tn = fp + (p == 1), tn + (p == 0)
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    undefined = precision + recall == 0
    f1 = 0.0 if undefined else 2.0 * precision * recall / (precision + recall)
    accuracy = 100.0 * (tp + tn) / len(labels)
    return MetricsReport(
        tp=int(tp),
        fp=int(fp),
        tn=int(tn),
        fn=int(fn),
        precision=precision,
        recall=recall,
        f1=f1,
        accuracy=accuracy,
        f1_undefined=bool(undefined),
    )


def saliency_accuracy(G, Z):
    """Percentage of marked positions whose gradient is strictly positive.

    Returns None (skip signal) when the mask marks nothing; a marked
    gradient of exactly zero counts as a failure.
    """
    G = np.asarray(G, dtype=np.float64)
    Z = np.asarray(Z)
    if G.shape != Z.shape:
        raise ValueError("gradient and mask must have equal length")
    marked = int(Z.sum())
    if marked == 0:
        return None
    hits = int(((Z > 0) & (G > 0)).sum())
    return 100.0 * hits / marked


def predict_batch(params, config, examples, chunk=256):
    """(probabilities, hard labels) for a list of examples, dropout off."""
    probs = []
    with no_grad():
        for lo in range(0, len(examples), chunk):
            part = examples[lo : lo + chunk]
            trace = encode_batch(part, params, config)
            logits = np.atleast_1d(trace.logit.values)
            probs.append(1.0 / (1.0 + np.exp(-logits)))
    probs = np.concatenate(probs) if probs else np.zeros(0)
    return probs, (probs >= 0.5).astype(np.int64)


def saliency_scores(params, config, examples, levels=LEVELS, chunk=128):
    """Per-token score gradients for each example at each level.

    Returns one dict per example mapping level -> array over the true
    (unpadded, possibly truncated) token positions. Dropout is disabled, so
    the result is deterministic.
    """
    out = []
    levels = tuple(levels)
    for lo in range(0, len(examples), chunk):
        part = examples[lo : lo + chunk]
        trace = encode_batch(part, params, config)
        targets = [trace.level_tensor(level) for level in levels]
        grads = grad(ops.sum_all(trace.logit), targets)
        per_level = {}
        for level in levels:
            g = grads[trace.level_tensor(level)].values
            per_level[level] = g.sum(axis=-1) if g.ndim == 3 else g
        for row, ex in enumerate(part):
            n = min(len(ex.tokens), config.max_len)
            out.append({level: per_level[level][row, :n].copy() for level in levels})
    return out


def dataset_saliency_accuracy(params, config, examples, levels=LEVELS, chunk=128):
    """Micro-aggregated alignment accuracy over a dataset.

    Equals the single-example formula applied to the concatenated marked
    positions; examples with an all-zero mask contribute nothing.
    """
    levels = tuple(levels)
    if not levels:
        return {}
    hits = {level: 0 for level in levels}
    marked_total = 0
    scored = saliency_scores(params, config, examples, levels, chunk)
    for ex, grads in zip(examples, scored):
        mask = np.array(ex.rationale[: config.max_len], dtype=np.float64)
        marked = int(mask.sum())
        if marked == 0:
            continue
        marked_total += marked
        for level in levels:
            hits[level] += int(((mask > 0) & (grads[level] > 0)).sum())
    if marked_total == 0:
        return {level: None for level in levels}
    return {level: 100.0 * hits[level] / marked_total for level in levels}


def evaluate_model(params, config, dataset, levels=LEVELS, chunk=128) -> MetricsReport:
    """Classification metrics plus per-level alignment accuracy."""
    _, predicted = predict_batch(params, config, dataset.examples, chunk)
    report = classification_metrics(predicted.tolist(), [ex.label for ex in dataset.examples])
    report.s_acc = dataset_saliency_accuracy(params, config, dataset.examples, levels, chunk)
    return report


def mcnemar_one_sided(b, c):
    """Exact one-sided McNemar p-value from discordant counts.

    b counts items only model A got right, c items only model B got right;
    the p-value is the upper binomial(b+c, 1/2) tail at c, testing whether
    B beats A. Computed with exact integer arithmetic.
    """
    b, c = int(b), int(c)
    if b < 0 or c < 0 or b + c < 1:
        raise ValueError("need nonnegative counts with b + c >= 1")
    n = b + c
    tail = sum(math.comb(n, k) for k in range(c, n + 1))
    return tail / (1 << n)


@dataclass
class VerificationReport:
    tpr_before: float
    tpr_after: float
    delta_pct: float | None
    undefined: bool = False


def delta_tpr(tpr_before, tpr_after):
    """Relative drop 100 * (tpr0 - tpr1) / tpr0, in percent of tpr0."""
    if tpr_before <= 0:
        raise ValueError("delta undefined for tpr0 == 0")
    return 100.0 * (tpr_before - tpr_after) / tpr_before


def verify_tpr_drop(params, config, positives, mask_with_unknown=False) -> VerificationReport:
    """True-positive rate before and after deleting every marked token.

    positives must be labelled 1 with at least one marked token each. When
    the before-rate is zero the relative drop is undefined and flagged.
    """
    from .data import remove_marked

    if not positives:
        raise ValueError("need at least one positive example")
    for ex in positives:
        if ex.label != 1 or ex.marked_count < 1:
            raise ValueError("verification needs marked positive examples")
    _, before = predict_batch(params, config, positives)
    stripped = [remove_marked(ex, mask_with_unknown) for ex in positives]
    _, after = predict_batch(params, config, stripped)
    tpr0 = 100.0 * float(np.mean(before == 1))
    tpr1 = 100.0 * float(np.mean(after == 1))
    if tpr0 == 0.0:
        return VerificationReport(tpr_before=0.0, tpr_after=tpr1, delta_pct=None, undefined=True)
    return VerificationReport(
        tpr_before=tpr0, tpr_after=tpr1, delta_pct=delta_tpr(tpr0, tpr1), undefined=False
    )


@dataclass
class SaliencyReport:
    """Word-level (and optionally deeper) gradients for one example."""

    tokens: list
    grads: dict
    top_indices: list


def _rank_by_magnitude(values):
    order = sorted(range(len(values)), key=lambda i: (-abs(values[i]), i))
    return [i for i in order if abs(values[i]) > 0]


def saliency_report(params, config, example, vocab, levels=LEVELS, k=6) -> SaliencyReport:
    """Per-token gradients of one example with dropout disabled."""
    trace = encode(example, params, config)
    targets = [trace.level_tensor(level) for level in levels]
    grads = grad(ops.sum_all(trace.logit), targets)
    n = min(len(example.tokens), config.max_len)
    per_level = {}
    for level in levels:
        g = grads[trace.level_tensor(level)].values
        per_level[level] = (g.sum(axis=-1) if g.ndim == 2 else g)[:n].copy()
    word = per_level.get("word", next(iter(per_level.values())))
    tokens = [vocab.token_for(t) for t in example.tokens[:n]]
    return SaliencyReport(
        tokens=tokens, grads=per_level, top_indices=_rank_by_magnitude(word)[:k]
    )


def top_k_salient(report: SaliencyReport, k=6):
    """(index, token, weight) for the k most salient word-level tokens.

    Ranked by descending |G| with ties broken toward lower indices; weights
    are |G| normalized by the selection's maximum, so they lie in (0, 1].
    Tokens with exactly zero gradient are never selected.
    """
    if k < 1:
        raise ValueError("k must be positive")
    word = report.grads.get("word")
    if word is None:
        raise ValueError("word-level gradients required")
    picked = _rank_by_magnitude(word)[:k]
    if not picked:
        return []
    peak = max(abs(word[i]) for i in picked)
    return [(i, report.tokens[i], abs(word[i]) / peak) for i in picked]


def _fmt(value):
    return "nan" if value is None else f"{value:.1f}"


def serialize_metrics(report: MetricsReport) -> str:
    """Single-record key = value text; percentages carry one decimal."""
    lines = [
        f"tp = {report.tp}",
        f"fp = {report.fp}",
        f"tn = {report.tn}",
        f"fn = {report.fn}",
        f"precision = {_fmt(report.precision)}",
        f"recall = {_fmt(report.recall)}",
        f"f1 = {_fmt(report.f1)}",
        f"accuracy = {_fmt(report.accuracy)}",
        f"f1_undefined = {int(report.f1_undefined)}",
    ]
    for level in LEVELS:
        if level in report.s_acc:
            lines.append(f"s_acc_{level} = {_fmt(report.s_acc[level])}")
    return "\n".join(lines) + "\n"


def serialize_verification(report: VerificationReport) -> str:
    return (
        f"tpr_before = {_fmt(report.tpr_before)}\n"
        f"tpr_after = {_fmt(report.tpr_after)}\n"
        f"delta_tpr = {_fmt(report.delta_pct)}\n"
        f"delta_undefined = {int(report.undefined)}\n"
    )

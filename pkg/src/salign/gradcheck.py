"""Finite-difference oracles for analytic gradients.

A differentiable model is locally linear, so central differences of the
scalar output approximate the analytic gradient to O(eps^2); these checks
compare the two over every coordinate.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor, grad


def finite_diff_check(f, x, eps=1e-4):
    """Max relative error between analytic gradient of f and central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. The error
    at each coordinate is |analytic - cd| / max(1, |cd|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = f(x)
    if y.shape not in ((), (1,)):
        raise ValueError("finite_diff_check: f must return a scalar")
    analytic = grad(y, [x])[x].values.reshape(-1)

    flat = x.values.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        cd = (up - down) / (2.0 * eps)
        err = abs(analytic[i] - cd) / max(1.0, abs(cd))
        if err > worst:
            worst = err
    return worst


def finite_diff_check_many(f, tensors, eps=1e-4):
    """Check the gradient of f() with respect to several leaf tensors.

    f takes no arguments and rebuilds its graph from the tensors' current
    values on every call. Returns (max error, {name: error}).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = f()
    if y.shape not in ((), (1,)):
        raise ValueError("finite_diff_check_many: f must return a scalar")
    named = dict(tensors)
    grads = grad(y, list(named.values()))

    per_tensor = {}
    for name, t in named.items():
        analytic = grads[t].values.reshape(-1)
        flat = t.values.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            cd = (up - down) / (2.0 * eps)
            err = abs(analytic[i] - cd) / max(1.0, abs(cd))
            if err > worst:
                worst = err
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor


def resample_until_smooth(draw, margin_of, min_margin=1e-3, tries=100):
    """Redraw random inputs until they sit away from routing kinks.

    draw(attempt) produces a candidate, margin_of(candidate) its distance to
    the nearest relu/max tie point.
    """
    for attempt in range(tries):
        candidate = draw(attempt)
        if margin_of(candidate) > min_margin:
            return candidate
    raise RuntimeError("could not find a kink-free sample")


def relu_margin(values):
    """Distance of any preactivation to the relu kink."""
    return float(np.min(np.abs(values)))


def pool_margin(values, axis):
    """Smallest gap between the top two entries of each pooled group."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[axis] < 2:
        return np.inf
    ordered = np.sort(v, axis=axis)
    top = np.take(ordered, -1, axis=axis)
    second = np.take(ordered, -2, axis=axis)
    return float(np.min(top - second))


def _pool_margin_unique(values, axis):
    """Top-2 gap per pooled group, ignoring bit-identical duplicates.

    Duplicated padding rows are the same computation and move together under
    any parameter perturbation, so an exact tie between them is not a kink.
    """
    v = np.asarray(values, dtype=np.float64)
    moved = np.moveaxis(v, axis, -1)
    worst = np.inf
    for group in moved.reshape(-1, moved.shape[-1]):
        distinct = np.unique(group)
        if distinct.size >= 2:
            worst = min(worst, float(distinct[-1] - distinct[-2]))
    return worst


def _conv_values(x, kernel, bias):
    w = kernel.shape[0]
    half = w // 2
    out = np.tile(bias, (x.shape[0], 1))
    for t in range(w):
        s = half - t
        shifted = np.zeros_like(x)
        if s == 0:
            shifted[...] = x
        elif s > 0:
            shifted[s:] = x[:-s]
        else:
            shifted[:s] = x[-s:]
        out += shifted @ kernel[t]
    return out


def _tower_margins(x, params):
    """Kink margins of one conv stack: relu distances, live max-gap, outputs."""
    margins = []
    activations = []
    for w in sorted(params.kernels):
        kernel, bias = params.kernels[w]
        pre = _conv_values(x, kernel.values, bias.values)
        margins.append(relu_margin(pre))
        activations.append(np.maximum(pre, 0.0))
    combined = activations[0]
    for other in activations[1:]:
        both_live = (combined > 0) & (other > 0)
        if both_live.any():
            margins.append(float(np.min(np.abs(combined[both_live] - other[both_live]))))
        combined = np.maximum(combined, other)
    return min(margins), combined


def model_kink_margin(params, config, example, saliency_cfg=None):
    """Distance of one example's forward (and hinge inputs) to the nearest
    relu / elementwise-max / max-pool / hinge kink under the current
    parameters. Used to resample gradient-check inputs per the smoothness
    rule."""
    from .loss import padded_mask, token_saliency
    from .model import encode, pad_ids

    emb = params.embedding.values
    x = emb[pad_ids(example.tokens, config.max_len)]
    margin, intermediate = _tower_margins(x, params)
    if config.mode == "qa":
        q_x = emb[np.asarray(example.query, dtype=np.int64)]
        q_margin, q_inter = _tower_margins(q_x, params)
        margin = min(margin, q_margin, _pool_margin_unique(q_inter, 0))
        intermediate = intermediate * np.max(q_inter, axis=0)
    margin = min(
        margin,
        _pool_margin_unique(intermediate, 0),
        _pool_margin_unique(intermediate, 1),
    )
    if saliency_cfg is not None and saliency_cfg.enabled:
        trace = encode(example, params, config)
        mask = padded_mask(example, config.max_len)
        for level in saliency_cfg.levels:
            g = token_saliency(trace.level_tensor(level), trace.logit).values
            marked = g[mask > 0]
            if marked.size:
                margin = min(margin, float(np.min(np.abs(marked))))
    return margin


def select_smooth_positives(params, config, examples, saliency_cfg, count, min_margin=1e-3):
    """First `count` positive examples whose forward sits clear of kinks."""
    chosen = []
    for ex in examples:
        if ex.label != 1 or ex.marked_count < 1:
            continue
        if model_kink_margin(params, config, ex, saliency_cfg) > min_margin:
            chosen.append(ex)
            if len(chosen) == count:
                return chosen
    raise RuntimeError(f"found only {len(chosen)} kink-free positives")


def model_cost_gradcheck(
    embed_dim=8,
    max_len=6,
    examples=5,
    eps=1e-4,
    seed=0,
    strength=0.5,
    levels=None,
    vocab_size=12,
    min_margin=1e-3,
):
    """Check the full multi-level training cost against central differences.

    Builds a small seeded model, draws random positive examples clear of
    routing kinks, and compares the analytic parameter gradient of the cost
    (task loss plus hinge penalties, built through create_graph) with
    central finite differences. Returns (max error, per-example errors).
    """
    from .data import SynthConfig, gen_synthetic
    from .loss import SaliencyConfig, total_cost
    from .model import LEVELS, ModelConfig, ModelParams, encode

    config = ModelConfig(vocab_size=vocab_size, embed_dim=embed_dim, max_len=max_len)
    params = ModelParams(config, seed=seed)
    saliency_cfg = SaliencyConfig(strength=strength, levels=tuple(levels or LEVELS))
    corpus = gen_synthetic(
        SynthConfig(
            count=200,
            vocab_size=vocab_size,
            trigger_count=2,
            min_len=max(1, max_len // 2),
            max_len=max_len,
            seed=seed + 1,
        )
    )
    chosen = select_smooth_positives(
        params, config, corpus.examples, saliency_cfg, examples, min_margin
    )
    errors = []
    for ex in chosen:

        def cost():
            return total_cost(encode(ex, params, config), ex, saliency_cfg)

        err, _ = finite_diff_check_many(cost, params.tensors(), eps=eps)
        errors.append(err)
    return max(errors), errors

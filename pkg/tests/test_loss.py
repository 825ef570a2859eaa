import math

import numpy as np
import pytest

from salign import Tensor, grad, ops
from salign.data import Example, SynthConfig, gen_synthetic
from salign.gradcheck import finite_diff_check_many, model_cost_gradcheck
from salign.loss import SaliencyConfig, hinge_penalty, padded_mask, task_loss, token_saliency, total_cost
from salign.model import ModelConfig, ModelParams, encode


def example(tokens, label=1, marked=()):
    z = [1 if i in marked else 0 for i in range(len(tokens))]
    if label == 0:
        z = [0] * len(tokens)
    return Example(tokens=list(tokens), query=None, label=label, rationale=z)


class TestTaskLoss:
    def test_logit_zero(self):
        assert task_loss(Tensor(0.0), 1).item() == pytest.approx(math.log(2.0), abs=1e-12)
        assert task_loss(Tensor(0.0), 0).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confident_correct(self):
        want = math.log1p(math.exp(-3.0))  # softplus(-3)
        assert task_loss(Tensor(3.0), 1).item() == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(0.04859, abs=1e-5)

    def test_stable_at_extremes(self):
        assert np.isfinite(task_loss(Tensor(500.0), 0).item())
        assert np.isfinite(task_loss(Tensor(-500.0), 1).item())
        assert task_loss(Tensor(500.0), 1).item() == pytest.approx(0.0, abs=1e-12)

    def test_vector_form(self):
        logits = Tensor([2.0, -2.0])
        losses = task_loss(logits, np.array([1, 0]))
        want = math.log1p(math.exp(-2.0))
        np.testing.assert_allclose(losses.values, [want, want], rtol=1e-12)


class TestTokenSaliency:
    def setup_method(self):
        self.config = ModelConfig(vocab_size=20, embed_dim=4, max_len=5)
        self.params = ModelParams(self.config, seed=0)

    def test_linear_map_gives_dimension_count(self):
        level = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        logit = ops.sum_all(level)
        G = token_saliency(level, logit)
        np.testing.assert_allclose(G.values, [4.0, 4.0, 4.0])

    def test_disconnected_level_gives_zeros(self):
        level = Tensor(np.ones((3, 4)))
        unrelated = Tensor(2.0)
        logit = ops.mul(unrelated, unrelated)
        G = token_saliency(level, logit)
        np.testing.assert_array_equal(G.values, np.zeros(3))

    def test_decision_level_passes_through(self):
        level = Tensor(np.random.default_rng(1).normal(size=(4,)))
        logit = ops.sum_all(ops.mul(level, level))
        G = token_saliency(level, logit)
        np.testing.assert_allclose(G.values, 2 * level.values, rtol=1e-12)

    def test_matches_uniform_perturbation_differences(self):
        # G_i approximates d(logit)/d(eps) when all of row i moves by eps
        ex = example([4, 9, 12, 7], marked=(1,))
        trace = encode(ex, self.params, self.config)
        G = token_saliency(trace.embedded, trace.logit).values
        eps = 1e-5
        for i in range(3):
            bumped_params = ModelParams(self.config, seed=0)
            trace_for_ids = [4, 9, 12, 7, 0]
            up = down = None
            for sign in (+1, -1):
                bumped_params.embedding.values[...] = self.params.embedding.values
                row = trace_for_ids[i]
                bumped_params.embedding.values[row] += sign * eps
                val = encode(ex, bumped_params, self.config).logit.item()
                up, down = (val, down) if sign > 0 else (up, val)
            fd = (up - down) / (2 * eps)
            assert abs(G[i] - fd) / max(1.0, abs(fd)) < 1e-5


class TestHingePenalty:
    def test_all_zero_mask_costs_nothing(self):
        G = Tensor([-5.0, -1.0, 3.0])
        assert hinge_penalty(G, [0, 0, 0], 0.7).item() == 0.0

    def test_unmarked_tokens_ignored(self):
        got = hinge_penalty(Tensor([-2.0, -5.0]), [1, 0], 0.5).item()
        assert got == pytest.approx(1.0, abs=1e-15)

    def test_nonnegative_gradients_unpenalized_and_zero_boundary(self):
        got = hinge_penalty(Tensor([0.3, 0.0]), [1, 1], 2.0).item()
        assert got == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            hinge_penalty(Tensor([1.0, 2.0]), [1], 0.5)

    def test_gradient_flows_to_negative_marked_entries_only(self):
        G = Tensor([-2.0, -1.0, 0.5])
        pen = hinge_penalty(G, [1, 0, 1], 0.5)
        g = grad(pen, [G])[G]
        np.testing.assert_allclose(g.values, [-0.5, 0.0, 0.0])


class TestSaliencyConfig:
    def test_negative_strength_rejected(self):
        with pytest.raises(ValueError):
            SaliencyConfig(strength=-0.1)

    def test_unknown_level_rejected(self):
        with pytest.raises(ValueError):
            SaliencyConfig(strength=0.5, levels=("word", "attention"))

    def test_enabled_requires_levels(self):
        with pytest.raises(ValueError):
            SaliencyConfig(strength=0.5, levels=())
        assert not SaliencyConfig(strength=0.0).enabled
        assert SaliencyConfig(strength=0.5).enabled


class TestTotalCost:
    def setup_method(self):
        self.config = ModelConfig(vocab_size=20, embed_dim=4, max_len=6)
        self.params = ModelParams(self.config, seed=0)

    def test_negative_example_cost_is_task_loss_bitwise(self):
        ex = example([4, 8, 15], label=0)
        trace = encode(ex, self.params, self.config)
        cost = total_cost(trace, ex, SaliencyConfig(strength=0.5))
        loss = task_loss(trace.logit, 0)
        assert cost.item() == loss.item()

    def test_zero_strength_given_any_mask(self):
        ex = example([4, 8, 15], marked=(0, 2))
        trace = encode(ex, self.params, self.config)
        cost = total_cost(trace, ex, SaliencyConfig(strength=0.0))
        assert cost.item() == task_loss(trace.logit, 1).item()

    def test_all_zero_mask_identity_within_1e15(self):
        ex = Example(tokens=[4, 8, 15], query=None, label=1, rationale=[0, 0, 0])
        trace = encode(ex, self.params, self.config)
        cost = total_cost(trace, ex, SaliencyConfig(strength=0.9))
        assert abs(cost.item() - task_loss(trace.logit, 1).item()) < 1e-15

    def test_full_cost_gradient_matches_finite_differences(self):
        worst, _ = model_cost_gradcheck(embed_dim=8, max_len=6, examples=5, eps=1e-4, seed=0)
        assert worst < 1e-4

    def test_single_level_cost_matches_manual_formula(self):
        # strength * sum_i max(0, -Z_i * sum_j dlogit/dW_ij) added to the loss
        ex = example([4, 8, 15, 9], marked=(1, 3))
        trace = encode(ex, self.params, self.config)
        cfg = SaliencyConfig(strength=0.7, levels=("word",))
        cost = total_cost(trace, ex, cfg).item()
        G = token_saliency(trace.embedded, trace.logit).values
        mask = padded_mask(ex, self.config.max_len)
        manual = task_loss(trace.logit, 1).item() + 0.7 * np.sum(
            np.maximum(0.0, -mask * G)
        )
        assert cost == pytest.approx(manual, rel=1e-12)

    def test_monotone_in_marked_gradient(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            G = rng.normal(size=6)
            Z = (rng.random(6) < 0.5).astype(int)
            if not Z.any():
                Z[0] = 1
            base = hinge_penalty(Tensor(G), Z, 0.5).item()
            i = int(np.flatnonzero(Z)[0])
            G2 = G.copy()
            G2[i] -= abs(rng.normal())
            worse = hinge_penalty(Tensor(G2), Z, 0.5).item()
            assert worse >= base

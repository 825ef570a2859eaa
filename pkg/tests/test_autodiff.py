import numpy as np
import pytest

from salign import Tensor, Graph, GradRequest, backward, grad, no_grad, finite_diff_check
from salign import ops
from salign.gradcheck import pool_margin, relu_margin, resample_until_smooth


def conv1d_loop_oracle(x, kernel, bias):
    """Direct nested-loop convolution with zero padding, independent of ops."""
    n, d_in = x.shape
    w, _, d_out = kernel.shape
    half = w // 2
    out = np.zeros((n, d_out))
    for i in range(n):
        for o in range(d_out):
            acc = bias[o]
            for t in range(w):
                j = i + t - half
                if 0 <= j < n:
                    for c in range(d_in):
                        acc += x[j, c] * kernel[t, c, o]
            out[i, o] = acc
    return out


class TestBackwardContract:
    def test_square_gradient(self):
        x = Tensor(3.0)
        assert grad(ops.mul(x, x), [x])[x].values == 6.0

    def test_second_derivative_of_cube(self):
        x = Tensor(2.0)
        y = ops.mul(ops.mul(x, x), x)
        g1 = grad(y, [x], create_graph=True)[x]
        g2 = grad(ops.sum_all(g1), [x])[x]
        assert g2.values == pytest.approx(12.0)  # 6x at x=2

    def test_affine_relu_sum_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        W = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(rng.normal(size=(3,)))

        def f(xt):
            return ops.sum_all(ops.relu(ops.add_vec_last(ops.matmul2d(xt, W), b)))

        x = Tensor(rng.normal(size=(3, 4)))
        assert finite_diff_check(f, x, eps=1e-4) < 1e-5

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(GradRequest(root=x, targets=[x]))

    def test_disconnected_target_gets_zeros(self):
        x = Tensor([1.0, 2.0])
        other = Tensor([5.0, 5.0, 5.0])
        g = grad(ops.sum_all(ops.mul(x, x)), [other])[other]
        assert g.shape == (3,)
        assert np.all(g.values == 0.0)

    def test_detached_tensor_yields_zero_gradient(self):
        x = Tensor([1.0, -2.0])
        y = ops.mul(x, x)
        xd = y.detach()
        z = ops.sum_all(y)
        assert np.all(grad(z, [xd])[xd].values == 0.0)

    def test_create_graph_flag_controls_graph_linkage(self):
        x = Tensor([1.0, 2.0])
        y = ops.sum_all(ops.mul(x, x))
        assert grad(y, [x], create_graph=True)[x].vjp is not None
        y = ops.sum_all(ops.mul(x, x))
        assert grad(y, [x], create_graph=False)[x].vjp is None

    def test_fanout_accumulates_by_summation(self):
        x = Tensor(2.0)
        y = ops.add(ops.mul(x, x), ops.mul(x, Tensor(3.0)))  # x^2 + 3x
        assert grad(y, [x])[x].values == pytest.approx(7.0)

    def test_root_as_its_own_target(self):
        x = Tensor(4.0)
        assert grad(x, [x])[x].values == 1.0


class TestElementwise:
    def test_relu_values(self):
        r = ops.relu(Tensor([-1.0, 2.0]))
        assert list(r.values) == [0.0, 2.0]

    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(Tensor(0.0)).values == pytest.approx(0.5)

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor([0.0])
        y = ops.sum_all(ops.sigmoid(x))
        assert grad(y, [x])[x].values[0] == pytest.approx(0.25)

    def test_scalar_broadcast_add_and_mul(self):
        x = Tensor([1.0, 2.0])
        assert list(ops.add(x, Tensor(1.0)).values) == [2.0, 3.0]
        assert list(ops.mul(x, Tensor(2.0)).values) == [2.0, 4.0]
        g = grad(ops.sum_all(ops.mul(x, Tensor(2.0))), [x])[x]
        assert list(g.values) == [2.0, 2.0]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
        with pytest.raises(ValueError):
            ops.mul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_concat_requires_matching_leading_shape(self):
        with pytest.raises(ValueError):
            ops.concat_last(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))

    def test_elementwise_dispatcher(self):
        assert ops.elementwise("relu", Tensor([-3.0])).values[0] == 0.0
        assert ops.elementwise("sum-all", Tensor([1.0, 2.0])).values == 3.0
        assert ops.elementwise("scale", Tensor([2.0]), 0.5).values[0] == 1.0
        got = ops.elementwise("concat-last-axis", Tensor([1.0]), Tensor([2.0]))
        assert list(got.values) == [1.0, 2.0]
        with pytest.raises(ValueError):
            ops.elementwise("nope", Tensor([1.0]))

    def test_softplus_gradient_is_sigmoid(self):
        x = Tensor([0.7, -1.3])
        g = grad(ops.sum_all(ops.softplus(x)), [x])[x]
        s = 1.0 / (1.0 + np.exp(-x.values))
        np.testing.assert_allclose(g.values, s, rtol=1e-12)


class TestConv1dSame:
    def test_zero_kernel_gives_bias(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3)))
        kernel = Tensor(np.zeros((3, 3, 3)))
        bias = Tensor([1.0, -2.0, 0.5])
        out = ops.conv1d_same(x, kernel, bias)
        np.testing.assert_array_equal(out.values, np.tile(bias.values, (1, 1)))

    def test_identity_center_kernel(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(6, 4)))
        kernel = np.zeros((3, 4, 4))
        kernel[1] = np.eye(4)
        out = ops.conv1d_same(x, Tensor(kernel), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.values, x.values, atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 2))
        kernel = rng.normal(size=(3, 2, 2))
        bias = rng.normal(size=(2,))
        got = ops.conv1d_same(Tensor(x), Tensor(kernel), Tensor(bias))
        np.testing.assert_allclose(got.values, conv1d_loop_oracle(x, kernel, bias), atol=1e-12)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            ops.conv1d_same(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2, 2))), Tensor(np.zeros(2)))

    def test_batched_matches_per_example(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(5, 6, 3))
        kernel = Tensor(rng.normal(size=(5, 3, 3)))
        bias = Tensor(rng.normal(size=(3,)))
        batched = ops.conv1d_same(Tensor(xs), kernel, bias).values
        for b in range(5):
            single = ops.conv1d_same(Tensor(xs[b]), kernel, bias).values
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        kernel = Tensor(rng.normal(size=(3, 2, 2)))
        bias = Tensor(rng.normal(size=(2,)))

        def f(xt):
            return ops.sum_all(ops.conv1d_same(xt, kernel, bias))

        x = Tensor(rng.normal(size=(5, 2)))
        assert finite_diff_check(f, x, eps=1e-4) < 1e-5


class TestMaxPool:
    def test_direct_max_over_rows(self):
        pooled = ops.maxpool_axis(Tensor([[1.0, 5.0], [3.0, 2.0]]), axis=0)
        assert list(pooled.values) == [3.0, 5.0]

    def test_tie_routes_to_lowest_index(self):
        x = Tensor([[2.0, 2.0]])
        pooled = ops.maxpool_axis(x, axis=1)
        assert pooled.values[0] == 2.0
        g = grad(ops.sum_all(pooled), [x])[x]
        np.testing.assert_array_equal(g.values, [[1.0, 0.0]])

    def test_gradient_matches_finite_differences_away_from_ties(self):
        rng = np.random.default_rng(5)

        def draw(attempt):
            return rng.normal(size=(6, 8))

        vals = resample_until_smooth(draw, lambda v: pool_margin(v, axis=0))

        def f(xt):
            return ops.sum_all(ops.maxpool_axis(xt, axis=0))

        assert finite_diff_check(f, Tensor(vals), eps=1e-4) < 1e-5

    def test_gradient_mass_conserved_per_group(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(7, 4)))
        upstream = rng.normal(size=(4,))
        pooled = ops.maxpool_axis(x, axis=0)
        y = ops.sum_all(ops.mul(pooled, Tensor(upstream)))
        g = grad(y, [x])[x]
        np.testing.assert_allclose(g.values.sum(axis=0), upstream, atol=1e-12)

    def test_bad_axis_rejected(self):
        with pytest.raises(ValueError):
            ops.maxpool_axis(Tensor(np.zeros((2, 2))), axis=5)


class TestSecondOrder:
    def test_grad_of_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        W = Tensor(rng.normal(size=(3, 3)))

        def first_grad(xt):
            y = ops.sum_all(ops.relu(ops.matmul2d(xt, W)))
            return grad(y, [xt], create_graph=True)[xt]

        def g_fn(xt):
            return ops.sum_all(first_grad(xt))

        x = Tensor(rng.normal(size=(2, 3)) + 0.5)
        # analytic gradient of g via the engine
        analytic = grad(g_fn(x), [x])[x].values
        # finite differences of the *first* gradient
        eps = 1e-4
        fd = np.zeros_like(x.values)
        flat = x.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = first_grad(x).values.sum()
            flat[i] = orig - eps
            down = first_grad(x).values.sum()
            flat[i] = orig
            fd.reshape(-1)[i] = (up - down) / (2 * eps)
        assert np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))) < 1e-4

    def test_second_order_through_maxpool_is_frozen(self):
        # the pooled routing is constant, so the second derivative is zero
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(4, 3)))
        y = ops.sum_all(ops.mul(ops.maxpool_axis(x, axis=0), ops.maxpool_axis(x, axis=0)))
        g1 = grad(y, [x], create_graph=True)[x]
        g2 = grad(ops.sum_all(ops.mul(g1, g1)), [x], create_graph=True)[x]
        assert g2.shape == x.shape  # differentiating twice stays well-formed


class TestFiniteDiffCheck:
    def test_linear_function_is_exact(self):
        # at the origin both perturbed sums are exact, so the error is 0
        assert finite_diff_check(lambda t: ops.sum_all(t), Tensor(np.zeros(4))) == 0.0
        # elsewhere only rounding noise of the sums remains
        assert finite_diff_check(lambda t: ops.sum_all(t), Tensor(np.arange(4.0))) < 1e-10

    def test_quadratic(self):
        x = Tensor([1.0, 2.0])
        y = ops.sum_all(ops.mul(x, x))
        analytic = grad(y, [x])[x].values
        np.testing.assert_allclose(analytic, [2.0, 4.0])
        assert finite_diff_check(lambda t: ops.sum_all(ops.mul(t, t)), x) < 1e-7

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: ops.sum_all(t), Tensor([1.0]), eps=0.0)


class TestGraphTape:
    def test_tape_topological_and_replayable(self):
        rng = np.random.default_rng(9)
        with Graph() as tape:
            x = Tensor(rng.normal(size=(3, 2)))
            k = Tensor(rng.normal(size=(3, 2, 2)))
            b = Tensor(rng.normal(size=(2,)))
            out = ops.sum_all(ops.relu(ops.conv1d_same(x, k, b)))
        assert out.values.shape == ()
        assert tape.tape_is_topological()
        assert tape.replay()

    def test_replay_detects_divergence(self):
        with Graph() as tape:
            x = Tensor([1.0, 2.0])
            y = ops.mul(x, x)
        y.values[0] = 99.0  # corrupt a recorded value
        assert not tape.replay()

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(10)
        vals = rng.normal(size=(4, 4))
        k = rng.normal(size=(3, 4, 4))
        b = rng.normal(size=(4,))
        one = ops.sum_all(ops.relu(ops.conv1d_same(Tensor(vals), Tensor(k), Tensor(b))))
        two = ops.sum_all(ops.relu(ops.conv1d_same(Tensor(vals), Tensor(k), Tensor(b))))
        assert one.values.tobytes() == two.values.tobytes()


class TestNoGrad:
    def test_no_grad_produces_leaves(self):
        x = Tensor([1.0])
        with no_grad():
            y = ops.mul(x, x)
        assert y.is_leaf
        assert np.all(grad(ops.sum_all(ops.mul(x, x)), [x])[x].values == 2.0)


class TestRandomOpGradients:
    """Every registered op vs finite differences on smooth random input."""

    @pytest.mark.parametrize("seed", range(4))
    def test_composite_pipeline(self, seed):
        rng = np.random.default_rng(100 + seed)

        def draw(attempt):
            return {
                "x": rng.normal(size=(5, 3)),
                "k": rng.normal(size=(3, 3, 3)),
                "b": rng.normal(size=(3,)),
                "w": rng.normal(size=(3 + 5,)),
            }

        def margin(c):
            conv = conv1d_loop_oracle(c["x"], c["k"], c["b"])
            return min(relu_margin(conv), pool_margin(np.maximum(conv, 0), 0), pool_margin(np.maximum(conv, 0), 1))

        c = resample_until_smooth(draw, margin)
        k, b, w = Tensor(c["k"]), Tensor(c["b"]), Tensor(c["w"])

        def f(xt):
            hidden = ops.relu(ops.conv1d_same(xt, k, b))
            seq = ops.maxpool_axis(hidden, axis=0)
            dim = ops.maxpool_axis(hidden, axis=1)
            h = ops.concat_last(seq, dim)
            return ops.sum_all(ops.mul(h, w))

        assert finite_diff_check(f, Tensor(c["x"]), eps=1e-4) < 1e-5

    @pytest.mark.parametrize(
        "name",
        ["gather", "mul_rows", "shift", "slices", "sigmoid_chain"],
    )
    def test_individual_ops(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        if name == "gather":
            ids = np.array([[0, 2], [1, 1]])

            def f(t):
                return ops.sum_all(ops.mul(ops.gather_rows(t, ids), ops.gather_rows(t, ids)))

            x = Tensor(rng.normal(size=(4, 3)))
        elif name == "mul_rows":
            v = Tensor(rng.normal(size=(3,)))

            def f(t):
                return ops.sum_all(ops.mul_rows(ops.mul(t, t), v))

            x = Tensor(rng.normal(size=(5, 3)))
        elif name == "shift":

            def f(t):
                return ops.sum_all(ops.mul(ops.shift_rows(t, 2), ops.shift_rows(t, -1)))

            x = Tensor(rng.normal(size=(6, 2)))
        elif name == "slices":

            def f(t):
                a = ops.slice_last(t, 0, 2)
                bpart = ops.pad_last(a, 1, 4)
                return ops.sum_all(ops.mul(bpart, bpart))

            x = Tensor(rng.normal(size=(3, 4)))
        else:

            def f(t):
                return ops.sum_all(ops.sigmoid(ops.mul(t, t)))

            x = Tensor(rng.normal(size=(4,)))
        assert finite_diff_check(f, x, eps=1e-4) < 1e-5

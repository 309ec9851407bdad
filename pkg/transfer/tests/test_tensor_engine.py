import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from transfer.exceptions import ConfigError, DimensionError, NonFiniteError
from transfer.services import tensor_engine as te
from transfer.services.tensor_engine import AdamState, Tensor

from .utils import gradient_errors

TOL = 1e-4
BN_TOL = 1e-3


def _bn_train(x, gamma, beta):
    c = x.shape[1]
    return te.batch_norm(x, gamma, beta, np.zeros(c), np.ones(c), training=True)


def _bn_eval(x, gamma, beta):
    c = x.shape[1]
    return te.batch_norm(x, gamma, beta, np.full(c, 0.3), np.full(c, 1.7), training=False)


class GradientCheckTests(SimpleTestCase):
    """Central differences against backward() for every differentiable op."""

    def assertGradients(self, op, arrays, tol=TOL, seed=0):
        for err in gradient_errors(op, arrays, seed):
            self.assertLess(err, tol)

    def test_elementwise_and_reductions(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        self.assertGradients(lambda x, y: x + y, [a, b])
        self.assertGradients(lambda x, y: x - y, [a, b])
        self.assertGradients(lambda x, y: x * y, [a, b])
        self.assertGradients(lambda x, y: x / y, [a, np.abs(b) + 0.5])
        self.assertGradients(lambda x: -x, [a])
        self.assertGradients(lambda x: x.sum(axis=0), [a])
        self.assertGradients(lambda x: x.mean(axis=1, keepdims=True), [a])
        self.assertGradients(lambda x: x.reshape(4, 3), [a])
        self.assertGradients(lambda x: x.log(), [np.abs(a) + 0.5])

    def test_broadcasting(self):
        rng = np.random.default_rng(2)
        self.assertGradients(lambda x, y: x * y + y, [rng.normal(size=(5, 3)), rng.normal(size=(3,))])

    def test_indexing_and_joins(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        self.assertGradients(lambda x: x[1:3], [a])
        self.assertGradients(lambda x, y: te.concat([x, y]) * 2.0, [a, b])
        self.assertGradients(lambda x: te.split_rows(x, 1)[1], [a])

    def test_clip_away_from_bounds(self):
        a = np.array([[-2.0, -0.3, 0.2, 0.7, 3.0]])
        self.assertGradients(lambda x: x.clip(-1.0, 1.0), [a])

    def test_matmul(self):
        rng = np.random.default_rng(4)
        self.assertGradients(lambda x, w: x @ w, [rng.normal(size=(5, 3)), rng.normal(size=(3, 2))])

    def test_activations(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(4, 6))
        a[np.abs(a) < 1e-3] = 0.5
        self.assertGradients(lambda x: te.leaky_relu(x, 0.2), [a])
        self.assertGradients(te.relu, [a])
        self.assertGradients(te.sigmoid, [a])

    def test_mse_per_sample(self):
        rng = np.random.default_rng(6)
        self.assertGradients(te.mse_per_sample, [rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))])

    def test_batch_norm(self):
        rng = np.random.default_rng(7)
        for shape in [(6, 3), (4, 2, 3, 3)]:
            arrays = [rng.normal(size=shape), rng.normal(size=shape[1]) + 1.0, rng.normal(size=shape[1])]
            self.assertGradients(_bn_train, arrays, BN_TOL)
            self.assertGradients(_bn_eval, arrays, BN_TOL)

    def test_dropout_with_fixed_mask(self):
        a = np.random.default_rng(8).normal(size=(5, 4))
        self.assertGradients(lambda x: te.dropout(x, 0.5, True, te.make_rng(0, "mask")), [a])

    def test_conv_and_deconv(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 2, 7, 7))
        k = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        self.assertGradients(lambda a, w, b: te.conv2d(a, w, 2, 1, b), [x, k, bias])
        y = rng.normal(size=(2, 3, 4, 4))
        kd = rng.normal(size=(3, 2, 3, 3))
        self.assertGradients(lambda a, w, b: te.deconv2d(a, w, 2, 1, 1, b), [y, kd, rng.normal(size=2)])
        self.assertGradients(lambda a, w: te.deconv2d(a, w, 3, 1, 0), [rng.normal(size=(1, 3, 3, 3)), kd])

    def test_randomized_shapes(self):
        rng = np.random.default_rng(10)
        for trial in range(50):
            n = int(rng.integers(3, 6))
            d, m = (int(v) for v in rng.integers(2, 5, size=2))
            x, w = rng.normal(size=(n, d)), rng.normal(size=(d, m))
            gamma, beta = rng.normal(size=m) + 1.0, rng.normal(size=m)

            def op(a, b, g, bb):
                h = _bn_train(a @ b, g, bb)
                return te.sigmoid(te.leaky_relu(h, 0.2))

            self.assertGradients(op, [x, w, gamma, beta], BN_TOL, seed=trial)
            self.assertGradients(te.mse_per_sample, [rng.normal(size=(n, d)), rng.normal(size=(n, d))], seed=trial)
            p = float(rng.uniform(0.1, 0.7))
            self.assertGradients(lambda a: te.dropout(a, p, True, te.make_rng(trial, "mask")), [x], seed=trial)

            size = int(rng.integers(4, 8))
            k, s = 3, int(rng.integers(1, 4))
            c_in, c_out = (int(v) for v in rng.integers(1, 3, size=2))
            y = rng.normal(size=(2, c_in, size // 2, size // 2))
            kd = rng.normal(size=(c_in, c_out, k, k))
            pad = min(1, s - 1)
            self.assertGradients(lambda a, b: te.deconv2d(a, b, s, 1, pad), [y, kd], seed=trial)
            if te.conv_extent(size, k, s, 1) < 1:
                continue
            img = rng.normal(size=(2, c_in, size, size))
            kernel = rng.normal(size=(c_out, c_in, k, k))
            self.assertGradients(lambda a, b: te.conv2d(a, b, s, 1), [img, kernel], seed=trial)


class ReverseGradientTests(SimpleTestCase):
    def test_forward_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = te.reverse_gradient(x, 0.7)
        np.testing.assert_array_equal(out.values, x.values)

    def test_backward_scales_by_negative_coefficient(self):
        upstream = np.random.default_rng(0).normal(size=(2, 3))
        for c in (0.0, 0.25, 1.0, 2.0):
            x = Tensor(np.ones((2, 3)), requires_grad=True)
            te.backward((te.reverse_gradient(x, c) * Tensor(upstream)).sum())
            np.testing.assert_allclose(x.grad, -c * upstream, rtol=0, atol=1e-15)

    def test_negative_coefficient_rejected(self):
        with self.assertRaises(ConfigError):
            te.reverse_gradient(Tensor([1.0]), -0.5)


class EngineTests(SimpleTestCase):
    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        te.backward((y + y * 2.0).sum())
        self.assertAlmostEqual(float(x.grad[0]), 18.0)

    def test_tape_is_newest_first(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ((x * 2.0) + x).sum()
        seqs = [t._seq for t in te.Tape.from_loss(loss).ops]
        self.assertEqual(seqs, sorted(seqs, reverse=True))
        self.assertIs(te.Tape.from_loss(loss).ops[0], loss)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with te.no_grad():
            y = x * 2.0
            self.assertFalse(te.grad_enabled())
        self.assertTrue(te.grad_enabled())
        self.assertFalse(y.requires_grad)
        with self.assertRaises(ValueError):
            te.backward(y.sum())

    def test_non_finite_forward_raises(self):
        with self.assertRaises(NonFiniteError) as ctx:
            Tensor([0.0, 1.0]).log()
        self.assertEqual(ctx.exception.op, "log")

    def test_backward_needs_scalar(self):
        with self.assertRaises(DimensionError):
            te.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            te.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with self.assertRaises(DimensionError):
            te.mse_per_sample(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
        with self.assertRaises(DimensionError):
            te.split_rows(Tensor(np.ones((2, 3))), 3)
        with self.assertRaises(DimensionError):
            te.deconv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 2, 1, output_padding=2)

    def test_leaky_relu_at_zero_takes_negative_branch(self):
        x = Tensor([0.0], requires_grad=True)
        te.backward(te.leaky_relu(x, 0.2).sum())
        self.assertEqual(float(x.grad[0]), 0.2)

    def test_conv_extents(self):
        self.assertEqual(te.conv_extent(28, 3, 2, 1), 14)
        self.assertEqual(te.conv_extent(14, 3, 2, 1), 7)
        self.assertEqual(te.conv_extent(7, 3, 3, 1), 3)
        self.assertEqual(te.deconv_extent(3, 3, 3, 1, 0), 7)

    def test_deconv_is_adjoint_of_conv(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 7, 7))
        kernel = rng.normal(size=(4, 3, 3, 3))
        cx = te.conv2d(Tensor(x), Tensor(kernel), 2, 1).values
        y = rng.normal(size=cx.shape)
        dy = te.deconv2d(Tensor(y), Tensor(kernel), 2, 1, 0).values
        self.assertAlmostEqual(float(np.sum(cx * y)), float(np.sum(x * dy)), places=10)

    def test_batch_norm_running_statistics(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
        mean, var = np.zeros(2), np.ones(2)
        te.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
        np.testing.assert_allclose(mean, [0.2, 0.4])
        # unbiased batch variance: 2 and 8
        np.testing.assert_allclose(var, [0.9 + 0.2, 0.9 + 0.8])
        with self.assertRaises(DimensionError):
            te.batch_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, True)

    def test_dropout_modes(self):
        x = Tensor(np.ones((4, 4)))
        self.assertIs(te.dropout(x, 0.5, training=False), x)
        with self.assertRaises(ConfigError):
            te.dropout(x, 1.0, training=True, rng=te.make_rng(0))
        kept = te.dropout(x, 0.5, True, te.make_rng(0, "d")).values
        self.assertTrue(set(np.unique(kept)) <= {0.0, 2.0})

    def test_adam_first_step_moves_by_learning_rate(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        te.backward((p * p).sum())
        te.adam_step([p], state)
        np.testing.assert_allclose(p.values, [0.9, -1.9], atol=1e-7)
        te.zero_grad([p])
        self.assertIsNone(p.grad)

    def test_adam_minimizes_square(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState.for_params([w], lr=0.01)
        steps = 0
        while abs(w.values[0]) >= 0.01 and steps < 2000:
            te.zero_grad([w])
            te.backward((w * w).sum())
            te.adam_step([w], state)
            steps += 1
        self.assertLess(abs(w.values[0]), 0.01)
        self.assertLessEqual(steps, 2000)

    def test_adam_zero_gradient_is_a_no_op(self):
        p = Tensor(np.array([0.5, -1.5]), requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        te.adam_step([p], state)
        np.testing.assert_array_equal(p.values, [0.5, -1.5])
        p.grad = np.zeros(2)
        te.adam_step([p], state)
        np.testing.assert_array_equal(p.values, [0.5, -1.5])

    def test_dropout_zero_fraction(self):
        x = Tensor(np.ones(100_000))
        for p in (0.2, 0.5):
            kept = te.dropout(x, p, True, te.make_rng(1, "fraction")).values
            self.assertAlmostEqual(float(np.mean(kept == 0.0)), p, delta=0.01)

    def test_sigmoid_extremes(self):
        s = te.sigmoid(Tensor(np.array([-500.0, 1.0, 500.0]))).values
        self.assertTrue(np.all(np.isfinite(s)))
        self.assertAlmostEqual(float(s[1]), 0.7310585786, places=10)
        self.assertEqual(float(s[2]), 1.0)
        self.assertGreaterEqual(float(s[0]), 0.0)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        loss = (x * x * 3.0).sum()
        te.backward(loss)
        once = x.grad.copy()
        te.backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * once)

    def test_unit_deconv_is_identity(self):
        y = np.random.default_rng(12).normal(size=(2, 3, 4, 5))
        kernel = np.eye(3).reshape(3, 3, 1, 1)
        out = te.deconv2d(Tensor(y), Tensor(kernel), 1, 0)
        np.testing.assert_array_equal(out.values, y)

    def test_float32_is_kept(self):
        x = Tensor(np.ones((2, 2)), dtype=np.float32)
        self.assertEqual((x * 2.0 + x).dtype, np.float32)
        with self.assertRaises(ConfigError):
            te.resolve_dtype("float16")

    def test_make_rng_is_keyed(self):
        a = te.make_rng(3, "train").random(5)
        np.testing.assert_array_equal(a, te.make_rng(3, "train").random(5))
        self.assertFalse(np.array_equal(a, te.make_rng(3, "init").random(5)))
        self.assertFalse(np.array_equal(a, te.make_rng(4, "train").random(5)))


class SigmoidPropertyTests(SimpleTestCase):
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=20))
    def test_symmetry(self, values):
        x = np.array(values)
        s = te.sigmoid(Tensor(x)).values
        np.testing.assert_allclose(te.sigmoid(Tensor(-x)).values, 1.0 - s, atol=1e-12)
        self.assertTrue(np.all((s >= 0) & (s <= 1)))

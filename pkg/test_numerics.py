import math
import threading
import unittest

import numpy as np
import numpy.testing as npt

import oracles
from numerics import (
    NonFiniteError, RngState, ShapeError, TapeError, Tensor, backward, checked, concat, cosine_similarity,
    cross_entropy, custom_op, exp, finite_difference_check, gelu, is_grad_enabled, layer_norm, log,
    log_softmax, matmul, no_grad, softmax, sqrt, stack, tanh, truncated_normal,
)
from optim import AdamW, clip_grad_norm, cosine_lr


def _leaf(gen, *shape, scale=1.0):
    return Tensor(gen.standard_normal(shape) * scale, requires_grad=True)


class TestForward(unittest.TestCase):
    def test_matmul(self):
        # Manually calculated
        # -------------------
        x = Tensor(np.array([[1., 2., 3.], [4., 5., 6.]]))
        w = Tensor(np.array([[1., 2., 3., 4.], [5., 6., 7., 8.], [9., 10., 11., 12.]]))
        npt.assert_array_equal(matmul(x, w).data, [[38, 44, 50, 56], [83, 98, 113, 128]])

        # Batched against explicit loops
        # ------------------------------
        gen = RngState(0).generator()
        for batch in [(1,), (2,), (2, 3)]:
            a = gen.standard_normal(batch + (3, 4))
            b = gen.standard_normal((4, 5))
            npt.assert_allclose(matmul(Tensor(a), Tensor(b)).data,
                                oracles.batched_matmul_loops(a, b[None]), atol=1e-12)

    def test_matmul_shape_errors(self):
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 1))))

    def test_softmax(self):
        out = softmax(Tensor(np.array([1.0, 2.0, 3.0])), axis=-1).data
        npt.assert_allclose(out, oracles.softmax_decimal([1.0, 2.0, 3.0]), atol=1e-15)

        big = softmax(Tensor(np.array([1000.0, 0.0])), axis=-1).data
        self.assertTrue(np.all(np.isfinite(big)))
        self.assertAlmostEqual(big[0], 1.0, places=12)

        gen = RngState(1).generator()
        rows = softmax(Tensor(gen.standard_normal((50, 9)) * 30), axis=-1).data
        npt.assert_allclose(rows.sum(axis=-1), np.ones(50), atol=1e-6)

        with self.assertRaises(ShapeError):
            softmax(Tensor(np.zeros((2, 0))), axis=-1)

    def test_log_softmax_matches_log_of_softmax(self):
        x = Tensor(RngState(2).generator().standard_normal((4, 6)))
        npt.assert_allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-12)

    def test_layer_norm(self):
        gen = RngState(3).generator()
        for width in [1, 2, 5, 16]:
            x, g, b = gen.standard_normal((3, width)), gen.standard_normal(width), gen.standard_normal(width)
            npt.assert_allclose(layer_norm(Tensor(x), Tensor(g), Tensor(b)).data,
                                oracles.layer_norm_direct(x, g, b), atol=1e-10)
        with self.assertRaises(ShapeError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.ones(3)))

    def test_cosine(self):
        got = cosine_similarity(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))).item()
        self.assertAlmostEqual(got, 11.0 / (math.sqrt(5.0) * 5.0), places=12)

        # zero vector: clamped denominator, no NaN
        self.assertEqual(cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3))).item(), 0.0)

        # broadcast [3,1,d] x [1,2,d] -> [3,2]
        gen = RngState(4).generator()
        a, b = gen.standard_normal((3, 5)), gen.standard_normal((2, 5))
        out = cosine_similarity(Tensor(a[:, None]), Tensor(b[None])).data
        expected = [[oracles.cosine_direct(ai, bj) for bj in b] for ai in a]
        npt.assert_allclose(out, expected, atol=1e-12)

    def test_gelu(self):
        x = np.linspace(-4, 4, 33)
        npt.assert_allclose(gelu(Tensor(x)).data, oracles.gelu_direct(x), atol=1e-15)
        self.assertEqual(gelu(Tensor(np.array([0.0]))).item(), 0.0)

    def test_cross_entropy(self):
        logits = np.array([[2.0, 1.0, 0.1], [0.5, 2.5, 0.3]])
        labels = np.array([0, 1])
        expected = -np.mean([math.log(oracles.softmax_decimal(row)[c]) for row, c in zip(logits, labels)])
        self.assertAlmostEqual(cross_entropy(Tensor(logits), labels).item(), expected, places=12)
        with self.assertRaises(ShapeError):
            cross_entropy(Tensor(logits), np.array([0, 1, 2]))

    def test_dtype_is_preserved(self):
        x = Tensor(np.ones((2, 3), dtype=np.float32))
        self.assertEqual(((x * 2.0 + 1.0) / 3.0).dtype, np.float32)
        self.assertEqual(Tensor(np.arange(3)).dtype, np.float32)
        self.assertEqual(Tensor(np.arange(3), dtype=np.float64).dtype, np.float64)


class TestBackward(unittest.TestCase):
    def test_gradients_match_finite_differences(self):
        gen = RngState(5).generator()
        x, y = _leaf(gen, 3, 4), _leaf(gen, 4, 2)
        g, b = Tensor(1.0 + gen.standard_normal(4) * 0.1, requires_grad=True), _leaf(gen, 4)
        pos = Tensor(gen.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        labels = np.array([1, 0, 1])

        cases = {
            'arith': (lambda: ((x * x - x / pos + 2.0) ** 2.0).sum(), {'x': x, 'pos': pos}),
            'exp_log_sqrt': (lambda: (exp(x * 0.3) + log(pos) + sqrt(pos)).mean(), {'x': x, 'pos': pos}),
            'tanh_gelu': (lambda: (tanh(x) * gelu(x)).sum(), {'x': x}),
            'matmul': (lambda: ((x @ y) ** 2.0).sum(), {'x': x, 'y': y}),
            'layer_norm': (lambda: (layer_norm(x, g, b) * pos).sum(), {'x': x, 'g': g, 'b': b}),
            'softmax': (lambda: (softmax(x, axis=0) * pos).sum(), {'x': x}),
            'cosine': (lambda: cosine_similarity(x.reshape(3, 1, 4), x[:2].reshape(1, 2, 4)).sum(), {'x': x}),
            'cross_entropy': (lambda: cross_entropy(x @ y, labels), {'x': x, 'y': y}),
            'shape_ops': (lambda: (concat([x, x.transpose()[:3]], axis=1).reshape(-1)[::2] ** 2.0).sum()
                          + stack([x, pos], axis=0).swapaxes(0, 2).sum(), {'x': x, 'pos': pos}),
        }
        for name, (f, params) in cases.items():
            report = finite_difference_check(f, params, step=1e-5, tol=1e-5, atol=1e-9)
            self.assertTrue(report.passed, f"{name}: {report.summary()}")

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = x * x
        backward((y + y).sum())
        npt.assert_array_equal(x.grad, [4.0, 8.0])

    def test_unreached_leaf_gets_zero_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        backward((x * 3.0).sum(), leaves=[x, unused])
        npt.assert_array_equal(x.grad, [3.0, 3.0])
        npt.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_non_scalar_and_detached_losses(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(TapeError):
            backward(x * 2.0)
        with self.assertRaises(TapeError):
            backward(Tensor(np.ones(3)).sum())

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            self.assertFalse(is_grad_enabled())
            y = (x * 2.0).sum()
        self.assertTrue(is_grad_enabled())
        self.assertFalse(y.requires_grad)

    def test_no_grad_is_thread_local(self):
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            worker.start()
            worker.join()
        self.assertEqual(seen, [True])

    def test_checked_mode_raises_on_non_finite(self):
        with checked():
            with self.assertRaises(NonFiniteError):
                log(Tensor(np.array([-1.0, 1.0])))
        with np.errstate(invalid='ignore'):
            self.assertTrue(np.isnan(log(Tensor(np.array([-1.0]))).item()))


class TestGradCheck(unittest.TestCase):
    def test_flags_wrong_gradient(self):
        x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)

        def wrong():
            return custom_op(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,), 'wrong_square').sum()

        def right():
            return custom_op(x.data ** 2, (x,), lambda g: (g * 2.0 * x.data,), 'square').sum()

        report = finite_difference_check(wrong, {'x': x})
        self.assertFalse(report.passed)
        self.assertEqual(report.flagged(), ['x'])
        self.assertTrue(finite_difference_check(right, {'x': x}).passed)

    def test_max_elements_limits_work(self):
        x = Tensor(RngState(6).generator().standard_normal(50), requires_grad=True)
        report = finite_difference_check(lambda: (x * x).sum(), {'x': x}, max_elements=7)
        self.assertEqual(report.entries[0].checked, 7)
        self.assertTrue(report.passed)
        self.assertIsNone(x.grad)

    def test_rejects_bad_step(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with self.assertRaises(ValueError):
            finite_difference_check(lambda: x.sum(), {'x': x}, step=0.0)


class TestRng(unittest.TestCase):
    def test_same_state_same_draws(self):
        a = RngState(7, 3).generator().standard_normal(5)
        b = RngState(7, 3).generator().standard_normal(5)
        npt.assert_array_equal(a, b)

    def test_children_are_distinct_and_stable(self):
        root = RngState(7)
        self.assertEqual(root.child('init'), root.child('init'))
        self.assertNotEqual(root.child('init'), root.child('episodes'))
        self.assertNotEqual(root.child(0), root.child(1))
        self.assertNotEqual(root.child(0).generator().random(), root.child(1).generator().random())

    def test_truncated_normal_bounds(self):
        draws = truncated_normal(RngState(8).generator(), (2000,), 0.02, np.float64)
        self.assertLessEqual(np.abs(draws).max(), 0.04 + 1e-12)
        self.assertEqual(truncated_normal(RngState(8).generator(), (3,), 0.02).dtype, np.float32)


class TestOptim(unittest.TestCase):
    def test_cosine_schedule(self):
        self.assertEqual(cosine_lr(0, 10, 1e-3), 1e-3)
        self.assertAlmostEqual(cosine_lr(5, 10, 1e-3), 5e-4, places=12)
        self.assertGreaterEqual(cosine_lr(9, 10, 1e-3), 0.0)

    def test_clip_grad_norm(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        self.assertAlmostEqual(clip_grad_norm([a, b], 1.0), 5.0)
        npt.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-6)

    def test_adamw_descends_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = AdamW({'w': w}, lr=0.1, weight_decay=0.0)
        for _ in range(200):
            opt.zero_grad()
            backward((w * w).sum(), leaves=[w])
            opt.step()
        self.assertLess(np.abs(w.data).max(), 0.5)

    def test_zero_lr_leaves_params_unchanged(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = AdamW({'w': w}, lr=0.0, weight_decay=0.1)
        backward((w * w).sum(), leaves=[w])
        opt.step()
        npt.assert_array_equal(w.data, [1.0, 2.0])

    def test_zero_lr_keeps_signed_zero_and_inf_bits(self):
        start = np.array([-0.0, np.inf, 1.5])
        w = Tensor(start.copy(), requires_grad=True)
        opt = AdamW({'w': w}, lr=0.0, weight_decay=0.1)
        w.grad = np.array([0.5, -1.0, 2.0])
        opt.step()
        self.assertEqual(w.data.tobytes(), start.tobytes())


if __name__ == '__main__':
    unittest.main()

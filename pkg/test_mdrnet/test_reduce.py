import unittest

import numpy as np

from mdrnet import oracles
from mdrnet.errors import ShapeError, TapeError
from mdrnet.gradcheck import GradcheckCase, check_case
from mdrnet.reduce import (Reduction, ReductionKind, full_height_conv_reduce, max_weights, mean_weights, reduce,
                           reduce_backward, sdr)
from mdrnet.sparseconv import ConvKernel, GradTape
from mdrnet.voxgrid import new_sparse, random_sparse
from test_mdrnet import random_column_tensor, tensor_from_entries, unit_geometry


def make_reduction(kind, channels, nz, seed=0, scale=3.0):
    rng = np.random.default_rng(seed)
    r = Reduction.create(kind, channels, nz, rng, name=kind.value)
    if r.kernel is not None:
        r.kernel.weights *= scale
        r.kernel.bias[:] = rng.uniform(-0.5, 0.5, r.kernel.bias.shape)
    return r


class TestPooling(unittest.TestCase):

    def setUp(self):
        self.geometry = unit_geometry(3, 3, 4)

    def test_single_voxel_column(self):
        t = tensor_from_entries(self.geometry, {(1, 1, 2): [0.5, -1.5]})
        y, w = reduce(t, ReductionKind.MeanPool)
        np.testing.assert_array_equal(y.values[1, 1], [0.5, -1.5])
        np.testing.assert_array_equal(w.weights, [1.0])

    def test_mean_and_max(self):
        t = tensor_from_entries(self.geometry, {(0, 0, 0): [1.0], (0, 0, 3): [3.0]})
        y, _ = reduce(t, ReductionKind.MeanPool)
        self.assertEqual(y.values[0, 0, 0], 2.0)
        y, _ = reduce(t, ReductionKind.MaxPool)
        self.assertEqual(y.values[0, 0, 0], 3.0)
        # vacant columns are zero
        self.assertEqual(np.count_nonzero(y.values), 1)

    def test_mean_weights(self):
        t = tensor_from_entries(self.geometry, {(0, 1, k): [float(k)] for k in range(4)})
        np.testing.assert_array_equal(mean_weights(t, 0, 1), [0.25] * 4)
        t = tensor_from_entries(self.geometry, {(2, 2, 1): [1.0]})
        np.testing.assert_array_equal(mean_weights(t, 2, 2), [1.0])
        self.assertEqual(mean_weights(t, 0, 0).size, 0)

    def test_mean_weights_sum_exactly(self):
        t = random_column_tensor(unit_geometry(6), 2, 20, seed=1)
        for i, j in np.unique(t.coords[:, :2], axis=0):
            n = len(t.column(i, j))
            np.testing.assert_array_equal(mean_weights(t, i, j), np.full(n, 1.0 / n))
            self.assertAlmostEqual(float(np.sum(mean_weights(t, i, j))), 1.0, places=12)

    def test_max_weights(self):
        t = tensor_from_entries(self.geometry, {(0, 0, 0): [2.0], (0, 0, 1): [7.0], (0, 0, 2): [5.0]})
        np.testing.assert_array_equal(max_weights(t, 0, 0)[:, 0], [0, 1, 0])
        t = tensor_from_entries(self.geometry, {(0, 0, 0): [3.0], (0, 0, 1): [3.0]})
        np.testing.assert_array_equal(max_weights(t, 0, 0)[:, 0], [1, 0])
        _, w = reduce(t, ReductionKind.MaxPool)
        np.testing.assert_array_equal(w.weights[:, 0], [1, 0])

    def test_max_weights_scan(self):
        t = random_column_tensor(unit_geometry(4, 4, 8), 4, 6, seed=2)
        _, w = reduce(t, ReductionKind.MaxPool)
        for i, j in np.unique(t.coords[:, :2], axis=0):
            col = t.column(i, j)
            x = np.stack([f for _, f in col])
            expected = np.zeros_like(x)
            for c in range(4):
                best = 0
                for n in range(1, len(col)):
                    if x[n, c] > x[best, c]:
                        best = n
                expected[best, c] = 1
            np.testing.assert_array_equal(max_weights(t, i, j), expected)
            rows = [w.get((i, j, k)) for k, _ in col]
            np.testing.assert_array_equal(np.stack(rows), expected)


class TestFullHeight(unittest.TestCase):

    def setUp(self):
        self.geometry = unit_geometry(3, 3, 4)

    def test_uniform_static_weights_full_column(self):
        t = tensor_from_entries(self.geometry, {(1, 1, k): [float(k), 1.0] for k in range(4)})
        k = ConvKernel("fh", np.stack([np.eye(2) / 4] * 4)[None, None])
        y = full_height_conv_reduce(t, k)
        np.testing.assert_allclose(y.values[1, 1], [1.5, 1.0])
        y_mean, _ = reduce(t, ReductionKind.MeanPool)
        np.testing.assert_allclose(y.values, y_mean.values, atol=1e-15)

    def test_partial_column_differs_from_mean(self):
        t = tensor_from_entries(self.geometry, {(1, 1, 0): [2.0], (1, 1, 3): [4.0]})
        k = ConvKernel("fh", np.full((1, 1, 4, 1, 1), 0.25))
        y = full_height_conv_reduce(t, k)
        y_mean, _ = reduce(t, ReductionKind.MeanPool)
        self.assertEqual(y.values[1, 1, 0], 1.5)
        self.assertEqual(y_mean.values[1, 1, 0], 3.0)

    def test_bias_only(self):
        t = tensor_from_entries(self.geometry, {(0, 0, 1): [1.0], (2, 1, 3): [5.0]})
        k = ConvKernel("fh", np.zeros((1, 1, 4, 1, 2)), [0.5, -1.0])
        y = full_height_conv_reduce(t, k).values
        np.testing.assert_array_equal(y[0, 0], [0.5, -1.0])
        np.testing.assert_array_equal(y[2, 1], [0.5, -1.0])
        self.assertEqual(np.count_nonzero(y), 4)

    def test_wrong_height(self):
        t = tensor_from_entries(self.geometry, {(0, 0, 1): [1.0]})
        with self.assertRaises(ShapeError):
            full_height_conv_reduce(t, ConvKernel.zeros("fh", (1, 1, 3), 1, 1))
        with self.assertRaises(ShapeError):
            full_height_conv_reduce(t, ConvKernel.zeros("fh", (1, 1, 4), 2, 1))

    def test_flatten_matches_full_height(self):
        t = random_sparse(unit_geometry(5, 5, 6), 3, 0.3, seed=0)
        r = make_reduction(ReductionKind.FullHeightSparseConv, 3, 6)
        y_sparse, _ = reduce(t, r)
        y_flat, _ = reduce(t, Reduction(ReductionKind.FlattenConv, r.kernel))
        np.testing.assert_allclose(y_sparse.values, y_flat.values, atol=1e-12)


class TestSdr(unittest.TestCase):

    def setUp(self):
        self.t = random_sparse(unit_geometry(6), 3, 0.4, seed=5)

    def test_zero_estimator_equals_mean(self):
        y_sdr, w = sdr(self.t, ConvKernel.zeros("e", (3, 3, 3), 3, 1), "softmax")
        y_mean, _ = reduce(self.t, ReductionKind.MeanPool)
        np.testing.assert_array_equal(y_sdr.values, y_mean.values)

    def test_single_voxel_column(self):
        t = tensor_from_entries(unit_geometry(3), {(1, 1, 1): [2.0], (0, 2, 0): [-1.0]})
        e = ConvKernel("e", np.full((3, 3, 3, 1, 1), 0.7), [-3.0])
        for norm in ("softmax", "relu"):
            _, w = sdr(t, e, norm)
            np.testing.assert_array_equal(w.weights, [1.0, 1.0])

    def test_weight_invariants(self):
        for seed in range(5):
            t = random_column_tensor(unit_geometry(6), 3, 20, seed=seed)
            for kind in (ReductionKind.SdrSoftmax, ReductionKind.SdrRelu, ReductionKind.MaxPool, ReductionKind.MeanPool):
                r = make_reduction(kind, 3, 6, seed=seed)
                _, w = reduce(t, r)
                _, sums = w.column_sums()
                np.testing.assert_allclose(sums, 1.0, atol=1e-9)
            _, w = reduce(t, make_reduction(ReductionKind.SdrSigmoid, 3, 6, seed=seed))
            self.assertTrue(np.all((w.weights > 0) & (w.weights < 1)))

    def test_column_invariants_at_scale(self):
        # ten 10x10 grids with every column occupied, 1000 columns in all
        normalized = (ReductionKind.SdrSoftmax, ReductionKind.SdrRelu, ReductionKind.MaxPool, ReductionKind.MeanPool)
        n_columns = 0
        for seed in range(10):
            t = random_column_tensor(unit_geometry(10, 10, 6), 2, 100, seed=100 + seed)
            for kind in normalized:
                _, w = reduce(t, make_reduction(kind, 2, 6, seed=seed))
                ij, sums = w.column_sums()
                np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-9, err_msg=f"{kind.value} seed {seed}")
            n_columns += len(ij)
            _, w = reduce(t, make_reduction(ReductionKind.SdrSigmoid, 2, 6, seed=seed))
            self.assertTrue(np.all((w.weights > 0) & (w.weights < 1)))
            r = make_reduction(ReductionKind.SdrSoftmax, 2, 6, seed=seed)
            shifted = r.kernel.copy()
            shifted.bias -= 7.25
            _, w1 = reduce(t, r)
            _, w2 = sdr(t, shifted, "softmax")
            np.testing.assert_allclose(w1.weights, w2.weights, rtol=0, atol=1e-10)
        self.assertEqual(n_columns, 1000)

    def test_relu_fallback(self):
        e = ConvKernel("e", np.zeros((3, 3, 3, 3, 1)), [-1.0])
        _, w = sdr(self.t, e, "relu")
        _, w_mean = reduce(self.t, ReductionKind.MeanPool)
        np.testing.assert_allclose(w.weights, w_mean.weights)

    def test_softmax_shift_invariance(self):
        e = make_reduction(ReductionKind.SdrSoftmax, 3, 6).kernel
        shifted = e.copy()
        shifted.bias += 12.5
        y1, _ = sdr(self.t, e, "softmax")
        y2, _ = sdr(self.t, shifted, "softmax")
        np.testing.assert_allclose(y1.values, y2.values, atol=1e-10)

    def test_sigmoid_not_scale_invariant(self):
        e = make_reduction(ReductionKind.SdrSigmoid, 3, 6).kernel
        scaled = ConvKernel("e2", e.weights * 2.0, e.bias * 2.0)
        y1, _ = sdr(self.t, e, "sigmoid")
        y2, _ = sdr(self.t, scaled, "sigmoid")
        self.assertFalse(np.allclose(y1.values, y2.values))

    def test_estimator_shape(self):
        with self.assertRaises(ShapeError):
            sdr(self.t, ConvKernel.zeros("e", (3, 3, 3), 3, 2))
        with self.assertRaises(ShapeError):
            sdr(self.t, ConvKernel.zeros("e", (3, 3, 3), 2, 1))

    def test_logits_recorded(self):
        r = make_reduction(ReductionKind.SdrSoftmax, 3, 6)
        _, w = reduce(self.t, r)
        np.testing.assert_allclose(w.logits, oracles.submanifold_conv3d_oracle(self.t, r.kernel)[:, 0], atol=1e-10)
        self.assertEqual(len(w.to_lines()), len(self.t))


class TestOracleEquivalence(unittest.TestCase):

    def test_every_kind(self):
        n = 0
        for extents in [(4, 4, 4), (6, 6, 6), (5, 3, 6)]:
            for density in (0.1, 0.5, 1.0):
                g = unit_geometry(*extents)
                t = random_sparse(g, 3, density, seed=n)
                for kind in ReductionKind:
                    r = make_reduction(kind, 3, extents[2], seed=n)
                    y, _ = reduce(t, r)
                    np.testing.assert_allclose(y.values, oracles.reduce_oracle(t, r), atol=1e-10,
                                               err_msg=f"{kind.value} on {extents} at {density}")
                n += 1

    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for n in range(200):
            extents = tuple(int(e) for e in rng.integers(2, 7, size=3))
            density = (0.1, 0.5, 1.0)[n % 3]
            channels = int(rng.integers(1, 5))
            t = random_sparse(unit_geometry(*extents), channels, density, seed=n, scale=2.0)
            for kind in ReductionKind:
                r = make_reduction(kind, channels, extents[2], seed=n)
                y, _ = reduce(t, r)
                dev = np.max(np.abs(y.values - oracles.reduce_oracle(t, r)))
                self.assertLess(dev, 1e-10, f"{kind.value} on instance {n}, extents {extents}")
                worst = max(worst, dev)
        self.assertLess(worst, 1e-10)

    def test_constant_columns_conserved(self):
        v = np.array([0.5, -2.0, 1.25])
        t = random_column_tensor(unit_geometry(5), 3, 10, seed=3)
        t = t.with_features(np.tile(v, (len(t), 1)))
        occupied = np.unique(t.coords[:, :2], axis=0)
        for kind in (ReductionKind.MeanPool, ReductionKind.MaxPool, ReductionKind.SdrRelu, ReductionKind.SdrSoftmax):
            y, _ = reduce(t, make_reduction(kind, 3, 5))
            np.testing.assert_allclose(y.values[occupied[:, 0], occupied[:, 1]], np.tile(v, (len(occupied), 1)),
                                       rtol=1e-12)

    def test_empty_tensor(self):
        t = new_sparse(unit_geometry(3), 2)
        for kind in ReductionKind:
            y, _ = reduce(t, make_reduction(kind, 2, 3))
            self.assertEqual(y.shape[:2], (3, 3))
            np.testing.assert_array_equal(y.values, 0)


class TestReduceBackward(unittest.TestCase):

    def test_mean_pool_grad(self):
        t = tensor_from_entries(unit_geometry(2, 2, 4), {(0, 0, 0): [1.0], (0, 0, 2): [2.0], (0, 0, 3): [5.0],
                                                         (1, 0, 1): [4.0]})
        tape = GradTape()
        y, _ = reduce(t, ReductionKind.MeanPool, tape)
        upstream = np.zeros(y.shape)
        upstream[0, 0, 0] = 3.0
        upstream[1, 0, 0] = 2.0
        input_grads, _ = reduce_backward(tape, y, upstream)
        np.testing.assert_allclose(input_grads[t][:, 0], [1.0, 1.0, 1.0, 2.0])

    def test_max_pool_routes_to_argmax(self):
        t = random_column_tensor(unit_geometry(4, 4, 6), 2, 5, seed=1)
        tape = GradTape()
        y, w = reduce(t, ReductionKind.MaxPool, tape)
        input_grads, _ = reduce_backward(tape, y, np.ones(y.shape))
        np.testing.assert_array_equal(input_grads[t][w.weights == 0], 0)
        np.testing.assert_array_equal(input_grads[t][w.weights == 1], 1)

    def test_consumed(self):
        t = random_sparse(unit_geometry(3), 1, 0.5)
        tape = GradTape()
        y, _ = reduce(t, ReductionKind.MeanPool, tape)
        reduce_backward(tape, y, np.ones(y.shape))
        with self.assertRaises(TapeError):
            reduce_backward(tape, y, np.ones(y.shape))

    def test_finite_differences(self):
        rng = np.random.default_rng(11)
        for kind in ReductionKind:
            t = random_sparse(unit_geometry(5), 3, 0.4, seed=2)
            r = make_reduction(kind, 3, 5, seed=4)
            kernels = [r.kernel] if r.kernel is not None else []
            case = GradcheckCase(kind.value, lambda tape, t=t, r=r: reduce(t, r, tape)[0], kernels, [t])
            result = check_case(case, rng, max_entries=16)
            self.assertLess(result.worst_rel_error, 1e-5, msg=result.line())

    def test_sdr_estimator_grad_nonzero(self):
        t = random_sparse(unit_geometry(5), 3, 0.4, seed=2)
        r = make_reduction(ReductionKind.SdrSoftmax, 3, 5)
        tape = GradTape()
        y, _ = reduce(t, r, tape)
        _, param_grads = reduce_backward(tape, y, np.ones(y.shape))
        self.assertGreater(param_grads[r.kernel.name].max_abs(), 0)


if __name__ == "__main__":
    unittest.main(exit=False)

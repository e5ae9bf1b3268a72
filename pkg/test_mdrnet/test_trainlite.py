import copy
import unittest
from dataclasses import replace

import numpy as np

from mdrnet import params
from mdrnet.backbone import BackboneConfig, build, forward_trace, msr_ablation_config
from mdrnet.errors import ConfigError, ShapeError, TrainingError
from mdrnet.heatmap import objects_with_bright_footprint
from mdrnet.reduce import ReductionKind
from mdrnet.scene_creator import synth_scene
from mdrnet.trainlite import (SgdConfig, ToyTask, attach_head, gaussian_target, loss_curve_frame, loss_mse,
                              make_toy_tasks, sample_loss_and_grads, train)
from mdrnet.voxelizer import VoxelizeConfig
from mdrnet.voxgrid import DenseBevMap

VOXELIZE = VoxelizeConfig.from_ranges((0.5, 0.5, 0.5), (0.0, -4.0, -2.0), (8.0, 4.0, 2.0))
BACKBONE = BackboneConfig(input_extents=(16, 16, 8), stage_channels=(4, 8, 8, 8), bev_blocks=(1, 1, 1, 1))


class TestLoss(unittest.TestCase):

    def test_mse(self):
        zeros = DenseBevMap.zeros(3, 3, 1)
        self.assertEqual(loss_mse(zeros, zeros), 0.0)
        self.assertEqual(loss_mse(DenseBevMap(np.ones((3, 3, 1))), zeros), 1.0)
        half = np.zeros((2, 2, 1))
        half[0, 0, 0] = 2.0
        self.assertEqual(loss_mse(DenseBevMap(half), DenseBevMap.zeros(2, 2, 1)), 1.0)
        with self.assertRaises(ShapeError):
            loss_mse(zeros, DenseBevMap.zeros(2, 3, 1))

    def test_mse_with_head(self):
        state = build(BACKBONE)
        head = attach_head(state, seed=0)
        pred = DenseBevMap(np.zeros((2, 2, 8)))
        target = DenseBevMap(np.zeros((2, 2, 1)))
        # zero features leave only the zero-initialized bias
        self.assertEqual(loss_mse(pred, target, head), 0.0)

    def test_gaussian_target(self):
        t = gaussian_target(np.array([[1.5, 1.5]]), (0.0, 0.0), (1.0, 1.0), (4, 5))
        self.assertEqual(t.shape, (4, 5, 1))
        self.assertEqual(t.values[1, 1, 0], 1.0)
        self.assertAlmostEqual(t.values[2, 1, 0], np.exp(-0.5))
        self.assertTrue(np.all((t.values >= 0) & (t.values <= 1)))
        empty = gaussian_target(np.zeros((0, 2)), (0.0, 0.0), (1.0, 1.0), (4, 5))
        np.testing.assert_array_equal(empty.values, 0)

    def test_toy_task_validation(self):
        with self.assertRaises(ShapeError):
            ToyTask(None, DenseBevMap.zeros(2, 2, 2))
        with self.assertRaises(ValueError):
            ToyTask(None, DenseBevMap(np.full((2, 2, 1), 1.5)))


class TestToyTasks(unittest.TestCase):

    def test_make_toy_tasks(self):
        tasks = make_toy_tasks(2, 0, VOXELIZE, BACKBONE)
        self.assertEqual(len(tasks), 2)
        for task in tasks:
            self.assertEqual(task.input.geometry.extents, (16, 16, 8))
            self.assertEqual(task.target.shape, (2, 2, 1))
            self.assertEqual(task.centers.shape, (3, 3))
        again = make_toy_tasks(1, 1, VOXELIZE, BACKBONE)
        np.testing.assert_array_equal(again[0].input.features, tasks[1].input.features)

    def test_bad_arguments(self):
        with self.assertRaises(ConfigError):
            make_toy_tasks(0, 0, VOXELIZE, BACKBONE)
        with self.assertRaises(ConfigError):
            make_toy_tasks(1, 0, VOXELIZE, replace(BACKBONE, input_extents=(32, 32, 16)))

    def test_sgd_config(self):
        SgdConfig(learning_rate=0.0)
        with self.assertRaises(ConfigError):
            SgdConfig(learning_rate=-0.1)
        with self.assertRaises(ConfigError):
            SgdConfig(momentum=1.0)
        with self.assertRaises(ConfigError):
            SgdConfig(steps=0)


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.tasks = make_toy_tasks(1, 0, VOXELIZE, BACKBONE)
        self.state = build(BACKBONE, seed=0)

    def test_loss_decreases(self):
        cfg = SgdConfig(learning_rate=0.01, momentum=0.5, steps=6, seed=0)
        trained, curve = train(self.state, self.tasks, cfg)
        self.assertEqual(len(curve), 6)
        self.assertLess(curve[-1], curve[0])
        self.assertIsNone(self.state.head)
        self.assertIsNotNone(trained.head)

    def test_zero_learning_rate_is_flat(self):
        _, curve = train(self.state, self.tasks, SgdConfig(learning_rate=0.0, steps=3))
        self.assertEqual(len(set(curve)), 1)

    def test_one_step_is_gradient_descent(self):
        attach_head(self.state, seed=0)
        _, grads = sample_loss_and_grads(self.state, self.tasks[0])
        trained, _ = train(self.state, self.tasks, SgdConfig(learning_rate=0.05, momentum=0.9, steps=1))
        for k in self.state.kernels():
            np.testing.assert_allclose(trained.kernel(k.name).weights, k.weights - 0.05 * grads[k.name].weights,
                                       rtol=1e-12, atol=1e-15, err_msg=k.name)
            np.testing.assert_allclose(trained.kernel(k.name).bias, k.bias - 0.05 * grads[k.name].bias,
                                       rtol=1e-12, atol=1e-15, err_msg=k.name)

    def test_estimator_receives_gradient(self):
        attach_head(self.state, seed=0)
        _, grads = sample_loss_and_grads(self.state, self.tasks[0])
        self.assertGreater(grads["reduce1.estimator"].max_abs(), 0)
        self.assertGreater(grads["reduce2.full_height"].max_abs(), 0)

    def test_fusion_changes_trajectory(self):
        cfg = SgdConfig(learning_rate=0.01, momentum=0.5, steps=3)
        _, with_msr = train(build(BACKBONE, seed=0), self.tasks, cfg)
        _, without = train(build(msr_ablation_config(set(), BACKBONE), seed=0), self.tasks, cfg)
        self.assertNotEqual(with_msr, without)

    def test_deterministic_across_threads(self):
        tasks = make_toy_tasks(2, 0, VOXELIZE, BACKBONE)
        cfg = SgdConfig(learning_rate=0.01, momentum=0.5, steps=2, seed=3)
        _, a = train(self.state, tasks, cfg, num_threads=1)
        _, b = train(self.state, tasks, cfg, num_threads=2)
        self.assertEqual(a, b)

    def test_non_finite_raises(self):
        self.state.kernel("bev4.block0.conv2").bias[0] = np.nan
        with self.assertRaises(TrainingError):
            train(self.state, self.tasks, SgdConfig(steps=2))

    def test_loss_curve_frame(self):
        df = loss_curve_frame([3.0, 2.0, 1.5])
        self.assertEqual(list(df.columns), ["step", "loss"])
        self.assertEqual(df["step"].tolist(), [0, 1, 2])


class TestDefaultScene(unittest.TestCase):
    """One scene on the default parameter grid, trained for the default number of steps"""

    @classmethod
    def setUpClass(cls):
        p = copy.deepcopy(params.DEFAULT_PARAMS)
        vcfg = params.get_voxelize_config(p)
        cls.bcfg = params.get_backbone_config(p, vcfg.geometry.extents)
        cls.sgd = params.get_sgd_config(p, seed=0)
        cls.scene = synth_scene(0, 3, vcfg.geometry)
        cls.tasks = make_toy_tasks(1, 0, vcfg, cls.bcfg)
        cls.trained, cls.curve = train(build(cls.bcfg, seed=0), cls.tasks, cls.sgd)

    def test_loss_drops_below_a_quarter(self):
        self.assertEqual(len(self.curve), 200)
        self.assertTrue(np.all(np.isfinite(self.curve)))
        self.assertLess(self.curve[-1], 0.25 * self.curve[0])

    def test_same_seed_same_curve(self):
        _, again = train(build(self.bcfg, seed=0), self.tasks, replace(self.sgd, steps=20))
        self.assertEqual(again, self.curve[:20])

    def test_weights_favor_objects(self):
        np.testing.assert_array_equal(self.tasks[0].centers, self.scene.centers)
        weights = forward_trace(self.trained, self.tasks[0].input).weights
        self.assertEqual(weights.kind, ReductionKind.SdrSoftmax)
        self.assertGreaterEqual(objects_with_bright_footprint(weights, self.scene.centers, self.scene.box_sizes), 2)


if __name__ == "__main__":
    unittest.main(exit=False)

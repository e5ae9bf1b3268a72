import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import mdrnet.params as params
from mdrnet.errors import ConfigError
from mdrnet.reduce import ReductionKind


class TestParams(unittest.TestCase):
    def setUp(self):
        self.incomplete_params_dict = {"voxelize": {"voxel_size": [1.0, 1.0, 1.0]}}
        self.td = tempfile.TemporaryDirectory()
        self.addCleanup(self.td.cleanup)

    def test_ensure_all_keys_present(self):
        out = params.ensure_all_keys_present(self.incomplete_params_dict)
        self.assertTrue(out is not None)
        for section, keys in params.DEFAULT_PARAMS.items():
            self.assertTrue(section in out)
            for k in keys:
                self.assertTrue(k in out[section])
        self.assertEqual(out["voxelize"]["voxel_size"], [1.0, 1.0, 1.0])

    def test_bad_section(self):
        with self.assertRaises(ConfigError):
            params.ensure_all_keys_present({"train": [1, 2]})

    def test_default_file(self):
        self.assertEqual(params.get_params_file_path().name, "mdrnet_params.yml")
        out = params.load_params_file()
        self.assertEqual(out["backbone"]["reduction_stage1"], "SdrSoftmax")

    def test_write_and_load(self):
        path = Path(self.td.name) / "p.yml"
        params.write_params_file(path)
        self.assertEqual(params.load_params_file(path), params.DEFAULT_PARAMS)
        with self.assertRaises(FileNotFoundError):
            params.load_params_file(Path(self.td.name) / "missing.yml")
        path.write_text("voxelize: [unclosed\n")
        with self.assertRaises(ConfigError):
            params.load_params_file(path)

    def test_config_getters(self):
        p = params.load_params_file()
        vcfg = params.get_voxelize_config(p)
        self.assertEqual(vcfg.geometry.extents, (32, 32, 16))
        bcfg = params.get_backbone_config(p, vcfg.geometry.extents)
        self.assertEqual(bcfg.reduction_stages2to4, ReductionKind.FullHeightSparseConv)
        self.assertEqual(bcfg.msr_stages, frozenset({2, 3, 4}))
        sgd = params.get_sgd_config(p, seed=4, learning_rate=0.5, steps=None)
        self.assertEqual((sgd.learning_rate, sgd.steps, sgd.seed), (0.5, 200, 4))
        p["backbone"]["reduction_stage1"] = "Median"
        with self.assertRaises(ConfigError):
            params.get_backbone_config(p, vcfg.geometry.extents)

    def test_num_threads(self):
        with mock.patch.dict(os.environ, {"MDRNET_THREADS": "3"}):
            self.assertEqual(params.get_num_threads(), 3)
        with mock.patch.dict(os.environ, {"MDRNET_THREADS": "many"}):
            with self.assertRaises(ConfigError):
                params.get_num_threads()
        with mock.patch.dict(os.environ, {"MDRNET_THREADS": ""}):
            self.assertGreaterEqual(params.get_num_threads(), 1)


if __name__ == "__main__":
    unittest.main(exit=False)

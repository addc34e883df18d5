import os
import tempfile
import unittest

from src.exceptions import ConfigError
from src.experiment_config import (ExperimentConfig, build_config, config_hash, dump_config, load_config,
                                   parse_override)


class TestBuildConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = build_config({})
        self.assertEqual(cfg.kac.a, 2.0)
        self.assertEqual(cfg.distill.stage_schedule, [20, 4, 2, 1])
        self.assertEqual(cfg.integrator_spec().nfe, 200)
        self.assertEqual(cfg.kac_params().c, 1.0)

    def test_dotted_and_nested_keys(self):
        cfg = build_config({'kac.a': 25, 'integrator': {'method': 'euler'}, 'integrator.steps': 10})
        self.assertEqual(cfg.kac.a, 25.0)
        self.assertEqual(cfg.integrator.method, 'euler')
        self.assertEqual(cfg.integrator.steps, 10)

    def test_overrides_win(self):
        cfg = build_config({'kac': {'a': 3.0, 'c': 2.0}}, ['kac.a=7', 'distill.stage_schedule=[8, 4, 1]'])
        self.assertEqual(cfg.kac.a, 7.0)
        self.assertEqual(cfg.kac.c, 2.0)
        self.assertEqual(cfg.distill_config().stage_schedule, (8, 4, 1))

    def test_rejections(self):
        for raw in ({'kac.a': 0}, {'kac.rate': 1.0}, {'integrator.method': 'rk4'},
                    {'distill.stage_schedule': [20, 3]}, {'colour': 'red'}):
            with self.subTest(raw=raw):
                with self.assertRaises(ConfigError):
                    build_config(raw)

    def test_parse_override(self):
        self.assertEqual(parse_override('guidance.w=1.5'), ('guidance.w', 1.5))
        self.assertEqual(parse_override('data.path= x.csv'), ('data.path', 'x.csv'))
        with self.assertRaises(ConfigError):
            parse_override('guidance.w')

    def test_builders(self):
        cfg = build_config({'train.iterations': 5, 'sched.kind': 'quadratic', 'seeds.master': 4})
        self.assertEqual(cfg.optimizer_config().iterations, 5)
        self.assertEqual(cfg.seed(3, 1).master_seed, 4)
        self.assertEqual(cfg.dataset().points.shape[1], 1)
        self.assertAlmostEqual(float(cfg.schedule().g(0.5)), 0.25)

    def test_missing_dataset_file(self):
        cfg = build_config({'data.path': '/nonexistent/points.csv'})
        with self.assertRaises(ConfigError):
            cfg.dataset()


class TestLoadConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_yaml_round_trip(self):
        cfg = build_config({'kac.a': 5.0, 'guidance.w': 2.0})
        path = dump_config(cfg, os.path.join(self.tmp.name, 'config.yaml'))
        loaded = load_config(path)
        self.assertEqual(loaded, cfg)
        self.assertEqual(config_hash(loaded), config_hash(cfg))

    def test_flat_file(self):
        path = os.path.join(self.tmp.name, 'run.cfg')
        with open(path, 'w') as f:
            f.write('# quick run\nkac.a=4\n\nsimulate.n_paths=10  # tiny\n')
        cfg = load_config(path, ['simulate.t_end=0.5'])
        self.assertEqual(cfg.kac.a, 4.0)
        self.assertEqual(cfg.simulate.n_paths, 10)
        self.assertEqual(cfg.simulate.t_end, 0.5)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmp.name, 'absent.yaml'))

    def test_non_mapping(self):
        path = os.path.join(self.tmp.name, 'list.yaml')
        with open(path, 'w') as f:
            f.write('- 1\n- 2\n')
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_hash_tracks_parameters(self):
        self.assertEqual(config_hash(ExperimentConfig()), config_hash(ExperimentConfig()))
        self.assertNotEqual(config_hash(ExperimentConfig()), config_hash(build_config({'kac.c': 3.0})))


if __name__ == '__main__':
    unittest.main()

import json
import os
import tempfile
import unittest
from unittest.mock import patch

from errors import NotFoundError
from run_config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config
from utils.seeding import derive_seed

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config')


class TestRunConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, payload) -> str:
        path = os.path.join(self.tmp.name, 'run.json')
        with open(path, 'w', encoding='utf-8') as f:
            f.write(payload if isinstance(payload, str) else json.dumps(payload))
        return path

    def _field_of(self, data) -> str:
        with self.assertRaises(ConfigError) as ctx:
            config_from_dict(data)
        return ctx.exception.field

    def test_shipped_configs_load(self):
        default = load_config(os.path.join(CONFIG_DIR, 'default_run.json'))
        self.assertEqual(default, config_from_dict({}))
        reference = load_config(os.path.join(CONFIG_DIR, 'reference_run.json'))
        self.assertEqual(reference.seed, 42)

    def test_empty_file_gives_defaults(self):
        config = load_config(self._write(''))
        self.assertEqual(config.seed, 42)
        self.assertEqual(config.key_length, 128)
        self.assertEqual(config.hpvfg.learning_rate, 1e-4)
        self.assertEqual(config.hpvfg.weights.ano, 0.4)

    def test_seed_and_key_length_propagate(self):
        config = config_from_dict({'seed': 7, 'key_length': 16, 'threshold': 0.5})
        self.assertEqual(config.pretrain.seed, derive_seed(7, 'init'))
        self.assertEqual(config.hpvfg.seed, derive_seed(7, 'training'))
        self.assertEqual((config.hpvfg.key_length, config.kvfa.key_length), (16, 16))
        self.assertEqual((config.kvfa.threshold, config.evaluation.auth_threshold), (0.5, 0.5))

    def test_seed_is_mandatory(self):
        self.assertEqual(self._field_of({'key_length': 8}), 'seed')

    def test_unknown_field_reports_dotted_path(self):
        self.assertEqual(self._field_of({'seed': 1, 'hpvfg': {'weights': {'foo': 1.0}}}), 'hpvfg.weights.foo')

    def test_derived_fields_rejected(self):
        self.assertEqual(self._field_of({'seed': 1, 'hpvfg': {'seed': 3}}), 'hpvfg.seed')
        self.assertEqual(self._field_of({'seed': 1, 'kvfa': {'key_length': 8}}), 'kvfa.key_length')

    def test_type_errors(self):
        self.assertEqual(self._field_of({'seed': 1, 'key_length': 'long'}), 'key_length')
        self.assertEqual(self._field_of({'seed': 1, 'hpvfg': {'use_pose_correction': 1}}),
                         'hpvfg.use_pose_correction')

    def test_value_errors(self):
        self.assertEqual(self._field_of({'seed': 1, 'threshold': 1.5}), 'threshold')
        self.assertEqual(self._field_of({'seed': 1, 'hpvfg': {'weights': {'ano': -1.0}}}), 'hpvfg.weights')
        self.assertEqual(self._field_of({'seed': 1, 'hpvfg': {'ablate': ['xyz']}}), 'hpvfg.ablate')
        self.assertEqual(self._field_of({'seed': 1, 'simulation': {'scenarios': ['S7']}}), 'simulation.scenarios')
        self.assertEqual(self._field_of({'seed': 1, 'kvfa': {'epochs': 0}}), 'kvfa.epochs')
        self.assertEqual(self._field_of({'seed': 1, 'kvfa': {'lr_min': 0.5}}), 'kvfa.lr_min')
        self.assertEqual(self._field_of({'seed': 1, 'hpvfg': {'lr_min': 'bas'}}), 'hpvfg.lr_min')
        self.assertEqual(self._field_of({'seed': 1, 'kvfa': {'key_scale': 0}}), 'kvfa.key_scale')

    def test_missing_manifest(self):
        with self.assertRaises(NotFoundError):
            config_from_dict({'seed': 1, 'dataset': {'manifest': os.path.join(self.tmp.name, 'absent.jsonl')}})

    def test_missing_and_invalid_files(self):
        with self.assertRaises(NotFoundError):
            load_config(os.path.join(self.tmp.name, 'absent.json'))
        with self.assertRaises(ConfigError):
            load_config(self._write('{"seed": '))

    def test_output_dir_from_environment(self):
        with patch.dict(os.environ, {'KFAAR_OUT': os.path.join(self.tmp.name, 'out')}):
            config = load_config(self._write({'seed': 3}))
        self.assertEqual(config.output_dir, os.path.join(self.tmp.name, 'out'))

    def test_effective_config_round_trip(self):
        config = config_from_dict({'seed': 5, 'key_length': 8, 'hpvfg': {'ablate': ['div'], 'epochs': 2},
                                   'simulation': {'key_lengths': [8, 16]}})
        plain = config_to_dict(config)
        self.assertNotIn('seed', plain['hpvfg'])
        self.assertEqual(config_from_dict(json.loads(json.dumps(plain))), config)

    def test_key_lengths(self):
        config = config_from_dict({'seed': 1, 'key_length': 128, 'simulation': {'key_lengths': [8, 128, 256]}})
        self.assertEqual(config.all_key_lengths(), (128, 8, 256))
        derived = config.for_key_length(8)
        self.assertEqual((derived.hpvfg.key_length, derived.kvfa.key_length), (8, 8))
        self.assertIsInstance(derived, RunConfig)


if __name__ == '__main__':
    unittest.main()

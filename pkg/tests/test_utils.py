import os
import tempfile
import unittest
from unittest.mock import MagicMock

import torch

from utils.logger import LogLevel, logger
from utils.sanitize import sanitize_filename, sanitize_text, validate_path
from utils.seeding import STREAMS, derive_seed, torch_generator


class TestSeeding(unittest.TestCase):

    def test_streams_are_stable_and_distinct(self):
        seeds = [derive_seed(42, stream) for stream in STREAMS]
        self.assertEqual(seeds, [derive_seed(42, stream) for stream in STREAMS])
        self.assertEqual(len(set(seeds)), len(STREAMS))
        self.assertTrue(all(0 <= s < 2 ** 63 for s in seeds))
        self.assertNotEqual(derive_seed(42, 'keys'), derive_seed(43, 'keys'))

    def test_generator(self):
        a = torch.rand(3, generator=torch_generator(5))
        b = torch.rand(3, generator=torch_generator(5))
        self.assertTrue(torch.equal(a, b))


class TestSanitize(unittest.TestCase):

    def test_sanitize_text(self):
        self.assertEqual(sanitize_text('Évaluation: L = 8/128'), 'Évaluation__L_=_8_128')
        self.assertEqual(sanitize_text(''), '')

    def test_sanitize_filename(self):
        self.assertEqual(sanitize_filename('rapport final?.pdf'), 'rapport_final.pdf')
        self.assertEqual(sanitize_filename('???.pdf'), 'artefact.pdf')

    def test_validate_path(self):
        self.assertTrue(validate_path(os.path.dirname(__file__)))
        self.assertFalse(validate_path(''))
        self.assertFalse(validate_path('/nonexistent/kfaar'))


class TestLogger(unittest.TestCase):

    def tearDown(self):
        logger.set_console_callback(None)

    def test_console_callback_receives_level(self):
        callback = MagicMock()
        logger.set_console_callback(callback)
        logger.success("Étape terminée")
        callback.assert_called_once_with("Étape terminée", LogLevel.SUCCESS.value)

    def test_export_logs(self):
        logger.info("Message exporté")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'kfaar.log')
            self.assertTrue(logger.export_logs(path))
            with open(path, encoding='utf-8') as f:
                self.assertIn("Message exporté", f.read())


if __name__ == '__main__':
    unittest.main()

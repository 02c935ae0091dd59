import unittest

import torch

from backbones import TEST
from errors import InvalidArgumentError
from evaluation import (
    EvaluationConfig, all_pair_scores, evaluate_system, fresh_key, generate_virtual_batch, ordered_map,
    recognizer_match_threshold,
)
from keying import keygen
from tests.toy_world import tiny_dataset, tiny_kvfa, tiny_pipeline


class TestHelpers(unittest.TestCase):

    def test_ordered_map_keeps_order(self):
        items = list(range(20))
        self.assertEqual(ordered_map(lambda v: v * v, items, workers=4), [v * v for v in items])

    def test_all_pair_scores_split_by_label(self):
        embeddings = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        scores = all_pair_scores(embeddings, [0, 0, 1])
        self.assertEqual(scores.genuine_scores, (1.0,))
        self.assertEqual(scores.impostor_scores, (0.0, 0.0))

    def test_fresh_key_differs(self):
        avoid = keygen(8, 3)
        self.assertNotEqual(fresh_key(8, 3, avoid).bits, avoid.bits)

    def test_virtual_batch_matches_single_generation(self):
        pipeline = tiny_pipeline(key_length=8)
        images = tiny_dataset().images(TEST)[:3]
        keys = [keygen(8, i) for i in range(3)]
        batch = generate_virtual_batch(pipeline, images, keys)
        for image, key, virtual in zip(images, keys, batch):
            self.assertTrue(torch.allclose(pipeline(image, key).pixels, virtual.pixels, atol=1e-5))
            self.assertEqual(virtual.pose_label, image.pose_label)
        with self.assertRaises(InvalidArgumentError):
            generate_virtual_batch(pipeline, images, keys[:2])


class TestEvaluateSystem(unittest.TestCase):

    def setUp(self):
        self.pipeline = tiny_pipeline(key_length=8)
        self.dataset = tiny_dataset()
        self.model = tiny_kvfa(8).eval()

    def test_report_is_complete(self):
        result = evaluate_system(self.pipeline, self.model, self.dataset, EvaluationConfig(), seed=5)
        report = result.report
        for name in ('anonymity', 'diversity', 'auc', 'eer', 'detection_rate', 'crr', 'far'):
            value = getattr(report, name)
            self.assertIsNotNone(value, name)
            self.assertTrue(0.0 <= value <= 1.0, name)
        self.assertEqual(result.pose_preservation, 1.0)
        self.assertEqual([row['threshold'] for row in result.sweep], [0.5, 0.6, 0.7, 0.8, 0.9])
        self.assertEqual(report.metadata['key_length'], 8)

    def test_without_kvfa(self):
        result = evaluate_system(self.pipeline, None, self.dataset, EvaluationConfig(keys_per_image=1), seed=5)
        self.assertIsNone(result.report.crr)
        self.assertIsNone(result.report.diversity)
        self.assertEqual(result.sweep, [])

    def test_parallel_matches_sequential(self):
        sequential = evaluate_system(self.pipeline, self.model, self.dataset, EvaluationConfig(workers=1), seed=2)
        parallel = evaluate_system(self.pipeline, self.model, self.dataset, EvaluationConfig(workers=3), seed=2)
        self.assertEqual(sequential.to_dict(), parallel.to_dict())

    def test_match_threshold_from_originals(self):
        recognizer = self.pipeline.bundle.recognizer
        threshold = recognizer_match_threshold(recognizer, self.dataset)
        self.assertTrue(-1.0 <= threshold <= 1.0)

    def test_invalid_config(self):
        with self.assertRaises(InvalidArgumentError):
            evaluate_system(self.pipeline, None, self.dataset, EvaluationConfig(keys_per_image=0), seed=0)


if __name__ == '__main__':
    unittest.main()

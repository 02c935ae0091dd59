import unittest
from types import SimpleNamespace
from unittest.mock import MagicMock

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import InvalidArgumentError
from keying import keygen
from metrics import (
    MetricsReport, ScoreSet, anonymity_rate, crr_far, detection_rate, diversity_rate, eer_threshold, fid,
    mismatch_rate, roc_auc, roc_auc_eer, threshold_sweep,
)
from tests.toy_world import tiny_bundle, tiny_dataset

score_lists = st.lists(st.integers(min_value=-5, max_value=5).map(lambda v: v / 5.0), min_size=1, max_size=25)


def brute_force_auc(genuine, impostor):
    total = 0.0
    for g in genuine:
        for i in impostor:
            total += 1.0 if g > i else 0.5 if g == i else 0.0
    return total / (len(genuine) * len(impostor))


class TestRocAuc(unittest.TestCase):

    @settings(max_examples=100, deadline=None)
    @given(score_lists, score_lists)
    def test_auc_matches_pair_counting(self, genuine, impostor):
        self.assertAlmostEqual(roc_auc(ScoreSet(genuine, impostor)), brute_force_auc(genuine, impostor), places=9)

    @settings(max_examples=50, deadline=None)
    @given(score_lists, score_lists)
    def test_swapping_classes_complements_auc(self, genuine, impostor):
        scores = ScoreSet(genuine, impostor)
        self.assertAlmostEqual(roc_auc(scores) + roc_auc(scores.swapped()), 1.0, places=9)

    @settings(max_examples=50, deadline=None)
    @given(score_lists, score_lists)
    def test_eer_is_a_rate(self, genuine, impostor):
        _, eer = roc_auc_eer(ScoreSet(genuine, impostor))
        self.assertGreaterEqual(eer, 0.0)
        self.assertLessEqual(eer, 1.0)

    def test_separated_scores(self):
        scores = ScoreSet([0.9, 0.8, 0.95], [0.1, 0.2])
        self.assertEqual(roc_auc_eer(scores), (1.0, 0.0))
        t = eer_threshold(scores)
        self.assertTrue(0.2 <= t < 0.8)

    def test_identical_scores(self):
        self.assertEqual(roc_auc_eer(ScoreSet([0.5], [0.5])), (0.5, 0.5))

    def test_inverted_scores(self):
        auc, eer = roc_auc_eer(ScoreSet([0.1, 0.2], [0.8, 0.9]))
        self.assertEqual(auc, 0.0)
        self.assertEqual(eer, 1.0)

    def test_empty_class_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            roc_auc(ScoreSet([], [0.1]))
        with self.assertRaises(InvalidArgumentError):
            roc_auc_eer(ScoreSet([0.1], []))


class TestCounts(unittest.TestCase):

    def test_mismatch_rate_counts_threshold_as_mismatch(self):
        self.assertAlmostEqual(mismatch_rate([0.1, 0.5, 0.9], 0.5), 2 / 3)
        with self.assertRaises(InvalidArgumentError):
            mismatch_rate([], 0.5)

    def test_crr_far(self):
        accept, reject = SimpleNamespace(accept=True), SimpleNamespace(accept=False)
        decisions = [(accept, True), (accept, True), (reject, True), (reject, True),
                     (accept, False), (reject, False), (reject, False), (reject, False)]
        self.assertEqual(crr_far(decisions), (0.5, 0.25))

    def test_crr_far_undefined_classes(self):
        accept = SimpleNamespace(accept=True)
        with self.assertRaises(InvalidArgumentError):
            crr_far([])
        with self.assertRaises(InvalidArgumentError):
            crr_far([(accept, False)])
        with self.assertRaises(InvalidArgumentError):
            crr_far([(accept, True)])

    def test_threshold_sweep(self):
        rows = threshold_sweep(ScoreSet([0.2, 0.6, 0.9, 0.95], [0.1, 0.7]), [0.0, 0.65, 1.0])
        self.assertEqual([r['crr'] for r in rows], [1.0, 0.5, 0.0])
        self.assertEqual([r['far'] for r in rows], [1.0, 0.5, 0.0])

    def test_detection_rate(self):
        detector = MagicMock()
        detector.detect.side_effect = [True, False, True, True]
        images = tiny_dataset().images()[:4]
        self.assertEqual(detection_rate(detector, images), 0.75)
        with self.assertRaises(InvalidArgumentError):
            detection_rate(detector, [])


class TestRecognizerRates(unittest.TestCase):

    def setUp(self):
        self.recognizer = tiny_bundle().recognizer
        self.images = tiny_dataset().images()[:4]

    def test_same_images_are_never_anonymous(self):
        pairs = [(x, x) for x in self.images]
        self.assertEqual(anonymity_rate(self.recognizer, pairs, 0.5), 0.0)
        self.assertEqual(anonymity_rate(self.recognizer, pairs, 1.5), 1.0)

    def test_diversity_with_key_blind_anonymizer(self):
        triples = [(x, keygen(8, 1), keygen(8, 2)) for x in self.images]
        self.assertEqual(diversity_rate(self.recognizer, triples, 0.5, lambda x, k: x), 0.0)

    def test_diversity_requires_distinct_keys(self):
        key = keygen(8, 1)
        with self.assertRaises(InvalidArgumentError):
            diversity_rate(self.recognizer, [(self.images[0], key, key)], 0.5, lambda x, k: x)


class TestFid(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.a = rng.normal(size=(200, 4)) @ np.diag([1.0, 0.5, 2.0, 0.3])

    def test_identical_sets(self):
        self.assertAlmostEqual(fid(self.a, self.a), 0.0, places=6)

    def test_mean_shift_closed_form(self):
        shift = np.array([1.0, -2.0, 0.5, 0.0])
        self.assertAlmostEqual(fid(self.a, self.a + shift), float(shift @ shift), places=4)

    def test_scaled_set_closed_form(self):
        centered = self.a - self.a.mean(axis=0)
        shift = np.array([0.5, 0.5, 0.0, 0.0])
        # Σ_b = 4 Σ_a : (Σ_a Σ_b)^½ = 2 Σ_a, d² = ||shift||² + Tr(Σ_a)
        expected = float(shift @ shift) + float(np.trace(np.cov(centered, rowvar=False)))
        self.assertAlmostEqual(fid(centered, 2 * centered + shift), expected, places=4)

    def test_invalid_inputs(self):
        with self.assertRaises(InvalidArgumentError):
            fid(self.a, self.a[:, :3])
        with self.assertRaises(InvalidArgumentError):
            fid(self.a[:4], self.a)


class TestMetricsReport(unittest.TestCase):

    def test_rates_validated(self):
        with self.assertRaises(InvalidArgumentError):
            MetricsReport(auc=1.2)
        with self.assertRaises(InvalidArgumentError):
            MetricsReport(fid=-1.0)

    def test_row_keeps_missing_values(self):
        report = MetricsReport(anonymity=1.0, fid=3.0)
        self.assertEqual(report.to_row(), [1.0, None, None, None, None, None, None, 3.0])
        self.assertEqual(report.to_dict()['metadata'], {})


if __name__ == '__main__':
    unittest.main()

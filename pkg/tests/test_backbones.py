import os
import tempfile
import unittest

import torch

from backbones import (
    BackboneConfig, FaceImage, PoseAngles, PretrainConfig, TEST, TRAIN, ToyGenerator, check_image_batch,
    correct_pose, detect_face, encode, generate, load_face_image, make_synthetic_dataset, pose_of,
    pretrain_backbones, recognize, save_face_image, warp_between_poses,
)
from errors import InvalidArgumentError
from hpvfg import MappingNetwork, map_latent
from tests.toy_world import TINY_CONFIG, tiny_bundle, tiny_dataset


class TestSyntheticDataset(unittest.TestCase):

    def setUp(self):
        self.dataset = tiny_dataset()

    def test_shapes_and_range(self):
        self.assertEqual(len(self.dataset), 36)
        self.assertEqual(self.dataset.image_shape, (3, 16, 16))
        self.assertGreaterEqual(float(self.dataset.pixels.min()), 0.0)
        self.assertLessEqual(float(self.dataset.pixels.max()), 1.0)

    def test_same_seed_same_faces(self):
        other = tiny_dataset()
        self.assertTrue(torch.equal(self.dataset.pixels, other.pixels))
        self.assertEqual(self.dataset.splits, other.splits)

    def test_every_identity_trains_and_tests(self):
        train_ids = set(self.dataset.identity_groups(TRAIN))
        test_ids = set(self.dataset.identity_groups(TEST))
        self.assertEqual(train_ids, set(range(6)))
        self.assertEqual(test_ids, set(range(6)))

    def test_splits_disjoint(self):
        train = set(self.dataset.indices(TRAIN).tolist())
        test = set(self.dataset.indices(TEST).tolist())
        self.assertFalse(train & test)

    def test_degenerate_dataset_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            make_synthetic_dataset(1, 6, 0)
        with self.assertRaises(InvalidArgumentError):
            make_synthetic_dataset(4, 1, 0)

    def test_unknown_split_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            self.dataset.indices('holdout')


class TestDomainTypes(unittest.TestCase):

    def test_pose_limits(self):
        with self.assertRaises(InvalidArgumentError):
            PoseAngles(95.0, 0.0, 0.0)

    def test_face_pixels_range(self):
        with self.assertRaises(InvalidArgumentError):
            FaceImage(pixels=torch.full((3, 16, 16), 1.5))

    def test_batch_shape_check(self):
        with self.assertRaises(InvalidArgumentError):
            check_image_batch(torch.zeros(2, 3, 8, 8), (3, 16, 16), 'encoder')

    def test_generator_size_must_be_power_of_two(self):
        with self.assertRaises(InvalidArgumentError):
            ToyGenerator(BackboneConfig(image_size=24))


class TestComponents(unittest.TestCase):

    def setUp(self):
        self.bundle = tiny_bundle()
        self.dataset = tiny_dataset()
        self.x = self.dataset.image(0)

    def test_encode_and_recognize(self):
        z = encode(self.bundle.encoder, self.x)
        self.assertEqual(tuple(z.values.shape), (512,))
        emb = recognize(self.bundle.recognizer, self.x)
        self.assertAlmostEqual(float(emb.values.norm()), 1.0, places=5)
        self.assertEqual(emb.values.shape[0], TINY_CONFIG.embedding_dim)

    def test_generate_is_frontal(self):
        torch.manual_seed(0)
        zplus = map_latent(MappingNetwork(1), encode(self.bundle.encoder, self.x))
        face = generate(self.bundle.generator, zplus)
        self.assertEqual(face.shape, (3, 16, 16))
        self.assertEqual(face.pose_label, PoseAngles.frontal())

    def test_warp_identity_when_poses_match(self):
        poses = self.dataset.poses[:4]
        pixels = self.dataset.pixels[:4]
        warped = warp_between_poses(pixels, poses, poses)
        self.assertTrue(torch.allclose(warped, pixels, atol=1e-4))

    def test_correct_pose_copies_original_labels(self):
        torch.manual_seed(0)
        zplus = map_latent(MappingNetwork(1), encode(self.bundle.encoder, self.x))
        virtual = correct_pose(self.bundle.pose_module, generate(self.bundle.generator, zplus), self.x)
        self.assertEqual(pose_of(virtual), pose_of(self.x))
        self.assertEqual(virtual.expression, self.x.expression)
        self.assertIsNone(virtual.identity_label)

    def test_correct_pose_requires_original_pose(self):
        unlabeled = FaceImage(pixels=self.x.pixels)
        with self.assertRaises(InvalidArgumentError):
            correct_pose(self.bundle.pose_module, self.x, unlabeled)

    def test_detector(self):
        self.assertTrue(detect_face(self.bundle.detector, self.x))
        self.assertFalse(detect_face(self.bundle.detector, FaceImage(pixels=torch.full((3, 16, 16), 0.5))))

    def test_describe_lists_components(self):
        self.assertEqual(set(self.bundle.describe()),
                         {'encoder', 'recognizer', 'generator', 'pose_module', 'detector'})


class TestPretraining(unittest.TestCase):

    def test_pretraining_freezes_everything(self):
        dataset = tiny_dataset()
        bundle = tiny_bundle()
        torch.manual_seed(1)
        mapping = MappingNetwork(1)
        history = pretrain_backbones(bundle, mapping, dataset,
                                     PretrainConfig(recognizer_epochs=2, autoencoder_epochs=2, batch_size=8))
        self.assertEqual(set(history), {'recognizer', 'eval_recognizer', 'autoencoder'})
        self.assertTrue(all(len(losses) == 2 for losses in history.values()))
        for module in [*bundle.trainable_modules().values(), mapping]:
            self.assertFalse(any(p.requires_grad for p in module.parameters()))

    def test_recognizer_loss_decreases(self):
        dataset = tiny_dataset()
        bundle = tiny_bundle()
        torch.manual_seed(1)
        history = pretrain_backbones(bundle, MappingNetwork(1), dataset,
                                     PretrainConfig(recognizer_epochs=15, autoencoder_epochs=1, batch_size=8))
        self.assertLess(history['recognizer'][-1], history['recognizer'][0])


class TestImageFiles(unittest.TestCase):

    def test_png_round_trip(self):
        x = tiny_dataset().image(0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'face.png')
            save_face_image(x, path)
            loaded = load_face_image(path, 16)
        self.assertEqual(loaded.shape, x.shape)
        self.assertLessEqual(float((loaded.pixels - x.pixels).abs().max()), 1 / 255 + 1e-6)
        self.assertEqual(loaded.pose_label, PoseAngles.frontal())

    def test_missing_image(self):
        from errors import NotFoundError
        with self.assertRaises(NotFoundError):
            load_face_image('/nonexistent/face.png', 16)


if __name__ == '__main__':
    unittest.main()

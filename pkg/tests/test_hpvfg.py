import unittest

import torch
import torch.nn.functional as F

from backbones import FaceImage, IdentityEmbedding, PoseAngles, warp_between_poses
from errors import InvalidArgumentError
from hpvfg import (
    HPVFG_REPORT_COLUMNS, HPVFGTrainConfig, HPVFGWeights, ProjectorHPVFG, TupleBatch, cosine_embedding_loss,
    cosine_schedule, generate_virtual, generate_virtual_checked, hpvfg_loss_terms, loss_ano, loss_cosine_embedding,
    loss_dif, loss_div, loss_syn, loss_total_hpvfg, sample_tuple_batch, train_hpvfg, trainable_anchors,
)
from keying import keygen
from tests.toy_world import tiny_dataset, tiny_pipeline
from utils.seeding import torch_generator


def oracle_virtual(pipeline, x, pose, k):
    """Recalcul pas à pas de G_f(G(M(P(E(x), k))), x)"""
    bundle = pipeline.bundle
    z = bundle.encoder.head(bundle.encoder.trunk(x))
    zprime = pipeline.projector.mlp(torch.cat([z, k], dim=1))
    w = pipeline.mapping.mlp(zprime)
    zplus = w[:, None, :] * (1 + pipeline.mapping.row_scale) + pipeline.mapping.row_shift
    frontal = bundle.generator(zplus)
    return warp_between_poses(frontal, torch.zeros_like(pose), pose)


def oracle_embed(recognizer, pixels):
    f = recognizer(pixels)
    return f / f.norm(dim=1, keepdim=True)


def oracle_cos_loss(a, b, target, margin=0.0):
    cos = F.cosine_similarity(a, b, dim=1)
    if target == 1:
        return (1 - cos).mean()
    return torch.maximum(cos, torch.full_like(cos, margin)).mean()


class TestCosineEmbeddingLoss(unittest.TestCase):

    def test_known_values(self):
        a = torch.tensor([[1.0, 0.0]])
        self.assertAlmostEqual(float(cosine_embedding_loss(a, a, 1)), 0.0)
        self.assertAlmostEqual(float(cosine_embedding_loss(a, torch.tensor([[0.0, 2.0]]), -1)), 0.0)
        self.assertAlmostEqual(float(cosine_embedding_loss(a, -a, -1, margin=0.2)), 0.2, places=6)
        self.assertAlmostEqual(float(cosine_embedding_loss(a, a, -1)), 1.0, places=6)

    def test_zero_norm_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            cosine_embedding_loss(torch.zeros(1, 3), torch.ones(1, 3), 1)

    def test_invalid_target_and_shape(self):
        with self.assertRaises(InvalidArgumentError):
            cosine_embedding_loss(torch.ones(1, 3), torch.ones(1, 3), 0)
        with self.assertRaises(InvalidArgumentError):
            cosine_embedding_loss(torch.ones(1, 3), torch.ones(1, 4), 1)

    def test_embedding_wrapper(self):
        e1 = IdentityEmbedding(torch.tensor([1.0, 0.0]))
        e2 = IdentityEmbedding(torch.tensor([0.6, 0.8]))
        self.assertAlmostEqual(loss_cosine_embedding(e1, e2, 1), 0.4, places=6)
        self.assertAlmostEqual(loss_cosine_embedding(e1, e2, -1, 0.0), 0.6, places=6)


class TestWeights(unittest.TestCase):

    def test_defaults(self):
        w = HPVFGWeights()
        self.assertEqual((w.ano, w.syn, w.div, w.dif, w.margin), (0.4, 1.0, 1.0, 1.0, 0.0))

    def test_ablation_zeroes_terms(self):
        w = HPVFGWeights().with_ablation(['div'])
        self.assertEqual(w.div, 0.0)
        self.assertEqual(w.ano, 0.4)

    def test_invalid_weights(self):
        with self.assertRaises(InvalidArgumentError):
            HPVFGWeights(ano=-1.0)
        with self.assertRaises(InvalidArgumentError):
            HPVFGWeights(ano=0.0, syn=0.0, div=0.0, dif=0.0)
        with self.assertRaises(InvalidArgumentError):
            HPVFGWeights().with_ablation(['foo'])


class TestVirtualFaces(unittest.TestCase):

    def setUp(self):
        self.pipeline = tiny_pipeline(key_length=8)
        self.dataset = tiny_dataset()
        self.x = self.dataset.image(1)

    def test_pose_and_expression_preserved(self):
        virtual = self.pipeline(self.x, keygen(8, 1))
        self.assertEqual(virtual.pose_label, self.x.pose_label)
        self.assertEqual(virtual.expression, self.x.expression)
        self.assertIsNone(virtual.identity_label)

    def test_without_pose_correction_stays_frontal(self):
        pipeline = tiny_pipeline(key_length=8, use_pose_correction=False)
        virtual = pipeline(self.x, keygen(8, 1))
        self.assertEqual(virtual.pose_label, PoseAngles.frontal())

    def test_deterministic_for_same_key(self):
        key = keygen(8, 4)
        self.assertTrue(torch.equal(self.pipeline(self.x, key).pixels, self.pipeline(self.x, key).pixels))

    def test_key_changes_output(self):
        a = self.pipeline(self.x, keygen(8, 1)).pixels
        b = self.pipeline(self.x, keygen(8, 2)).pixels
        self.assertFalse(torch.equal(a, b))

    def test_wrong_key_length(self):
        with self.assertRaises(InvalidArgumentError):
            self.pipeline(self.x, keygen(16, 1))

    def test_missing_pose_rejected(self):
        p = self.pipeline
        with self.assertRaises(InvalidArgumentError):
            generate_virtual(p.bundle, p.projector, p.mapping, FaceImage(pixels=self.x.pixels), keygen(8, 1))

    def test_checked_generation_stops_when_anonymous(self):
        first = keygen(8, 9)
        result = generate_virtual_checked(self.pipeline, self.pipeline.bundle.eval_recognizer, self.x,
                                          match_threshold=1.0, max_attempts=4, seed=0, first_key=first)
        self.assertEqual(result.attempts, 1)
        self.assertIs(result.key, first)
        self.assertTrue(result.anonymous)

    def test_checked_generation_gives_up(self):
        result = generate_virtual_checked(self.pipeline, self.pipeline.bundle.eval_recognizer, self.x,
                                          match_threshold=-1.5, max_attempts=3, seed=0)
        self.assertEqual(result.attempts, 3)
        self.assertFalse(result.anonymous)
        with self.assertRaises(InvalidArgumentError):
            generate_virtual_checked(self.pipeline, self.pipeline.bundle.eval_recognizer, self.x, 0.5, 0)


class TestTupleBatches(unittest.TestCase):

    def setUp(self):
        self.dataset = tiny_dataset()
        self.anchors = trainable_anchors(self.dataset)

    def test_sampled_batch_satisfies_constraints(self):
        batch = sample_tuple_batch(self.dataset, self.anchors[:4], 8, torch_generator(0))
        batch.check_same_identity()
        batch.check_different_identity()
        batch.check_distinct_keys()
        self.assertEqual(batch.size, 4)

    def test_constraint_violations(self):
        batch = sample_tuple_batch(self.dataset, self.anchors[:2], 8, torch_generator(0))
        with self.assertRaises(InvalidArgumentError):
            TupleBatch(x1=batch.x1, x1_id=batch.x1_id, x2=batch.y, x2_id=batch.y_id).check_same_identity()
        with self.assertRaises(InvalidArgumentError):
            TupleBatch(x1=batch.x1, k1=batch.k1, k2=batch.k1).check_distinct_keys()
        with self.assertRaises(InvalidArgumentError):
            TupleBatch(x1=batch.x1).require('y')


class TestLossOracles(unittest.TestCase):
    """Chaque perte égale un recalcul indépendant, en double précision"""

    def setUp(self):
        torch.manual_seed(0)
        self.pipeline = tiny_pipeline(key_length=8, dtype=torch.float64)
        self.recognizer = self.pipeline.bundle.recognizer
        dataset = tiny_dataset()
        anchors = trainable_anchors(dataset)
        self.batch = sample_tuple_batch(dataset, anchors[:2], 8, torch_generator(5)).to(torch.float64)

    def _oracles(self, margin):
        b, p, r = self.batch, self.pipeline, self.recognizer
        v11 = oracle_embed(r, oracle_virtual(p, b.x1, b.x1_pose, b.k1))
        v21 = oracle_embed(r, oracle_virtual(p, b.x2, b.x2_pose, b.k1))
        v12 = oracle_embed(r, oracle_virtual(p, b.x1, b.x1_pose, b.k2))
        vy1 = oracle_embed(r, oracle_virtual(p, b.y, b.y_pose, b.k1))
        original = oracle_embed(r, b.x1)
        return {
            'ano': oracle_cos_loss(v11, original, -1, margin),
            'syn': oracle_cos_loss(v11, v21, 1),
            'div': oracle_cos_loss(v11, v12, -1, margin),
            'dif': oracle_cos_loss(v11, vy1, -1, margin),
        }

    def test_individual_losses(self):
        for margin in (0.0, -0.3):
            oracles = self._oracles(margin)
            b = self.batch
            computed = {
                'ano': loss_ano(self.recognizer, self.pipeline, b.x1, b.x1_pose, b.k1, margin),
                'syn': loss_syn(self.recognizer, self.pipeline, b),
                'div': loss_div(self.recognizer, self.pipeline, b, margin),
                'dif': loss_dif(self.recognizer, self.pipeline, b, margin),
            }
            for name, value in computed.items():
                self.assertAlmostEqual(float(value), float(oracles[name]), delta=1e-6, msg=name)

    def test_single_pass_terms_and_total(self):
        weights = HPVFGWeights(ano=0.4, syn=0.7, div=1.3, dif=0.2, margin=-0.1)
        oracles = self._oracles(weights.margin)
        total, terms = loss_total_hpvfg(weights, self.recognizer, self.pipeline, self.batch)
        for name in HPVFGWeights.TERMS:
            self.assertAlmostEqual(float(terms[name]), float(oracles[name]), delta=1e-6, msg=name)
        expected = sum(getattr(weights, name) * float(oracles[name]) for name in HPVFGWeights.TERMS)
        self.assertAlmostEqual(float(total), expected, delta=1e-6)

    def test_terms_validate_batch(self):
        bad = TupleBatch(**dict(self.batch.__dict__, k2=self.batch.k1))
        with self.assertRaises(InvalidArgumentError):
            hpvfg_loss_terms(self.recognizer, self.pipeline, bad)


class TestGradients(unittest.TestCase):

    def test_total_loss_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        pipeline = tiny_pipeline(key_length=8, dtype=torch.float64)
        recognizer = pipeline.bundle.recognizer
        dataset = tiny_dataset()
        batch = sample_tuple_batch(dataset, trainable_anchors(dataset)[:2], 8, torch_generator(1)).to(torch.float64)
        weights = HPVFGWeights()
        params = list(pipeline.projector.parameters())
        for param in params:
            param.requires_grad_(True)

        total, _ = loss_total_hpvfg(weights, recognizer, pipeline, batch)
        grads = torch.autograd.grad(total, params)

        generator = torch_generator(3)
        h = 1e-6
        for _ in range(20):
            i = int(torch.randint(len(params), (1,), generator=generator))
            flat = params[i].data.view(-1)
            j = int(torch.randint(flat.numel(), (1,), generator=generator))
            with torch.no_grad():
                original = float(flat[j])
                flat[j] = original + h
                plus = float(loss_total_hpvfg(weights, recognizer, pipeline, batch)[0])
                flat[j] = original - h
                minus = float(loss_total_hpvfg(weights, recognizer, pipeline, batch)[0])
                flat[j] = original
            numeric = (plus - minus) / (2 * h)
            analytic = float(grads[i].view(-1)[j])
            scale = max(abs(numeric), abs(analytic), 1e-4)
            self.assertLessEqual(abs(numeric - analytic) / scale, 1e-3)


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.pipeline = tiny_pipeline(key_length=8)
        self.dataset = tiny_dataset()

    def test_report_and_frozen_projector(self):
        p = self.pipeline
        config = HPVFGTrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, key_length=8,
                                  projector_hidden=(32,), max_steps_per_epoch=2, seed=1)
        projector, report = train_hpvfg(p.bundle, p.projector, p.mapping, self.dataset, config)
        self.assertEqual(report.header(), list(HPVFG_REPORT_COLUMNS))
        self.assertEqual([row[0] for row in report.as_rows()], [1, 2])
        self.assertFalse(any(param.requires_grad for param in projector.parameters()))
        for module in p.frozen_modules().values():
            self.assertFalse(any(param.requires_grad for param in module.parameters()))

    def test_training_only_moves_projector(self):
        p = self.pipeline
        modules = {'encoder': p.bundle.encoder, 'recognizer': p.bundle.recognizer,
                   'eval_recognizer': p.bundle.eval_recognizer, 'mapping': p.mapping, 'generator': p.bundle.generator}
        before = {name: {k: v.clone() for k, v in m.state_dict().items()} for name, m in modules.items()}
        projector_before = [w.clone() for w in p.projector.parameters()]
        train_hpvfg(p.bundle, p.projector, p.mapping, self.dataset,
                    HPVFGTrainConfig(epochs=2, learning_rate=1e-2, key_length=8, max_steps_per_epoch=2))
        for name, module in modules.items():
            state = module.state_dict()
            self.assertEqual(set(state), set(before[name]), msg=name)
            for k, v in state.items():
                self.assertTrue(torch.equal(v, before[name][k]), msg=f"{name}.{k}")
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(projector_before, p.projector.parameters())))

    def test_cosine_schedule(self):
        weight = torch.nn.Parameter(torch.zeros(2))
        optimizer = torch.optim.Adam([weight], lr=1e-2)
        self.assertIsNone(cosine_schedule(optimizer, 5, 1e-2, None))
        scheduler = cosine_schedule(optimizer, 4, 1e-2, 1e-4)
        rates = []
        for _ in range(4):
            optimizer.step()
            scheduler.step()
            rates.append(optimizer.param_groups[0]['lr'])
        self.assertTrue(all(a > b for a, b in zip(rates, rates[1:])))
        self.assertAlmostEqual(rates[-1], 1e-4)
        with self.assertRaises(InvalidArgumentError):
            cosine_schedule(optimizer, 4, 1e-2, 0.1)

    def test_key_length_mismatch(self):
        p = self.pipeline
        with self.assertRaises(InvalidArgumentError):
            train_hpvfg(p.bundle, ProjectorHPVFG(16, (32,)), p.mapping, self.dataset,
                        HPVFGTrainConfig(epochs=1, key_length=8))


if __name__ == '__main__':
    unittest.main()

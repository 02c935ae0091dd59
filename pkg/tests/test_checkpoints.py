import json
import os
import tempfile
import unittest

import torch

from checkpoints import CheckpointError, load_world, read_manifest, save_world, write_manifest
from errors import InvalidStateError, NotFoundError
from keying import keygen
from kvfa import extract_with_key
from tests.toy_world import tiny_dataset, tiny_trained_world


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'checkpoints', 'world.pt')
        self.world = tiny_trained_world()

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_reproduces_virtual_faces(self):
        save_world(self.path, self.world)
        loaded = load_world(self.path)
        x, key = tiny_dataset().image(0), keygen(8, 3)
        before = self.world.pipeline(8)(x, key).pixels
        after = loaded.pipeline(8)(x, key).pixels
        self.assertTrue(torch.allclose(before, after))
        self.assertEqual(loaded.metadata, self.world.metadata)
        self.assertEqual(loaded.key_lengths, [8])
        self.assertIsNotNone(loaded.bundle.eval_recognizer)

    def test_round_trip_reproduces_keyed_embeddings(self):
        save_world(self.path, self.world)
        loaded = load_world(self.path)
        x, key = tiny_dataset().image(1), keygen(8, 5)
        self.assertEqual(loaded.kvfa(8).key_scale, self.world.kvfa(8).key_scale)
        before = extract_with_key(self.world.kvfa(8), x, key).values
        after = extract_with_key(loaded.kvfa(8), x, key).values
        self.assertTrue(torch.allclose(before, after))

    def test_loaded_components_are_frozen(self):
        save_world(self.path, self.world)
        loaded = load_world(self.path)
        self.assertFalse(any(p.requires_grad for p in loaded.kvfa(8).parameters()))
        self.assertFalse(any(p.requires_grad for p in loaded.projectors[8].parameters()))

    def test_missing_key_length(self):
        with self.assertRaises(InvalidStateError):
            self.world.pipeline(128)
        with self.assertRaises(InvalidStateError):
            self.world.kvfa(128)

    def test_missing_file(self):
        with self.assertRaises(NotFoundError):
            load_world(os.path.join(self.tmp.name, 'absent.pt'))

    def test_unreadable_file(self):
        path = os.path.join(self.tmp.name, 'junk.pt')
        with open(path, 'wb') as f:
            f.write(b'not a checkpoint')
        with self.assertRaises(CheckpointError):
            load_world(path)

    def test_wrong_format(self):
        path = os.path.join(self.tmp.name, 'other.pt')
        torch.save({'format': 'something-else'}, path)
        with self.assertRaises(CheckpointError):
            load_world(path)

    def test_shape_mismatch(self):
        save_world(self.path, self.world)
        payload = torch.load(self.path)
        entry = payload['components']['projector@8']
        name = next(iter(entry['shapes']))
        entry['shapes'][name] = [1, 1]
        torch.save(payload, self.path)
        with self.assertRaises(CheckpointError) as ctx:
            load_world(self.path)
        self.assertTrue(ctx.exception.field.startswith('projector@8'))


class TestManifest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'faces.jsonl')

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        dataset = tiny_dataset(3, 4, seed=1)
        write_manifest(dataset, self.path)
        loaded = read_manifest(self.path)
        self.assertEqual(loaded.splits, dataset.splits)
        self.assertTrue(torch.equal(loaded.identities, dataset.identities))
        self.assertTrue(torch.allclose(loaded.pixels, dataset.pixels))

    def test_unknown_split(self):
        dataset = tiny_dataset(2, 2, seed=1)
        write_manifest(dataset, self.path)
        with open(self.path, 'r', encoding='utf-8') as f:
            records = [json.loads(line) for line in f]
        records[0]['split'] = 'holdout'
        with open(self.path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(json.dumps(r) for r in records) + '\n')
        with self.assertRaises(CheckpointError):
            read_manifest(self.path)

    def test_invalid_json_and_missing_file(self):
        with open(self.path, 'w', encoding='utf-8') as f:
            f.write('{"index": 0\n')
        with self.assertRaises(CheckpointError):
            read_manifest(self.path)
        with self.assertRaises(NotFoundError):
            read_manifest(os.path.join(self.tmp.name, 'absent.jsonl'))


if __name__ == '__main__':
    unittest.main()

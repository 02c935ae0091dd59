"""
Persistance : conteneur de checkpoint auto-descriptif et manifeste de jeu de données.

Un checkpoint regroupe tous les composants d'une exécution (backbones, mapping,
projecteurs et modèles KVFA par longueur de clé) avec leur nom, version,
configuration et formes de poids.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List

import torch
import torch.nn as nn

from backbones import (
    BackboneBundle, BackboneConfig, SPLITS, SyntheticFaceDataset, ToyDetector, ToyEncoder, ToyGenerator,
    ToyPoseModule, ToyRecognizer,
)
from errors import InvalidStateError, NotFoundError
from hpvfg import HPVFGPipeline, MappingNetwork, ProjectorHPVFG
from kvfa import KVFAModel
from utils.logger import logger

CHECKPOINT_FORMAT = 'kfaar-checkpoint'
CHECKPOINT_VERSION = 1


class CheckpointError(InvalidStateError):
    """Checkpoint illisible ou incompatible"""
    pass


@dataclass
class TrainedWorld:
    """Composants d'une exécution, indexés par longueur de clé pour P et KVFA"""
    bundle: BackboneBundle
    mapping: MappingNetwork
    projectors: Dict[int, ProjectorHPVFG] = field(default_factory=dict)
    kvfa_models: Dict[int, KVFAModel] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def key_lengths(self) -> List[int]:
        return sorted(self.projectors)

    def pipeline(self, key_length: int, use_pose_correction: bool = True) -> HPVFGPipeline:
        if key_length not in self.projectors:
            raise InvalidStateError(f"Aucun projecteur HPVFG pour L={key_length}", field='hpvfg')
        return HPVFGPipeline(self.bundle, self.projectors[key_length], self.mapping, use_pose_correction)

    def kvfa(self, key_length: int) -> KVFAModel:
        if key_length not in self.kvfa_models:
            raise InvalidStateError(f"Aucun modèle KVFA pour L={key_length}", field='kvfa')
        return self.kvfa_models[key_length]


def _entry(module: nn.Module, config: Dict[str, object]) -> Dict[str, object]:
    state = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
    return {
        'name': getattr(module, 'component_name', type(module).__name__),
        'version': getattr(module, 'component_version', '1.0'),
        'config': config,
        'shapes': {k: list(v.shape) for k, v in state.items()},
        'state_dict': state,
    }


def save_world(path: str, world: TrainedWorld) -> str:
    """
    Enregistre tous les composants dans un seul conteneur.

    Returns:
        Chemin écrit
    """
    backbone = world.bundle.config.to_dict()
    components = {
        'encoder': _entry(world.bundle.encoder, backbone),
        'recognizer': _entry(world.bundle.recognizer, backbone),
        'generator': _entry(world.bundle.generator, backbone),
        'mapping': _entry(world.mapping, {'n_layers': world.mapping.n_layers}),
    }
    if world.bundle.eval_recognizer is not None:
        components['eval_recognizer'] = _entry(world.bundle.eval_recognizer, backbone)
    for length, projector in sorted(world.projectors.items()):
        components[f"projector@{length}"] = _entry(projector, {
            'key_length': length, 'hidden_widths': list(projector.hidden_widths)})
    for length, model in sorted(world.kvfa_models.items()):
        components[f"kvfa@{length}"] = _entry(model, dict(model.build_config))

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save({
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'backbone': backbone,
        'metadata': dict(world.metadata),
        'components': components,
    }, path)
    logger.info(f"Checkpoint enregistré: {path} ({len(components)} composants)")
    return path


def _restore(module: nn.Module, entry: Dict[str, object], name: str) -> nn.Module:
    expected = {k: list(v.shape) for k, v in module.state_dict().items()}
    stored = entry.get('shapes', {})
    if set(expected) != set(stored):
        raise CheckpointError(f"{name}: paramètres incompatibles avec l'architecture", field=name)
    for key, shape in expected.items():
        if list(stored[key]) != shape or list(entry['state_dict'][key].shape) != shape:
            raise CheckpointError(
                f"{name}: forme {stored[key]} pour '{key}', attendu {shape}", field=f"{name}.{key}")
    module.load_state_dict(entry['state_dict'])
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def load_world(path: str) -> TrainedWorld:
    """
    Reconstruit les composants d'un checkpoint.

    Raises:
        NotFoundError: fichier absent
        CheckpointError: format inconnu ou formes incompatibles
    """
    if not os.path.exists(path):
        raise NotFoundError(f"Checkpoint introuvable: {path}", field='checkpoint')
    try:
        payload = torch.load(path, map_location='cpu')
    except Exception as e:
        raise CheckpointError(f"Checkpoint illisible: {path} ({e})", field='checkpoint')
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Format de checkpoint inconnu: {path}", field='format')
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"Version de checkpoint non supportée: {payload.get('version')}", field='version')

    components = payload['components']
    for required in ('encoder', 'recognizer', 'generator', 'mapping'):
        if required not in components:
            raise CheckpointError(f"Composant manquant: {required}", field=required)

    config = BackboneConfig(**payload['backbone'])
    bundle = BackboneBundle(
        config=config,
        encoder=_restore(ToyEncoder(config), components['encoder'], 'encoder'),
        recognizer=_restore(ToyRecognizer(config), components['recognizer'], 'recognizer'),
        generator=_restore(ToyGenerator(config), components['generator'], 'generator'),
        pose_module=ToyPoseModule(config),
        detector=ToyDetector(config),
        eval_recognizer=(_restore(ToyRecognizer(config), components['eval_recognizer'], 'eval_recognizer')
                         if 'eval_recognizer' in components else None),
    )
    mapping = _restore(MappingNetwork(**components['mapping']['config']), components['mapping'], 'mapping')
    world = TrainedWorld(bundle=bundle, mapping=mapping, metadata=dict(payload.get('metadata', {})))

    for name, entry in components.items():
        if name.startswith('projector@'):
            cfg = entry['config']
            projector = ProjectorHPVFG(cfg['key_length'], cfg['hidden_widths'])
            world.projectors[int(cfg['key_length'])] = _restore(projector, entry, name)
        elif name.startswith('kvfa@'):
            cfg = dict(entry['config'])
            model = KVFAModel(config, cfg['key_length'], cfg['width'], cfg['hidden_dim'], cfg['projector_hidden'],
                              cfg.get('key_scale', 1.0))
            world.kvfa_models[int(cfg['key_length'])] = _restore(model, entry, name)

    logger.info(f"Checkpoint chargé: {path} (clés: {world.key_lengths})")
    return world


# ---------------------------------------------------------------------------
# Manifeste de jeu de données
# ---------------------------------------------------------------------------

def write_manifest(dataset: SyntheticFaceDataset, path: str) -> str:
    """Un enregistrement JSON par ligne et par image (pixels en ligne)"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for i in range(len(dataset)):
            record = {
                'index': i,
                'pixels': dataset.pixels[i].tolist(),
                'identity_label': int(dataset.identities[i]),
                'pose': [float(v) for v in dataset.poses[i]],
                'expression': float(dataset.expressions[i]),
                'split': dataset.splits[i],
            }
            f.write(json.dumps(record, sort_keys=True) + '\n')
    logger.info(f"Manifeste écrit: {path} ({len(dataset)} images)")
    return path


def read_manifest(path: str) -> SyntheticFaceDataset:
    """
    Relit un manifeste JSON-lines.

    Raises:
        NotFoundError: fichier absent
        CheckpointError: enregistrement invalide
    """
    if not os.path.exists(path):
        raise NotFoundError(f"Manifeste introuvable: {path}", field='dataset.manifest')
    records: List[Dict[str, object]] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise CheckpointError(f"{path}:{line_no}: JSON invalide ({e})", field='dataset.manifest')
    if not records:
        raise CheckpointError(f"Manifeste vide: {path}", field='dataset.manifest')
    bad = [r.get('index') for r in records if r.get('split') not in SPLITS]
    if bad:
        raise CheckpointError(f"Partition inconnue pour les images {bad[:5]}", field='split')

    records.sort(key=lambda r: r['index'])
    return SyntheticFaceDataset(
        pixels=torch.tensor([r['pixels'] for r in records], dtype=torch.float32),
        identities=torch.tensor([r['identity_label'] for r in records], dtype=torch.long),
        poses=torch.tensor([r['pose'] for r in records], dtype=torch.float32),
        expressions=torch.tensor([r['expression'] for r in records], dtype=torch.float32),
        splits=tuple(r['split'] for r in records),
    )

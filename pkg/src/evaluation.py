"""
Évaluation d'un système entraîné sur la partition de test du jeu synthétique.

Produit un MetricsReport (anonymat, diversité, AUC/EER de synchronisme, détection,
CRR/FAR, FID) et la courbe CRR/FAR en fonction du seuil.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import torch

from backbones import FaceImage, PoseAngles, SyntheticFaceDataset, TEST, ToyRecognizer
from errors import InvalidArgumentError
from hpvfg import HPVFGPipeline
from keying import UserKey, keygen, stack_keys
from kvfa import DEFAULT_THRESHOLD, AuthDecision, AuthMode, KVFAModel
from metrics import (
    MetricsReport, ScoreSet, crr_far, detection_rate, eer_threshold, fid, mismatch_rate, roc_auc_eer,
    threshold_sweep,
)
from utils.logger import logger

T = TypeVar('T')
R = TypeVar('R')
CHUNK = 64


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """map() éventuellement parallèle ; l'ordre des résultats suit celui des entrées"""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def _chunks(n: int, size: int = CHUNK) -> List[Tuple[int, int]]:
    return [(start, min(start + size, n)) for start in range(0, n, size)]


@torch.no_grad()
def generate_virtual_batch(pipeline: HPVFGPipeline, images: Sequence[FaceImage], keys: Sequence[UserKey],
                           workers: int = 1) -> List[FaceImage]:
    """Visages virtuels de `images[i]` sous `keys[i]`, par tranches"""
    if len(images) != len(keys):
        raise InvalidArgumentError("Autant de clés que d'images sont requises", field='keys')
    pipeline.freeze(include_projector=True)
    dtype = pipeline.dtype

    def run(bounds: Tuple[int, int]) -> List[FaceImage]:
        start, stop = bounds
        batch = images[start:stop]
        pixels = torch.stack([img.pixels.to(dtype) for img in batch])
        poses = torch.stack([img.pose_tensor(dtype) for img in batch])
        virtual, _ = pipeline.virtual_batch(pixels, poses, stack_keys(keys[start:stop], dtype))
        return [
            FaceImage(pixels=v.clamp(0.0, 1.0), identity_label=None,
                      pose_label=img.pose_label if pipeline.use_pose_correction else PoseAngles.frontal(),
                      expression=img.expression)
            for v, img in zip(virtual, batch)
        ]

    return [face for part in ordered_map(run, _chunks(len(images)), workers) for face in part]


@torch.no_grad()
def embed_batch(embed: Callable[[torch.Tensor], torch.Tensor], images: Sequence[FaceImage],
                dtype: torch.dtype, workers: int = 1) -> torch.Tensor:
    def run(bounds: Tuple[int, int]) -> torch.Tensor:
        start, stop = bounds
        return embed(torch.stack([img.pixels.to(dtype) for img in images[start:stop]]))

    return torch.cat(ordered_map(run, _chunks(len(images)), workers))


def fresh_key(length: int, seed: int, avoid: UserKey) -> UserKey:
    """Clé déterministe différente de `avoid`"""
    key = keygen(length, seed)
    while key.bits == avoid.bits:
        seed += 1
        key = keygen(length, seed)
    return key


def all_pair_scores(embeddings: torch.Tensor, labels: Sequence[int]) -> ScoreSet:
    """Cosinus de toutes les paires i < j, séparés selon l'égalité des étiquettes"""
    sims = (embeddings @ embeddings.t()).double().numpy()
    labels = np.asarray(labels)
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    return ScoreSet(tuple(sims[iu[same], ju[same]]), tuple(sims[iu[~same], ju[~same]]))


def recognizer_match_threshold(eval_recognizer: ToyRecognizer, dataset: SyntheticFaceDataset,
                               split: str = TEST, workers: int = 1) -> float:
    """Seuil EER du reconnaisseur d'évaluation sur les originaux de la partition"""
    images = dataset.images(split)
    dtype = next(eval_recognizer.parameters()).dtype
    embeddings = embed_batch(eval_recognizer.eval().embed, images, dtype, workers)
    scores = all_pair_scores(embeddings, [img.identity_label for img in images])
    threshold = eer_threshold(scores)
    auc, eer = roc_auc_eer(scores)
    logger.info(f"Reconnaisseur d'évaluation: AUC={auc:.4f}, EER={eer:.4f}, seuil={threshold:.4f}")
    return threshold


@dataclass
class EvaluationConfig:
    """Paramètres de l'évaluation"""
    keys_per_image: int = 2
    match_threshold: Optional[float] = None
    auth_threshold: float = DEFAULT_THRESHOLD
    split: str = TEST
    sweep_thresholds: Tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    workers: int = 1


@dataclass
class EvaluationResult:
    report: MetricsReport
    sweep: List[Dict[str, float]] = field(default_factory=list)
    pose_preservation: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {'report': self.report.to_dict(), 'sweep': self.sweep,
                'pose_preservation': self.pose_preservation}


@torch.no_grad()
def evaluate_system(pipeline: HPVFGPipeline, kvfa_model: Optional[KVFAModel], dataset: SyntheticFaceDataset,
                    config: EvaluationConfig, seed: int,
                    metadata: Optional[Dict[str, object]] = None) -> EvaluationResult:
    """
    Calcule toutes les métriques sur la partition d'évaluation.

    Une clé est tirée par identité (synchronisme) ; chaque image reçoit en plus
    `keys_per_image - 1` clés fraîches pour la diversité et la FID.

    Args:
        pipeline: Pipeline HPVFG entraîné
        kvfa_model: Modèle KVFA entraîné (None : CRR/FAR non calculés)
        dataset: Jeu étiqueté
        config: Paramètres
        seed: Graine des clés d'évaluation

    Returns:
        Rapport de métriques et balayage de seuils
    """
    if config.keys_per_image < 1:
        raise InvalidArgumentError("keys_per_image doit être >= 1", field='keys_per_image')
    bundle = pipeline.bundle
    eval_r = bundle.eval_recognizer or bundle.recognizer
    dtype = next(eval_r.parameters()).dtype
    images = dataset.images(config.split)
    if len(images) < 2:
        raise InvalidArgumentError(f"Partition '{config.split}' trop petite pour l'évaluation", field='split')
    labels = [img.identity_label for img in images]

    match_threshold = config.match_threshold
    if match_threshold is None:
        match_threshold = recognizer_match_threshold(eval_r, dataset, config.split, config.workers)

    identity_keys = {ident: keygen(pipeline.key_length, seed + ident) for ident in sorted(set(labels))}
    keys = [identity_keys[label] for label in labels]
    virtuals = generate_virtual_batch(pipeline, images, keys, config.workers)

    original_emb = embed_batch(eval_r.embed, images, dtype, config.workers)
    virtual_emb = embed_batch(eval_r.embed, virtuals, dtype, config.workers)
    anonymity = mismatch_rate((original_emb * virtual_emb).sum(dim=1).tolist(), match_threshold)

    auc, eer = roc_auc_eer(all_pair_scores(virtual_emb, labels))

    diversity = None
    extra_virtuals: List[FaceImage] = []
    if config.keys_per_image >= 2:
        n_extra = len(images) * (config.keys_per_image - 1)
        extra_keys = [fresh_key(pipeline.key_length, seed + 1_000_003 + 7919 * i, keys[i % len(images)])
                      for i in range(n_extra)]
        extra_images = [images[i % len(images)] for i in range(n_extra)]
        extra_virtuals = generate_virtual_batch(pipeline, extra_images, extra_keys, config.workers)
        extra_emb = embed_batch(eval_r.embed, extra_virtuals, dtype, config.workers)
        base_emb = virtual_emb.repeat(config.keys_per_image - 1, 1)
        diversity = mismatch_rate((base_emb * extra_emb).sum(dim=1).tolist(), match_threshold)

    all_virtuals = virtuals + extra_virtuals
    detection = detection_rate(bundle.detector, all_virtuals)
    pose_kept = sum(v.pose_label == x.pose_label for v, x in zip(virtuals, images)) / len(images)

    fid_value = None
    feats_real = embed_batch(eval_r.features, images, dtype, config.workers).double().numpy()
    feats_fake = embed_batch(eval_r.features, all_virtuals, dtype, config.workers).double().numpy()
    if min(len(feats_real), len(feats_fake)) > feats_real.shape[1]:
        fid_value = fid(feats_real, feats_fake)
    else:
        logger.warning(f"FID non calculée: {len(feats_real)} échantillons pour {feats_real.shape[1]} dimensions")

    crr = far = None
    sweep: List[Dict[str, float]] = []
    if kvfa_model is not None:
        crr, far, sweep = _authentication_rates(kvfa_model, images, virtuals, keys, config)

    report = MetricsReport(
        anonymity=anonymity, diversity=diversity, auc=auc, eer=eer, detection_rate=detection,
        crr=crr, far=far, fid=fid_value,
        metadata=dict(metadata or {}, seed=seed, split=config.split, n_images=len(images),
                      key_length=pipeline.key_length, match_threshold=match_threshold,
                      pose_preservation=pose_kept),
    )
    logger.success("Évaluation: " + ", ".join(
        f"{name}={value:.4f}" for name, value in zip(report.columns(), report.to_row()) if value is not None))
    return EvaluationResult(report=report, sweep=sweep, pose_preservation=pose_kept)


def _authentication_rates(model: KVFAModel, images: List[FaceImage], virtuals: List[FaceImage],
                          keys: List[UserKey], config: EvaluationConfig) -> Tuple[float, float, List[Dict[str, float]]]:
    """
    Paires authentiques (x, G(x, k), k) et imposteurs (y, G(x, k), k), y d'une autre identité.
    """
    model.eval()
    kvfa_dtype = next(model.parameters()).dtype
    reference = embed_batch(model.extract_batch, images, kvfa_dtype, config.workers)
    key_tensor = stack_keys(keys, kvfa_dtype)
    queries = torch.cat([
        model.extract_with_key_batch(torch.stack([v.pixels.to(kvfa_dtype) for v in virtuals[a:b]]), key_tensor[a:b])
        for a, b in _chunks(len(virtuals))
    ])

    labels = [img.identity_label for img in images]
    impostor_index = []
    for i, label in enumerate(labels):
        j = next(((i + s) % len(labels) for s in range(1, len(labels)) if labels[(i + s) % len(labels)] != label), None)
        if j is None:
            raise InvalidArgumentError("Une seule identité dans la partition : FAR indéfini", field='split')
        impostor_index.append(j)

    genuine = (reference * queries).sum(dim=1).tolist()
    impostor = (reference[impostor_index] * queries).sum(dim=1).tolist()
    decisions = [(AuthDecision.decide(s, config.auth_threshold, AuthMode.WITH_KEY), True) for s in genuine]
    decisions += [(AuthDecision.decide(s, config.auth_threshold, AuthMode.WITH_KEY), False) for s in impostor]
    crr, far = crr_far(decisions)
    sweep = threshold_sweep(ScoreSet(tuple(genuine), tuple(impostor)), config.sweep_thresholds)
    return crr, far, sweep

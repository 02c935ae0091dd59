"""
Métriques d'évaluation : anonymat, diversité, ROC/AUC/EER, détection, CRR/FAR, FID.

Toutes les fonctions sont pures ; les réductions suivent l'ordre croissant des indices.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from scipy import linalg
from scipy.stats import rankdata

from backbones import FaceImage, ToyDetector
from errors import InvalidArgumentError
from keying import UserKey
from utils.logger import logger

FID_EPS = 1e-6
EMBED_CHUNK = 256

Anonymizer = Callable[[FaceImage, UserKey], FaceImage]


@dataclass(frozen=True)
class ScoreSet:
    """Scores authentiques (même identité) et imposteurs (identités différentes)"""
    genuine_scores: Tuple[float, ...]
    impostor_scores: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'genuine_scores', tuple(float(s) for s in self.genuine_scores))
        object.__setattr__(self, 'impostor_scores', tuple(float(s) for s in self.impostor_scores))

    def require_both(self):
        if not self.genuine_scores:
            raise InvalidArgumentError("Aucun score authentique", field='genuine_scores')
        if not self.impostor_scores:
            raise InvalidArgumentError("Aucun score imposteur", field='impostor_scores')

    def swapped(self) -> 'ScoreSet':
        return ScoreSet(self.impostor_scores, self.genuine_scores)


RATE_FIELDS = ('anonymity', 'diversity', 'auc', 'eer', 'detection_rate', 'crr', 'far')


@dataclass
class MetricsReport:
    """Colonnes des tableaux d'évaluation ; les valeurs absentes restent à None"""
    anonymity: Optional[float] = None
    diversity: Optional[float] = None
    auc: Optional[float] = None
    eer: Optional[float] = None
    detection_rate: Optional[float] = None
    crr: Optional[float] = None
    far: Optional[float] = None
    fid: Optional[float] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name in RATE_FIELDS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"Taux hors de [0, 1]: {name}={value}", field=name)
        if self.fid is not None and self.fid < 0:
            raise InvalidArgumentError(f"FID négative: {self.fid}", field='fid')

    def columns(self) -> List[str]:
        return [*RATE_FIELDS, 'fid']

    def to_row(self) -> List[Optional[float]]:
        return [getattr(self, name) for name in self.columns()]

    def to_dict(self) -> Dict[str, object]:
        payload: Dict[str, object] = {name: getattr(self, name) for name in self.columns()}
        payload['metadata'] = dict(self.metadata)
        return payload


# ---------------------------------------------------------------------------
# Plongements
# ---------------------------------------------------------------------------

def _dtype_of(module: object) -> torch.dtype:
    if isinstance(module, nn.Module):
        for param in module.parameters():
            return param.dtype
    return torch.float32


@torch.no_grad()
def embed_images(recognizer: nn.Module, images: Sequence[FaceImage]) -> torch.Tensor:
    """Plongements normalisés d'une liste d'images, par tranches"""
    if not images:
        raise InvalidArgumentError("Liste d'images vide", field='images')
    dtype = _dtype_of(recognizer)
    if isinstance(recognizer, nn.Module):
        recognizer.eval()
    chunks = []
    for start in range(0, len(images), EMBED_CHUNK):
        pixels = torch.stack([img.pixels.to(dtype) for img in images[start:start + EMBED_CHUNK]])
        chunks.append(recognizer.embed(pixels))
    return torch.cat(chunks)


def pair_similarities(recognizer: nn.Module, pairs: Sequence[Tuple[FaceImage, FaceImage]]) -> np.ndarray:
    """Cosinus R(a)·R(b) pour chaque paire"""
    if not pairs:
        raise InvalidArgumentError("Liste de paires vide", field='pairs')
    left = embed_images(recognizer, [a for a, _ in pairs])
    right = embed_images(recognizer, [b for _, b in pairs])
    return (left * right).sum(dim=1).double().numpy()


def mismatch_rate(similarities: Sequence[float], match_threshold: float) -> float:
    """Part des similarités jugées « identités différentes » (<= seuil)"""
    values = np.asarray(similarities, dtype=np.float64)
    if values.size == 0:
        raise InvalidArgumentError("Aucune similarité", field='pairs')
    return float(np.mean(values <= match_threshold))


# ---------------------------------------------------------------------------
# Anonymat et diversité
# ---------------------------------------------------------------------------

def anonymity_rate(recognizer: nn.Module, pairs: Sequence[Tuple[FaceImage, FaceImage]],
                   match_threshold: float) -> float:
    """
    Taux de non-correspondance entre visages originaux et virtuels.

    Args:
        recognizer: Reconnaisseur d'évaluation
        pairs: Paires (original, virtuel)
        match_threshold: Seuil de correspondance du reconnaisseur

    Returns:
        Fraction des paires avec cos(R(x), R(x_v)) <= seuil
    """
    return mismatch_rate(pair_similarities(recognizer, pairs), match_threshold)


def diversity_rate(recognizer: nn.Module, triples: Sequence[Tuple[FaceImage, UserKey, UserKey]],
                   match_threshold: float, anonymizer: Anonymizer) -> float:
    """
    Taux de non-correspondance entre visages virtuels d'une même image sous deux clés.

    Args:
        recognizer: Reconnaisseur d'évaluation
        triples: Triplets (x, k1, k2) avec k1 != k2
        match_threshold: Seuil de correspondance
        anonymizer: Générateur de visages virtuels (x, k) -> x_v

    Returns:
        Fraction des triplets jugés d'identités différentes
    """
    if not triples:
        raise InvalidArgumentError("Liste de triplets vide", field='triples')
    for _, k1, k2 in triples:
        if k1.bits == k2.bits:
            raise InvalidArgumentError("k1 et k2 doivent être distinctes", field='k2')
    pairs = [(anonymizer(x, k1), anonymizer(x, k2)) for x, k1, k2 in triples]
    return mismatch_rate(pair_similarities(recognizer, pairs), match_threshold)


# ---------------------------------------------------------------------------
# ROC / AUC / EER
# ---------------------------------------------------------------------------

def roc_auc(scores: ScoreSet) -> float:
    """AUC de Mann-Whitney : P(authentique > imposteur), égalités comptées 1/2"""
    scores.require_both()
    genuine = np.asarray(scores.genuine_scores, dtype=np.float64)
    impostor = np.asarray(scores.impostor_scores, dtype=np.float64)
    ranks = rankdata(np.concatenate([genuine, impostor]))
    n_g, n_i = genuine.size, impostor.size
    u = ranks[:n_g].sum() - n_g * (n_g + 1) / 2.0
    return float(u / (n_g * n_i))


def _error_curves(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seuils candidats croissants et (FAR, FRR) associés, décision « accepter si score > t »"""
    genuine = np.sort(np.asarray(scores.genuine_scores, dtype=np.float64))
    impostor = np.sort(np.asarray(scores.impostor_scores, dtype=np.float64))
    all_scores = np.unique(np.concatenate([genuine, impostor]))
    thresholds = np.concatenate([[all_scores[0] - 1.0], all_scores])
    far = 1.0 - np.searchsorted(impostor, thresholds, side='right') / impostor.size
    frr = np.searchsorted(genuine, thresholds, side='right') / genuine.size
    return thresholds, far, frr


def _eer_point(scores: ScoreSet) -> Tuple[float, float]:
    scores.require_both()
    thresholds, far, frr = _error_curves(scores)
    gap = far - frr
    i = int(np.argmax(gap <= 0))
    if gap[i] == 0 or i == 0:
        return float(far[i]), float(thresholds[i])
    alpha = gap[i - 1] / (gap[i - 1] - gap[i])
    eer = far[i - 1] + alpha * (far[i] - far[i - 1])
    threshold = thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(threshold)


def roc_auc_eer(scores: ScoreSet) -> Tuple[float, float]:
    """
    AUC (statistique de rang) et EER (interpolation linéaire entre les deux seuils
    encadrant FAR = FRR).

    Raises:
        InvalidArgumentError: liste de scores vide
    """
    auc = roc_auc(scores)
    eer, _ = _eer_point(scores)
    return auc, eer


def eer_threshold(scores: ScoreSet) -> float:
    """Seuil de décision au point d'égal taux d'erreur"""
    return _eer_point(scores)[1]


# ---------------------------------------------------------------------------
# Décisions, détection, FID
# ---------------------------------------------------------------------------

def crr_far(decisions: Sequence[Tuple[object, bool]]) -> Tuple[float, float]:
    """
    Taux de reconnaissance correcte et de fausse acceptation.

    Args:
        decisions: Couples (décision avec attribut `accept`, vérité « même identité »)

    Returns:
        (CRR, FAR)
    """
    if not decisions:
        raise InvalidArgumentError("Aucune décision", field='decisions')
    genuine = [d.accept for d, same in decisions if same]
    impostor = [d.accept for d, same in decisions if not same]
    if not genuine:
        raise InvalidArgumentError("Aucune paire de même identité : CRR indéfini", field='crr')
    if not impostor:
        raise InvalidArgumentError("Aucune paire d'identités différentes : FAR indéfini", field='far')
    return sum(genuine) / len(genuine), sum(impostor) / len(impostor)


def threshold_sweep(scores: ScoreSet, thresholds: Sequence[float]) -> List[Dict[str, float]]:
    """CRR et FAR pour chaque seuil de décision (acceptation si score > seuil)"""
    scores.require_both()
    genuine = np.asarray(scores.genuine_scores, dtype=np.float64)
    impostor = np.asarray(scores.impostor_scores, dtype=np.float64)
    return [
        {'threshold': float(t), 'crr': float(np.mean(genuine > t)), 'far': float(np.mean(impostor > t))}
        for t in thresholds
    ]


def detection_rate(detector: ToyDetector, images: Sequence[FaceImage]) -> float:
    """Part des images où le détecteur trouve un visage"""
    if not images:
        raise InvalidArgumentError("Liste d'images vide", field='images')
    return sum(bool(detector.detect(img.pixels)) for img in images) / len(images)


def fid(features_a, features_b) -> float:
    """
    Distance de Fréchet entre les gaussiennes ajustées à deux ensembles de caractéristiques.

    d² = ||μ_a - μ_b||² + Tr(Σ_a + Σ_b - 2 (Σ_a Σ_b)^½), covariances régularisées par εI.

    Args:
        features_a: Tableau (n_a, d)
        features_b: Tableau (n_b, d)

    Returns:
        FID (>= 0)
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"Dimensions incompatibles: {a.shape} / {b.shape}", field='features')
    dim = a.shape[1]
    if a.shape[0] <= dim or b.shape[0] <= dim:
        raise InvalidArgumentError(
            f"Il faut plus d'échantillons ({a.shape[0]}, {b.shape[0]}) que de dimensions ({dim})",
            field='features')

    offset = np.eye(dim) * FID_EPS
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False) + offset
    sigma_b = np.cov(b, rowvar=False) + offset

    covmean = linalg.sqrtm(sigma_a.dot(sigma_b))
    if np.iscomplexobj(covmean):
        if not np.allclose(np.diagonal(covmean).imag, 0, atol=1e-3):
            logger.warning(f"FID: composante imaginaire {np.max(np.abs(covmean.imag)):.2e} ignorée")
        covmean = covmean.real

    diff = mu_a - mu_b
    value = diff.dot(diff) + np.trace(sigma_a) + np.trace(sigma_b) - 2 * np.trace(covmean)
    return float(max(value, 0.0))

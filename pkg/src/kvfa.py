"""
Authentification d'identité sur visages virtuels conditionnée par la clé.

Deux chemins d'extraction :
    - sans clé  : I(x)    = normalize(F(x))
    - avec clé  : I(x, k) = normalize(MLP(Cat(normalize(F(x)), s * k))), s = 1/sqrt(L) par défaut
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from backbones import (
    BackboneConfig, FaceImage, IdentityEmbedding, SyntheticFaceDataset, check_image_batch, conv_trunk,
)
from errors import InvalidArgumentError
from hpvfg import (
    HPVFGPipeline, TrainingReport, TupleBatch, cosine_embedding_loss, cosine_schedule, sample_tuple_batch,
    trainable_anchors,
)
from keying import UserKey, encode_key
from utils.logger import logger
from utils.seeding import torch_generator

DEFAULT_THRESHOLD = 0.7


class KVFAModel(nn.Module):
    """
    Reconnaisseur KVFA : extracteur F (4 couches cachées) et projecteur clé.

    Args:
        backbone: Dimensions d'image et de plongement
        key_length: Longueur de clé L acceptée par le projecteur
        width: Largeur de la première convolution de F
        hidden_dim: Largeur de la couche cachée dense de F
        projector_hidden: Couches cachées du projecteur (défaut : 2 x dimension du plongement)
        key_scale: Facteur appliqué à la clé ±1 avant concaténation (défaut : 1/sqrt(L), même norme que F(x))
    """

    component_name = 'kvfa'
    component_version = '1.0'

    def __init__(self, backbone: BackboneConfig, key_length: int, width: int = 32, hidden_dim: int = 128,
                 projector_hidden: Optional[Sequence[int]] = None, key_scale: Optional[float] = None):
        super().__init__()
        if key_length < 1:
            raise InvalidArgumentError(f"Longueur de clé invalide: {key_length}", field='key_length')
        if key_scale is not None and not key_scale > 0:
            raise InvalidArgumentError(f"Échelle de clé invalide: {key_scale}", field='key_scale')
        self.image_shape = backbone.image_shape
        self.embedding_dim = backbone.embedding_dim
        self.key_length = int(key_length)
        self.key_scale = float(key_scale) if key_scale is not None else self.key_length ** -0.5
        self.build_config = {
            'key_length': self.key_length, 'width': width, 'hidden_dim': hidden_dim,
            'projector_hidden': list(projector_hidden) if projector_hidden is not None else None,
            'key_scale': self.key_scale,
        }

        trunk, flat = conv_trunk(backbone.channels, width, backbone.image_size)
        self.extractor = nn.Sequential(
            trunk,
            nn.Linear(flat, hidden_dim), nn.SiLU(),
            nn.Linear(hidden_dim, self.embedding_dim),
        )

        hidden = tuple(projector_hidden) if projector_hidden is not None else (self.embedding_dim,) * 2
        dims = [self.embedding_dim + self.key_length, *hidden, self.embedding_dim]
        layers: List[nn.Module] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(d_in, d_out))
            if i < len(dims) - 2:
                layers.append(nn.SiLU())
        self.projector = nn.Sequential(*layers)

    def extract_batch(self, pixels: torch.Tensor) -> torch.Tensor:
        check_image_batch(pixels, self.image_shape, 'kvfa')
        return F.normalize(self.extractor(pixels), dim=1)

    def extract_with_key_batch(self, pixels: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        if keys.dim() != 2 or keys.shape[1] != self.key_length:
            raise InvalidArgumentError(
                f"Clé de {keys.shape[-1]} bits, KVFA attend {self.key_length} bits", field='key')
        features = self.extract_batch(pixels)
        scaled = keys.to(features.dtype) * self.key_scale
        return F.normalize(self.projector(torch.cat([features, scaled], dim=1)), dim=1)

    def forward(self, pixels: torch.Tensor, keys: Optional[torch.Tensor] = None) -> torch.Tensor:
        if keys is None:
            return self.extract_batch(pixels)
        return self.extract_with_key_batch(pixels, keys)


class AuthMode(Enum):
    NO_KEY = 'no-key'
    WITH_KEY = 'with-key'


SCENARIOS = ('S1', 'S2', 'S3', 'S4')


@dataclass(frozen=True)
class AuthDecision:
    """Décision d'authentification ; accept vaut similarity > threshold (strict)"""
    similarity: float
    threshold: float
    accept: bool
    mode: AuthMode
    scenario_tag: Optional[str] = None

    def __post_init__(self):
        if self.accept != (self.similarity > self.threshold):
            raise InvalidArgumentError("Décision incohérente avec la similarité et le seuil", field='accept')
        if self.scenario_tag is not None and self.scenario_tag not in SCENARIOS:
            raise InvalidArgumentError(f"Scénario inconnu: {self.scenario_tag}", field='scenario')

    @classmethod
    def decide(cls, similarity: float, threshold: float = DEFAULT_THRESHOLD, mode: AuthMode = AuthMode.WITH_KEY,
               scenario_tag: Optional[str] = None) -> 'AuthDecision':
        return cls(float(similarity), float(threshold), float(similarity) > float(threshold), mode, scenario_tag)

    def to_dict(self) -> Dict[str, object]:
        return {
            'similarity': self.similarity,
            'threshold': self.threshold,
            'accept': self.accept,
            'mode': self.mode.value,
            'scenario': self.scenario_tag,
        }


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def extract(model: KVFAModel, x: FaceImage) -> IdentityEmbedding:
    """I(x) : chemin sans clé"""
    pixels = x.pixels.to(_model_dtype(model)).unsqueeze(0)
    return IdentityEmbedding(values=model.eval().extract_batch(pixels)[0], normalized=True)


@torch.no_grad()
def extract_with_key(model: KVFAModel, x_v: FaceImage, k: UserKey) -> IdentityEmbedding:
    """I(x_v, k) : chemin avec clé"""
    if k.length != model.key_length:
        raise InvalidArgumentError(f"Clé de {k.length} bits, KVFA attend {model.key_length} bits", field='key')
    dtype = _model_dtype(model)
    keys = encode_key(k, dtype).values.unsqueeze(0)
    embedding = model.eval().extract_with_key_batch(x_v.pixels.to(dtype).unsqueeze(0), keys)[0]
    return IdentityEmbedding(values=embedding, normalized=True)


def authenticate(model: KVFAModel, x_reference: FaceImage, x_v: FaceImage, k: Optional[UserKey] = None,
                 threshold: float = DEFAULT_THRESHOLD, scenario_tag: Optional[str] = None) -> AuthDecision:
    """
    Compare le visage de référence au visage virtuel, avec ou sans clé.

    Returns:
        Décision (acceptée si la similarité dépasse strictement le seuil)
    """
    reference = extract(model, x_reference)
    if k is None:
        query, mode = extract(model, x_v), AuthMode.NO_KEY
    else:
        query, mode = extract_with_key(model, x_v, k), AuthMode.WITH_KEY
    similarity = float(reference.values @ query.values)
    return AuthDecision.decide(similarity, threshold, mode, scenario_tag)


# ---------------------------------------------------------------------------
# Pertes
# ---------------------------------------------------------------------------

@dataclass
class KVFAWeights:
    """Poids des cinq termes ; L_tot1 regroupe les pmis, L_tot2 les per"""
    pmis1: float = 1.0
    pmis2: float = 1.0
    pmis3: float = 1.0
    per1: float = 1.0
    per2: float = 1.0
    margin: float = 0.0

    TOT1 = ('pmis1', 'pmis2', 'pmis3')
    TOT2 = ('per1', 'per2')
    TERMS = TOT1 + TOT2

    def __post_init__(self):
        values = [getattr(self, t) for t in self.TERMS]
        if any(v < 0 for v in values):
            raise InvalidArgumentError("Les poids de perte sont positifs ou nuls", field='weights')
        if not any(v > 0 for v in values):
            raise InvalidArgumentError("Au moins un poids de perte doit être > 0", field='weights')
        if not -1.0 <= self.margin <= 1.0:
            raise InvalidArgumentError(f"Marge hors de [-1, 1]: {self.margin}", field='margin')

    def with_ablation(self, ablate: Sequence[str]) -> 'KVFAWeights':
        """Copie sans les termes listés ; 'tot1' et 'tot2' retirent un groupe entier"""
        removed = set()
        for name in ablate:
            if name == 'tot1':
                removed.update(self.TOT1)
            elif name == 'tot2':
                removed.update(self.TOT2)
            elif name in self.TERMS:
                removed.add(name)
            else:
                raise InvalidArgumentError(f"Terme d'ablation inconnu: {name}", field='ablate')
        values = {t: (0.0 if t in removed else getattr(self, t)) for t in self.TERMS}
        return KVFAWeights(margin=self.margin, **values)


@torch.no_grad()
def _virtual(pipeline: HPVFGPipeline, x: torch.Tensor, pose: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return pipeline.virtual_batch(x, pose, k)[0]


def loss_pmis1(model: KVFAModel, pipeline: HPVFGPipeline, x1: torch.Tensor, x1_pose: torch.Tensor,
               k1: torch.Tensor, margin: float = 0.0) -> torch.Tensor:
    """Sans clé, le visage virtuel ne doit pas être reconnu comme l'original"""
    virtual = _virtual(pipeline, x1, x1_pose, k1)
    return cosine_embedding_loss(model.extract_batch(virtual), model.extract_batch(x1), -1, margin).mean()


def loss_pmis2(model: KVFAModel, pipeline: HPVFGPipeline, batch: TupleBatch,
               margin: float = 0.0) -> torch.Tensor:
    """Avec une mauvaise clé, le visage virtuel ne doit pas être reconnu comme l'original"""
    batch.check_distinct_keys()
    virtual = _virtual(pipeline, batch.x1, batch.x1_pose, batch.k1)
    query = model.extract_with_key_batch(virtual, batch.k2)
    return cosine_embedding_loss(query, model.extract_batch(batch.x1), -1, margin).mean()


def loss_pmis3(model: KVFAModel, pipeline: HPVFGPipeline, batch: TupleBatch,
               margin: float = 0.0) -> torch.Tensor:
    """Identités différentes, même clé correcte : identités authentifiées différentes"""
    batch.check_different_identity()
    vx = model.extract_with_key_batch(_virtual(pipeline, batch.x1, batch.x1_pose, batch.k1), batch.k1)
    vy = model.extract_with_key_batch(_virtual(pipeline, batch.y, batch.y_pose, batch.k1), batch.k1)
    return cosine_embedding_loss(vx, vy, -1, margin).mean()


def loss_per1(model: KVFAModel, pipeline: HPVFGPipeline, x1: torch.Tensor, x1_pose: torch.Tensor,
              k1: torch.Tensor) -> torch.Tensor:
    """Avec la bonne clé, le visage virtuel est reconnu comme l'original"""
    query = model.extract_with_key_batch(_virtual(pipeline, x1, x1_pose, k1), k1)
    return cosine_embedding_loss(query, model.extract_batch(x1), 1).mean()


def loss_per2(model: KVFAModel, pipeline: HPVFGPipeline, batch: TupleBatch) -> torch.Tensor:
    """Deux visages virtuels d'une même identité et d'une même clé : même identité authentifiée"""
    batch.check_same_identity()
    v1 = model.extract_with_key_batch(_virtual(pipeline, batch.x1, batch.x1_pose, batch.k1), batch.k1)
    v2 = model.extract_with_key_batch(_virtual(pipeline, batch.x2, batch.x2_pose, batch.k1), batch.k1)
    return cosine_embedding_loss(v1, v2, 1).mean()


def kvfa_loss_terms(model: KVFAModel, pipeline: HPVFGPipeline, batch: TupleBatch,
                    margin: float = 0.0) -> Dict[str, torch.Tensor]:
    """Les cinq termes moyennés sur le lot ; visages virtuels générés une seule fois"""
    batch.require('x1', 'x1_pose', 'x2', 'x2_pose', 'y', 'y_pose', 'k1', 'k2')
    batch.check_same_identity()
    batch.check_different_identity()
    batch.check_distinct_keys()

    b = batch.size
    pixels = torch.cat([batch.x1, batch.x2, batch.y])
    poses = torch.cat([batch.x1_pose, batch.x2_pose, batch.y_pose])
    virtual = _virtual(pipeline, pixels, poses, torch.cat([batch.k1, batch.k1, batch.k1]))

    no_key = model.extract_batch(torch.cat([batch.x1, virtual[:b]]))
    original, v11_plain = no_key[:b], no_key[b:]
    with_key = model.extract_with_key_batch(torch.cat([virtual, virtual[:b]]),
                                            torch.cat([batch.k1, batch.k1, batch.k1, batch.k2]))
    v11, v21, vy1, v11_wrong = with_key[:b], with_key[b:2 * b], with_key[2 * b:3 * b], with_key[3 * b:]

    return {
        'pmis1': cosine_embedding_loss(v11_plain, original, -1, margin).mean(),
        'pmis2': cosine_embedding_loss(v11_wrong, original, -1, margin).mean(),
        'pmis3': cosine_embedding_loss(v11, vy1, -1, margin).mean(),
        'per1': cosine_embedding_loss(v11, original, 1).mean(),
        'per2': cosine_embedding_loss(v11, v21, 1).mean(),
    }


def loss_total_kvfa(weights: KVFAWeights, model: KVFAModel, pipeline: HPVFGPipeline,
                    batch: TupleBatch) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    L_tot = L_tot1 + L_tot2.

    Returns:
        (perte totale, termes individuels plus tot1 et tot2)
    """
    terms = kvfa_loss_terms(model, pipeline, batch, weights.margin)
    tot1 = sum(getattr(weights, name) * terms[name] for name in KVFAWeights.TOT1)
    tot2 = sum(getattr(weights, name) * terms[name] for name in KVFAWeights.TOT2)
    terms = dict(terms, tot1=tot1, tot2=tot2)
    return tot1 + tot2, terms


# ---------------------------------------------------------------------------
# Entraînement
# ---------------------------------------------------------------------------

KVFA_REPORT_COLUMNS = ('epoch', 'L_pmis1', 'L_pmis2', 'L_pmis3', 'L_per1', 'L_per2', 'L_tot')


@dataclass
class KVFATrainConfig:
    """Hyper-paramètres d'entraînement de KVFA (valeurs par défaut de la méthode)"""
    epochs: int = 10
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2
    key_length: int = 128
    weights: KVFAWeights = field(default_factory=KVFAWeights)
    ablate: Tuple[str, ...] = ()
    width: int = 32
    hidden_dim: int = 128
    projector_hidden: Optional[Tuple[int, ...]] = None
    key_scale: Optional[float] = None
    threshold: float = DEFAULT_THRESHOLD
    max_steps_per_epoch: Optional[int] = None
    lr_min: Optional[float] = None
    seed: int = 42


def build_kvfa_model(backbone: BackboneConfig, config: KVFATrainConfig) -> KVFAModel:
    return KVFAModel(backbone, config.key_length, config.width, config.hidden_dim, config.projector_hidden,
                     config.key_scale)


def train_kvfa(model: KVFAModel, pipeline: Optional[HPVFGPipeline], dataset: SyntheticFaceDataset,
               config: KVFATrainConfig) -> Tuple[KVFAModel, TrainingReport]:
    """
    Entraîne KVFA sur les visages virtuels d'un pipeline HPVFG gelé.

    Args:
        model: Modèle à entraîner (modifié en place)
        pipeline: Pipeline HPVFG entraîné
        dataset: Jeu étiqueté
        config: Hyper-paramètres

    Returns:
        (modèle entraîné, rapport par époque)
    """
    if pipeline is None:
        raise InvalidArgumentError("train_kvfa exige un pipeline HPVFG entraîné", field='hpvfg')
    if not model.key_length == pipeline.key_length == config.key_length:
        raise InvalidArgumentError(
            f"Longueurs de clé incohérentes: KVFA {model.key_length}, HPVFG {pipeline.key_length}, "
            f"configuration {config.key_length}", field='key_length')
    anchors = trainable_anchors(dataset)
    weights = config.weights.with_ablation(config.ablate)

    pipeline.freeze(include_projector=True)
    model.train()
    for param in model.parameters():
        param.requires_grad_(True)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2))
    scheduler = cosine_schedule(optimizer, config.epochs, config.learning_rate, config.lr_min)
    generator = torch_generator(config.seed)
    dtype = _model_dtype(model)
    report = TrainingReport(component='kvfa', columns=KVFA_REPORT_COLUMNS)

    logger.info(f"Entraînement KVFA: {len(anchors)} ancres, L={config.key_length}, "
                f"{config.epochs} époques, lr={config.learning_rate}"
                + (f" -> {config.lr_min} (cosinus)" if config.lr_min is not None else ""))
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(len(anchors), generator=generator).tolist()
        sums = {name: 0.0 for name in (*KVFAWeights.TERMS, 'tot')}
        seen = 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            if config.max_steps_per_epoch is not None and step >= config.max_steps_per_epoch:
                break
            batch_anchors = [anchors[i] for i in order[start:start + config.batch_size]]
            batch = sample_tuple_batch(dataset, batch_anchors, config.key_length, generator).to(dtype)

            total, terms = loss_total_kvfa(weights, model, pipeline, batch)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            n = batch.size
            seen += n
            sums['tot'] += total.item() * n
            for name in KVFAWeights.TERMS:
                sums[name] += terms[name].item() * n

        means = {f"L_{name}": sums[name] / max(seen, 1) for name in sums}
        report.add_epoch(epoch, means)
        logger.info(f"KVFA époque {epoch}/{config.epochs}: " +
                    ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if scheduler is not None:
            scheduler.step()

    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    if config.epochs >= 2 and not report.decreased:
        logger.warning("KVFA: la perte totale n'a pas diminué entre la première et la dernière époque")
    logger.success(f"Modèle KVFA entraîné (L={config.key_length})")
    return model, report

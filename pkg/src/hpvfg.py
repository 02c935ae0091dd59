"""
Génération de visages virtuels pilotée par clé avec préservation de la posture.

Chaîne : x -> E -> z -> P(z, k) -> z' -> M -> z+ -> G -> x' -> G_f(x', x) -> x_v.
Seul le projecteur P est entraîné ; E, M, G et R restent gelés.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from backbones import (
    LATENT_DIM, N_STYLES, BackboneBundle, ExtendedLatent, FaceImage, LatentVector,
    PoseAngles, SyntheticFaceDataset, TRAIN, check_image_batch, IdentityEmbedding,
)
from errors import InvalidArgumentError, InvalidStateError
from keying import (
    UserKey, encode_key, keygen, sample_distinct_key_vectors, sample_key_vectors,
)
from utils.logger import logger
from utils.seeding import torch_generator

NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# Réseaux
# ---------------------------------------------------------------------------

class ProjectorHPVFG(nn.Module):
    """Projecteur P : concaténation (z, k) puis MLP (512 + L) -> 512"""

    component_name = 'projector'
    component_version = '1.0'

    def __init__(self, key_length: int, hidden_widths: Sequence[int] = (512, 512)):
        super().__init__()
        if key_length < 1:
            raise InvalidArgumentError(f"Longueur de clé invalide: {key_length}", field='key_length')
        self.key_length = int(key_length)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)

        dims = [LATENT_DIM + self.key_length, *self.hidden_widths, LATENT_DIM]
        layers: List[nn.Module] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(d_in, d_out))
            if i < len(dims) - 2:
                layers.append(nn.SiLU())
        self.mlp = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != LATENT_DIM:
            raise InvalidArgumentError(f"Le projecteur attend (B, {LATENT_DIM}), reçu {tuple(z.shape)}",
                                       field='z')
        if keys.dim() != 2 or keys.shape[1] != self.key_length or keys.shape[0] != z.shape[0]:
            raise InvalidArgumentError(
                f"Clés de forme {tuple(keys.shape)} incompatibles avec L={self.key_length}", field='key')
        return self.mlp(torch.cat([z, keys.to(z.dtype)], dim=1))


class MappingNetwork(nn.Module):
    """Réseau de mapping M : 512 -> 18 x 512 (MLP partagé puis affinité propre à chaque ligne)"""

    component_name = 'mapping'
    component_version = '1.0'

    def __init__(self, n_layers: int = 2):
        super().__init__()
        self.n_layers = int(n_layers)
        layers: List[nn.Module] = []
        for _ in range(n_layers):
            layers += [nn.Linear(LATENT_DIM, LATENT_DIM), nn.SiLU()]
        self.mlp = nn.Sequential(*layers)
        self.row_scale = nn.Parameter(torch.randn(N_STYLES, LATENT_DIM) * 0.1)
        self.row_shift = nn.Parameter(torch.randn(N_STYLES, LATENT_DIM) * 0.1)

    def forward(self, zprime: torch.Tensor) -> torch.Tensor:
        if zprime.dim() != 2 or zprime.shape[1] != LATENT_DIM:
            raise InvalidArgumentError(
                f"Le mapping attend (B, {LATENT_DIM}), reçu {tuple(zprime.shape)}", field='zprime')
        w = self.mlp(zprime)
        return w[:, None, :] * (1 + self.row_scale) + self.row_shift


@dataclass
class HPVFGWeights:
    """Poids de la perte totale et marge de la perte cosinus"""
    ano: float = 0.4
    syn: float = 1.0
    div: float = 1.0
    dif: float = 1.0
    margin: float = 0.0

    TERMS = ('ano', 'syn', 'div', 'dif')

    def __post_init__(self):
        values = [getattr(self, t) for t in self.TERMS]
        if any(v < 0 for v in values):
            raise InvalidArgumentError("Les poids de perte sont positifs ou nuls", field='weights')
        if not any(v > 0 for v in values):
            raise InvalidArgumentError("Au moins un poids de perte doit être > 0", field='weights')
        if not -1.0 <= self.margin <= 1.0:
            raise InvalidArgumentError(f"Marge hors de [-1, 1]: {self.margin}", field='margin')

    def with_ablation(self, ablate: Sequence[str]) -> 'HPVFGWeights':
        """Copie avec les termes listés mis à zéro"""
        unknown = set(ablate) - set(self.TERMS)
        if unknown:
            raise InvalidArgumentError(f"Termes d'ablation inconnus: {sorted(unknown)}", field='ablate')
        values = {t: (0.0 if t in ablate else getattr(self, t)) for t in self.TERMS}
        return HPVFGWeights(margin=self.margin, **values)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

class HPVFGPipeline:
    """
    Pipeline de génération E -> P -> M -> G -> G_f.

    Args:
        bundle: Composants (E, R, G, G_f, D)
        projector: Projecteur conditionné par la clé
        mapping: Réseau de mapping
        use_pose_correction: False reproduit l'ablation sans G_f (visage de face)
    """

    def __init__(self, bundle: BackboneBundle, projector: ProjectorHPVFG, mapping: MappingNetwork,
                 use_pose_correction: bool = True):
        self.bundle = bundle
        self.projector = projector
        self.mapping = mapping
        self.use_pose_correction = use_pose_correction

    @property
    def key_length(self) -> int:
        return self.projector.key_length

    @property
    def dtype(self) -> torch.dtype:
        return next(self.projector.parameters()).dtype

    def frozen_modules(self) -> Dict[str, nn.Module]:
        modules = dict(self.bundle.trainable_modules())
        modules['mapping'] = self.mapping
        return modules

    def freeze(self, include_projector: bool = True):
        """Gèle E, R, G, M (et P si demandé)"""
        self.bundle.freeze()
        modules = list(self.frozen_modules().values())
        if include_projector:
            modules.append(self.projector)
        for module in modules:
            module.eval()
            for param in module.parameters():
                param.requires_grad_(False)

    def virtual_batch(self, pixels: torch.Tensor, poses: torch.Tensor,
                      keys: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Génère un lot de visages virtuels.

        Returns:
            (pixels virtuels, postures virtuelles)
        """
        check_image_batch(pixels, self.bundle.config.image_shape, 'hpvfg')
        if keys.dim() != 2 or keys.shape[1] != self.key_length:
            raise InvalidArgumentError(
                f"Clé de {keys.shape[-1]} bits, le projecteur attend {self.key_length} bits", field='key')
        z = self.bundle.encoder(pixels)
        zprime = self.projector(z, keys)
        zplus = self.mapping(zprime)
        generated = self.bundle.generator(zplus)
        frontal = torch.zeros_like(poses, dtype=generated.dtype)
        if not self.use_pose_correction:
            return generated, frontal
        corrected = self.bundle.pose_module.correct(generated, frontal, poses.to(generated.dtype))
        return corrected, poses

    @torch.no_grad()
    def __call__(self, x: FaceImage, k: UserKey) -> FaceImage:
        return generate_virtual(self.bundle, self.projector, self.mapping, x, k,
                                use_pose_correction=self.use_pose_correction)


@torch.no_grad()
def project(projector: ProjectorHPVFG, z: LatentVector, k: UserKey) -> LatentVector:
    """z' = P(z, k)"""
    if k.length != projector.key_length:
        raise InvalidArgumentError(
            f"Clé de {k.length} bits, le projecteur attend {projector.key_length} bits", field='key')
    dtype = next(projector.parameters()).dtype
    keys = encode_key(k, dtype).values.unsqueeze(0)
    out = projector.eval()(z.values.to(dtype).unsqueeze(0), keys)[0]
    return LatentVector(values=out)


@torch.no_grad()
def map_latent(mapping: MappingNetwork, zprime: LatentVector) -> ExtendedLatent:
    """z+ = M(z')"""
    dtype = next(mapping.parameters()).dtype
    return ExtendedLatent(styles=mapping.eval()(zprime.values.to(dtype).unsqueeze(0))[0])


@torch.no_grad()
def generate_virtual(bundle: BackboneBundle, projector: ProjectorHPVFG, mapping: MappingNetwork,
                     x: FaceImage, k: UserKey, use_pose_correction: bool = True) -> FaceImage:
    """x_v = G_f(G(M(P(E(x), k))), x)"""
    if x.pose_label is None and use_pose_correction:
        raise InvalidArgumentError("La posture de l'image source est requise", field='pose_label')
    if k.length != projector.key_length:
        raise InvalidArgumentError(
            f"Clé de {k.length} bits, le projecteur attend {projector.key_length} bits", field='key')
    pipeline = HPVFGPipeline(bundle, projector, mapping, use_pose_correction)
    dtype = pipeline.dtype
    for module in [*pipeline.frozen_modules().values(), projector]:
        module.eval()
    pixels = x.pixels.to(dtype).unsqueeze(0)
    poses = x.pose_tensor(dtype).unsqueeze(0) if x.pose_label is not None else torch.zeros(1, 3, dtype=dtype)
    keys = encode_key(k, dtype).values.unsqueeze(0)
    virtual, _ = pipeline.virtual_batch(pixels, poses, keys)
    return FaceImage(
        pixels=virtual[0].clamp(0.0, 1.0),
        identity_label=None,
        pose_label=x.pose_label if use_pose_correction else PoseAngles.frontal(),
        expression=x.expression,
    )


@dataclass
class CheckedVirtualFace:
    """Résultat d'une anonymisation contrôlée"""
    image: FaceImage
    key: UserKey
    attempts: int
    similarity: float
    anonymous: bool


@torch.no_grad()
def generate_virtual_checked(pipeline: HPVFGPipeline, eval_recognizer: nn.Module, x: FaceImage,
                             match_threshold: float, max_attempts: int = 5,
                             seed: Optional[int] = None, first_key: Optional[UserKey] = None) -> CheckedVirtualFace:
    """
    Génère un visage virtuel et le révoque (nouvelle clé) tant que le reconnaisseur
    d'évaluation l'associe encore à l'original.

    Args:
        pipeline: Pipeline HPVFG entraîné
        eval_recognizer: Reconnaisseur général d'évaluation
        x: Visage original
        match_threshold: Seuil de correspondance du reconnaisseur
        max_attempts: Nombre maximal de clés essayées
        seed: Graine des clés successives (None : clés cryptographiques)
        first_key: Clé du premier essai (sinon tirée comme les suivantes)

    Returns:
        Dernier visage généré, sa clé et le nombre d'essais
    """
    if max_attempts < 1:
        raise InvalidArgumentError("max_attempts doit être >= 1", field='max_attempts')
    dtype = next(eval_recognizer.parameters()).dtype
    reference = eval_recognizer.eval().embed(x.pixels.to(dtype).unsqueeze(0))[0]

    result = None
    for attempt in range(1, max_attempts + 1):
        if attempt == 1 and first_key is not None:
            key = first_key
        else:
            key = keygen(pipeline.key_length, None if seed is None else seed + attempt)
        virtual = pipeline(x, key)
        similarity = float(reference @ eval_recognizer.embed(virtual.pixels.to(dtype).unsqueeze(0))[0])
        result = CheckedVirtualFace(virtual, key, attempt, similarity, similarity <= match_threshold)
        if result.anonymous:
            return result
        logger.debug(f"Visage virtuel trop proche de l'original (essai {attempt}), nouvelle clé")

    logger.warning(f"Aucune clé anonymisante trouvée en {max_attempts} essais")
    return result


# ---------------------------------------------------------------------------
# Pertes
# ---------------------------------------------------------------------------

def cosine_embedding_loss(f1: torch.Tensor, f2: torch.Tensor, target: int,
                          margin: float = 0.0) -> torch.Tensor:
    """
    Perte cosinus ligne à ligne : 1 - cos si target = +1, max(margin, cos) si target = -1.

    Raises:
        InvalidArgumentError: dimensions différentes, cible invalide ou vecteur de norme nulle
    """
    if f1.shape != f2.shape:
        raise InvalidArgumentError(f"Dimensions différentes: {tuple(f1.shape)} / {tuple(f2.shape)}")
    if target not in (1, -1):
        raise InvalidArgumentError(f"Cible {target} hors de {{+1, -1}}", field='target')
    n1, n2 = f1.norm(dim=-1), f2.norm(dim=-1)
    if bool((n1 < NORM_EPS).any()) or bool((n2 < NORM_EPS).any()):
        raise InvalidArgumentError("Vecteur de norme nulle : cosinus indéfini")
    cos = (f1 * f2).sum(dim=-1) / (n1 * n2)
    if target == 1:
        return 1 - cos
    return torch.clamp(cos, min=margin)


def loss_cosine_embedding(f1: IdentityEmbedding, f2: IdentityEmbedding, l: int, m: float = 0.0) -> float:
    """Perte cosinus entre deux plongements"""
    return float(cosine_embedding_loss(f1.values, f2.values, l, m))


@dataclass
class TupleBatch:
    """
    Lot de tuples d'entraînement : x1 et x2 de même identité, y d'une autre identité,
    k1 et k2 deux clés distinctes. Les identités valent -1 si inconnues.
    """
    x1: Optional[torch.Tensor] = None
    x1_pose: Optional[torch.Tensor] = None
    x1_id: Optional[torch.Tensor] = None
    x2: Optional[torch.Tensor] = None
    x2_pose: Optional[torch.Tensor] = None
    x2_id: Optional[torch.Tensor] = None
    y: Optional[torch.Tensor] = None
    y_pose: Optional[torch.Tensor] = None
    y_id: Optional[torch.Tensor] = None
    k1: Optional[torch.Tensor] = None
    k2: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return int(self.x1.shape[0])

    def require(self, *names: str):
        for name in names:
            if getattr(self, name) is None:
                raise InvalidArgumentError(f"Type de paire manquant dans le lot: {name}", field=name)

    def check_same_identity(self):
        self.require('x1_id', 'x2_id')
        if bool((self.x1_id != self.x2_id).any()):
            raise InvalidArgumentError("x1 et x2 doivent partager la même identité", field='x2')

    def check_different_identity(self):
        self.require('x1_id', 'y_id')
        if bool((self.x1_id == self.y_id).any()):
            raise InvalidArgumentError("x et y doivent être d'identités différentes", field='y')

    def check_distinct_keys(self):
        self.require('k1', 'k2')
        if bool((self.k1 == self.k2).all(dim=1).any()):
            raise InvalidArgumentError("k1 et k2 doivent être distinctes", field='k2')

    def to(self, dtype: torch.dtype) -> 'TupleBatch':
        converted = {}
        for name, value in self.__dict__.items():
            if value is not None and value.is_floating_point():
                value = value.to(dtype)
            converted[name] = value
        return TupleBatch(**converted)


def sample_tuple_batch(dataset: SyntheticFaceDataset, anchors: Sequence[int], key_length: int,
                       generator: torch.Generator, split: str = TRAIN) -> TupleBatch:
    """
    Assemble un lot de tuples (x1, x2, y, k1, k2) autour des ancres données.

    Raises:
        InvalidArgumentError: une ancre n'a pas d'autre image de même identité dans la partition
    """
    groups = dataset.identity_groups(split)
    pool = dataset.indices(split)
    x2_idx, y_idx = [], []
    for a in anchors:
        ident = int(dataset.identities[a])
        mates = [i for i in groups.get(ident, []) if i != a]
        if not mates:
            raise InvalidArgumentError(f"L'image {a} n'a pas de seconde image de son identité", field='anchors')
        x2_idx.append(mates[int(torch.randint(len(mates), (1,), generator=generator))])
        while True:
            candidate = int(pool[int(torch.randint(len(pool), (1,), generator=generator))])
            if int(dataset.identities[candidate]) != ident:
                y_idx.append(candidate)
                break

    a_idx = torch.tensor(list(anchors), dtype=torch.long)
    x2_t, y_t = torch.tensor(x2_idx, dtype=torch.long), torch.tensor(y_idx, dtype=torch.long)
    k1 = sample_key_vectors(len(anchors), key_length, generator)
    k2 = sample_distinct_key_vectors(k1, generator)
    return TupleBatch(
        x1=dataset.pixels[a_idx], x1_pose=dataset.poses[a_idx], x1_id=dataset.identities[a_idx],
        x2=dataset.pixels[x2_t], x2_pose=dataset.poses[x2_t], x2_id=dataset.identities[x2_t],
        y=dataset.pixels[y_t], y_pose=dataset.poses[y_t], y_id=dataset.identities[y_t],
        k1=k1, k2=k2,
    )


def trainable_anchors(dataset: SyntheticFaceDataset, split: str = TRAIN) -> List[int]:
    """
    Images de la partition ayant une seconde image de même identité.

    Raises:
        InvalidArgumentError: moins de 2 identités avec au moins 2 images
    """
    groups = {ident: idx for ident, idx in dataset.identity_groups(split).items() if len(idx) >= 2}
    if len(groups) < 2:
        raise InvalidArgumentError(
            f"Jeu trop petit: il faut au moins 2 identités avec 2 images en '{split}'", field='dataset')
    return sorted(i for idx in groups.values() for i in idx)


def _virtual(pipeline: HPVFGPipeline, x: torch.Tensor, pose: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return pipeline.virtual_batch(x, pose, k)[0]


def loss_ano(recognizer: nn.Module, pipeline: HPVFGPipeline, x1: torch.Tensor, x1_pose: torch.Tensor,
             k1: torch.Tensor, margin: float = 0.0) -> torch.Tensor:
    """L_ano : éloigner l'identité du visage virtuel de celle de l'original"""
    virtual = recognizer.embed(_virtual(pipeline, x1, x1_pose, k1))
    return cosine_embedding_loss(virtual, recognizer.embed(x1), -1, margin).mean()


def loss_syn(recognizer: nn.Module, pipeline: HPVFGPipeline, batch: TupleBatch) -> torch.Tensor:
    """L_syn : même identité, même clé -> même identité virtuelle"""
    batch.check_same_identity()
    v1 = recognizer.embed(_virtual(pipeline, batch.x1, batch.x1_pose, batch.k1))
    v2 = recognizer.embed(_virtual(pipeline, batch.x2, batch.x2_pose, batch.k1))
    return cosine_embedding_loss(v1, v2, 1).mean()


def loss_div(recognizer: nn.Module, pipeline: HPVFGPipeline, batch: TupleBatch,
             margin: float = 0.0) -> torch.Tensor:
    """L_div : même image, clés différentes -> identités virtuelles différentes"""
    batch.check_distinct_keys()
    v1 = recognizer.embed(_virtual(pipeline, batch.x1, batch.x1_pose, batch.k1))
    v2 = recognizer.embed(_virtual(pipeline, batch.x1, batch.x1_pose, batch.k2))
    return cosine_embedding_loss(v1, v2, -1, margin).mean()


def loss_dif(recognizer: nn.Module, pipeline: HPVFGPipeline, batch: TupleBatch,
             margin: float = 0.0) -> torch.Tensor:
    """L_dif : identités différentes, même clé -> identités virtuelles différentes"""
    batch.check_different_identity()
    v1 = recognizer.embed(_virtual(pipeline, batch.x1, batch.x1_pose, batch.k1))
    v2 = recognizer.embed(_virtual(pipeline, batch.y, batch.y_pose, batch.k1))
    return cosine_embedding_loss(v1, v2, -1, margin).mean()


def hpvfg_loss_terms(recognizer: nn.Module, pipeline: HPVFGPipeline, batch: TupleBatch,
                     margin: float = 0.0) -> Dict[str, torch.Tensor]:
    """Les quatre termes moyennés sur le lot, en une seule passe dans le pipeline"""
    batch.require('x1', 'x1_pose', 'x2', 'x2_pose', 'y', 'y_pose', 'k1', 'k2')
    batch.check_same_identity()
    batch.check_different_identity()
    batch.check_distinct_keys()

    b = batch.size
    pixels = torch.cat([batch.x1, batch.x2, batch.x1, batch.y])
    poses = torch.cat([batch.x1_pose, batch.x2_pose, batch.x1_pose, batch.y_pose])
    keys = torch.cat([batch.k1, batch.k1, batch.k2, batch.k1])
    embeddings = recognizer.embed(pipeline.virtual_batch(pixels, poses, keys)[0])
    v11, v21, v12, vy1 = embeddings[:b], embeddings[b:2 * b], embeddings[2 * b:3 * b], embeddings[3 * b:]
    original = recognizer.embed(batch.x1)

    return {
        'ano': cosine_embedding_loss(v11, original, -1, margin).mean(),
        'syn': cosine_embedding_loss(v11, v21, 1).mean(),
        'div': cosine_embedding_loss(v11, v12, -1, margin).mean(),
        'dif': cosine_embedding_loss(v11, vy1, -1, margin).mean(),
    }


def loss_total_hpvfg(weights: HPVFGWeights, recognizer: nn.Module, pipeline: HPVFGPipeline,
                     batch: TupleBatch) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    L_tot = λ_ano L_ano + λ_syn L_syn + λ_div L_div + λ_dif L_dif.

    Returns:
        (perte totale, termes individuels)
    """
    terms = hpvfg_loss_terms(recognizer, pipeline, batch, weights.margin)
    total = sum(getattr(weights, name) * value for name, value in terms.items())
    return total, terms


# ---------------------------------------------------------------------------
# Entraînement
# ---------------------------------------------------------------------------

@dataclass
class TrainingReport:
    """Composantes de perte moyennes par époque"""
    component: str
    columns: Tuple[str, ...]
    rows: List[Dict[str, float]] = field(default_factory=list)

    def add_epoch(self, epoch: int, values: Dict[str, float]):
        row = {'epoch': epoch}
        row.update({c: float(values[c]) for c in self.columns if c != 'epoch'})
        self.rows.append(row)

    def header(self) -> List[str]:
        return list(self.columns)

    def as_rows(self) -> List[List[float]]:
        return [[row[c] for c in self.columns] for row in self.rows]

    @property
    def decreased(self) -> bool:
        return len(self.rows) >= 2 and self.rows[-1]['L_tot'] < self.rows[0]['L_tot']

    def to_dict(self) -> Dict[str, object]:
        return {'component': self.component, 'columns': list(self.columns), 'rows': self.rows}


def cosine_schedule(optimizer: torch.optim.Optimizer, epochs: int, learning_rate: float,
                    lr_min: Optional[float]) -> Optional[torch.optim.lr_scheduler.CosineAnnealingLR]:
    """Décroissance cosinus du pas par époque jusqu'à `lr_min` ; None garde un pas constant"""
    if lr_min is None:
        return None
    if not 0 <= lr_min <= learning_rate:
        raise InvalidArgumentError(f"lr_min doit être dans [0, {learning_rate}], reçu {lr_min}", field='lr_min')
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1), eta_min=lr_min)


HPVFG_REPORT_COLUMNS = ('epoch', 'L_ano', 'L_syn', 'L_div', 'L_dif', 'L_tot')


@dataclass
class HPVFGTrainConfig:
    """Hyper-paramètres d'entraînement du projecteur (valeurs par défaut de la méthode)"""
    epochs: int = 10
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2
    key_length: int = 128
    weights: HPVFGWeights = field(default_factory=HPVFGWeights)
    ablate: Tuple[str, ...] = ()
    projector_hidden: Tuple[int, ...] = (512, 512)
    lr_min: Optional[float] = None
    use_pose_correction: bool = True
    max_steps_per_epoch: Optional[int] = None
    seed: int = 42


def train_hpvfg(bundle: BackboneBundle, projector: ProjectorHPVFG, mapping: MappingNetwork,
                dataset: SyntheticFaceDataset, config: HPVFGTrainConfig,
                recognizer: Optional[nn.Module] = None) -> Tuple[ProjectorHPVFG, TrainingReport]:
    """
    Entraîne le projecteur P, tous les autres composants gelés.

    Args:
        bundle: Composants pré-entraînés
        projector: Projecteur à entraîner (modifié en place)
        mapping: Réseau de mapping pré-entraîné
        dataset: Jeu de visages étiquetés
        config: Hyper-paramètres
        recognizer: Reconnaisseur des pertes (par défaut bundle.recognizer)

    Returns:
        (projecteur entraîné, rapport par époque)
    """
    if projector.key_length != config.key_length:
        raise InvalidArgumentError(
            f"Projecteur pour {projector.key_length} bits, configuration pour {config.key_length} bits",
            field='key_length')
    anchors = trainable_anchors(dataset)
    recognizer = recognizer or bundle.recognizer
    weights = config.weights.with_ablation(config.ablate)

    pipeline = HPVFGPipeline(bundle, projector, mapping, config.use_pose_correction)
    pipeline.freeze(include_projector=False)
    recognizer.eval()
    for param in recognizer.parameters():
        param.requires_grad_(False)
    projector.train()
    for param in projector.parameters():
        param.requires_grad_(True)

    optimizer = torch.optim.Adam(projector.parameters(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2))
    scheduler = cosine_schedule(optimizer, config.epochs, config.learning_rate, config.lr_min)
    generator = torch_generator(config.seed)
    dtype = pipeline.dtype
    report = TrainingReport(component='hpvfg', columns=HPVFG_REPORT_COLUMNS)

    logger.info(f"Entraînement HPVFG: {len(anchors)} ancres, L={config.key_length}, "
                f"{config.epochs} époques, lr={config.learning_rate}"
                + (f" -> {config.lr_min} (cosinus)" if config.lr_min is not None else ""))
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(len(anchors), generator=generator).tolist()
        sums = {name: 0.0 for name in (*HPVFGWeights.TERMS, 'tot')}
        seen = 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            if config.max_steps_per_epoch is not None and step >= config.max_steps_per_epoch:
                break
            batch_anchors = [anchors[i] for i in order[start:start + config.batch_size]]
            batch = sample_tuple_batch(dataset, batch_anchors, config.key_length, generator).to(dtype)

            total, terms = loss_total_hpvfg(weights, recognizer, pipeline, batch)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            n = batch.size
            seen += n
            sums['tot'] += total.item() * n
            for name, value in terms.items():
                sums[name] += value.item() * n

        means = {f"L_{name}": sums[name] / max(seen, 1) for name in sums}
        report.add_epoch(epoch, means)
        logger.info(f"HPVFG époque {epoch}/{config.epochs}: " +
                    ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if scheduler is not None:
            scheduler.step()

    projector.eval()
    for param in projector.parameters():
        param.requires_grad_(False)
    if config.epochs >= 2 and not report.decreased:
        logger.warning("HPVFG: la perte totale n'a pas diminué entre la première et la dernière époque")
    logger.success(f"Projecteur HPVFG entraîné (L={config.key_length})")
    return projector, report


def require_trained(pipeline: Optional[HPVFGPipeline]) -> HPVFGPipeline:
    """Vérifie qu'un pipeline HPVFG est fourni"""
    if pipeline is None:
        raise InvalidStateError("Aucun pipeline HPVFG entraîné n'est chargé", field='hpvfg')
    return pipeline

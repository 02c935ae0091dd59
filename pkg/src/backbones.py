"""
Interfaces interchangeables des composants E (encodeur), R (reconnaisseur),
G (générateur), G_f (correction de posture) et D (détecteur), leurs
implémentations jouets entraînables, et le jeu de visages synthétiques étiquetés.

Les composants jouets respectent les mêmes contrats de dimension que les
composants réels : E -> 512, G <- 18 x 512, R -> plongement normalisé.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import InvalidArgumentError, NotFoundError
from utils.logger import logger

LATENT_DIM = 512
N_STYLES = 18
POSE_LIMIT_DEG = 90.0
FRONTAL_POSE = (0.0, 0.0, 0.0)

# Amplitude de translation (coordonnées normalisées) associée à un lacet/tangage de 90°
POSE_SHIFT = 0.35
MIN_FORESHORTENING = 0.2


# ---------------------------------------------------------------------------
# Types du domaine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseAngles:
    """Angles d'Euler de la tête, en degrés"""
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        for name in ('yaw', 'pitch', 'roll'):
            value = getattr(self, name)
            if not math.isfinite(value) or abs(value) > POSE_LIMIT_DEG:
                raise InvalidArgumentError(f"Angle {name}={value} hors de [-90, 90]", field=name)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.yaw, self.pitch, self.roll)

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.as_tuple(), dtype=dtype)

    @classmethod
    def from_tensor(cls, values: torch.Tensor) -> 'PoseAngles':
        yaw, pitch, roll = (float(v) for v in values.detach().cpu().tolist())
        return cls(yaw=yaw, pitch=pitch, roll=roll)

    @classmethod
    def frontal(cls) -> 'PoseAngles':
        return cls(*FRONTAL_POSE)


@dataclass
class FaceImage:
    """Image de visage C x H x W à valeurs dans [0, 1], étiquettes optionnelles"""
    pixels: torch.Tensor
    identity_label: Optional[int] = None
    pose_label: Optional[PoseAngles] = None
    expression: Optional[float] = None

    def __post_init__(self):
        if self.pixels.dim() != 3:
            raise InvalidArgumentError(
                f"Une image a 3 dimensions (C, H, W), reçu {tuple(self.pixels.shape)}", field='pixels')
        if self.pixels.numel() and (float(self.pixels.min()) < 0.0 or float(self.pixels.max()) > 1.0):
            raise InvalidArgumentError("Pixels hors de [0, 1]", field='pixels')

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape)

    def pose_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        if self.pose_label is None:
            raise InvalidArgumentError("Image sans étiquette de posture", field='pose_label')
        return self.pose_label.to_tensor(dtype)


@dataclass
class LatentVector:
    """Vecteur latent z de dimension 512"""
    values: torch.Tensor

    def __post_init__(self):
        if tuple(self.values.shape) != (LATENT_DIM,):
            raise InvalidArgumentError(
                f"Un vecteur latent a {LATENT_DIM} dimensions, reçu {tuple(self.values.shape)}",
                field='values')
        if not bool(torch.isfinite(self.values).all()):
            raise InvalidArgumentError("Vecteur latent non fini", field='values')


@dataclass
class ExtendedLatent:
    """Latent étendu z+ : 18 lignes de style de 512 dimensions"""
    styles: torch.Tensor

    def __post_init__(self):
        if tuple(self.styles.shape) != (N_STYLES, LATENT_DIM):
            raise InvalidArgumentError(
                f"Un latent étendu a la forme ({N_STYLES}, {LATENT_DIM}), reçu {tuple(self.styles.shape)}",
                field='styles')


@dataclass
class IdentityEmbedding:
    """Plongement d'identité ; norme L2 unitaire quand `normalized` est vrai"""
    values: torch.Tensor
    normalized: bool = True

    def __post_init__(self):
        if self.values.dim() != 1:
            raise InvalidArgumentError("Un plongement est un vecteur", field='values')
        if self.normalized and abs(float(self.values.norm()) - 1.0) > 1e-5:
            raise InvalidArgumentError("Plongement marqué normalisé mais de norme != 1", field='values')


@dataclass(frozen=True)
class BackboneConfig:
    """Dimensions des composants jouets"""
    image_size: int = 32
    channels: int = 3
    embedding_dim: int = 64
    feature_dim: int = 32
    encoder_width: int = 32
    recognizer_width: int = 32
    generator_width: int = 64
    mapping_layers: int = 2
    detector_variance_floor: float = 1e-3

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def check_image_batch(pixels: torch.Tensor, image_shape: Sequence[int], component: str):
    """Lève InvalidArgumentError si le lot n'a pas la forme (B, C, H, W) attendue"""
    if pixels.dim() != 4 or tuple(pixels.shape[1:]) != tuple(image_shape):
        raise InvalidArgumentError(
            f"{component}: forme d'image {tuple(pixels.shape)} incompatible avec {tuple(image_shape)}",
            field='pixels')


def conv_trunk(channels: int, width: int, image_size: int) -> Tuple[nn.Sequential, int]:
    """Trois convolutions de pas 2 ; renvoie le tronc et la taille aplatie"""
    if image_size % 8 != 0:
        raise InvalidArgumentError(f"image_size doit être multiple de 8, reçu {image_size}",
                                   field='image_size')
    trunk = nn.Sequential(
        nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.SiLU(),
        nn.Flatten(),
    )
    return trunk, 4 * width * (image_size // 8) ** 2


# ---------------------------------------------------------------------------
# Composants jouets
# ---------------------------------------------------------------------------

class ToyEncoder(nn.Module):
    """Encodeur E : image -> latent 512"""

    component_name = 'encoder'
    component_version = '1.0'

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.image_shape = config.image_shape
        self.trunk, flat = conv_trunk(config.channels, config.encoder_width, config.image_size)
        self.head = nn.Linear(flat, LATENT_DIM)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        check_image_batch(pixels, self.image_shape, 'encoder')
        return self.head(self.trunk(pixels))


class ToyRecognizer(nn.Module):
    """Reconnaisseur R : image -> caractéristiques avant-dernières -> plongement"""

    component_name = 'recognizer'
    component_version = '1.0'

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.image_shape = config.image_shape
        self.embedding_dim = config.embedding_dim
        self.trunk, flat = conv_trunk(config.channels, config.recognizer_width, config.image_size)
        self.penultimate = nn.Linear(flat, config.feature_dim)
        self.head = nn.Linear(config.feature_dim, config.embedding_dim)

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Caractéristiques avant-dernières (utilisées pour la FID)"""
        check_image_batch(pixels, self.image_shape, 'recognizer')
        return self.penultimate(self.trunk(pixels))

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.head(F.silu(self.features(pixels)))

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """Plongement normalisé L2 (similarité cosinus = produit scalaire)"""
        return F.normalize(self.forward(pixels), dim=1)


class _ModulatedConv(nn.Module):
    """Convolution modulée par deux lignes de style (échelle et décalage par canal)"""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, activate: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2)
        self.scale = nn.Linear(LATENT_DIM, out_ch)
        self.shift = nn.Linear(LATENT_DIM, out_ch)
        self.activate = activate

    def forward(self, h: torch.Tensor, style_scale: torch.Tensor, style_shift: torch.Tensor) -> torch.Tensor:
        h = self.conv(h)
        h = h * (1 + self.scale(style_scale))[:, :, None, None] + self.shift(style_shift)[:, :, None, None]
        return F.silu(h) if self.activate else h


class ToyGenerator(nn.Module):
    """
    Générateur G : décodeur à suréchantillonnage modulé par les 18 lignes de z+.

    La couche i lit les lignes 2i et 2i+1 (modulo 18). À 32 x 32, les neuf
    couches consomment exactement les 18 lignes. La sortie est un visage de face.
    """

    component_name = 'generator'
    component_version = '1.0'

    def __init__(self, config: BackboneConfig):
        super().__init__()
        n_up = int(round(math.log2(config.image_size / 4)))
        if 4 * 2 ** n_up != config.image_size:
            raise InvalidArgumentError("image_size doit valoir 4 x 2^n", field='image_size')
        self.image_shape = config.image_shape

        widths = [max(8, config.generator_width >> max(0, stage - 1)) for stage in range(n_up + 1)]
        self.const = nn.Parameter(torch.randn(1, widths[0], 4, 4) * 0.5)

        layers, upsample = [], []
        in_ch = widths[0]
        for stage, out_ch in enumerate(widths):
            for j in range(2):
                layers.append(_ModulatedConv(in_ch, out_ch, 3))
                upsample.append(stage > 0 and j == 0)
                in_ch = out_ch
        layers.append(_ModulatedConv(in_ch, config.channels, 1, activate=False))
        upsample.append(False)

        self.layers = nn.ModuleList(layers)
        self.upsample = upsample

    def forward(self, zplus: torch.Tensor) -> torch.Tensor:
        if zplus.dim() != 3 or tuple(zplus.shape[1:]) != (N_STYLES, LATENT_DIM):
            raise InvalidArgumentError(
                f"Le générateur attend (B, {N_STYLES}, {LATENT_DIM}), reçu {tuple(zplus.shape)}",
                field='zplus')
        h = self.const.expand(zplus.shape[0], -1, -1, -1)
        for i, (layer, up) in enumerate(zip(self.layers, self.upsample)):
            if up:
                h = F.interpolate(h, scale_factor=2, mode='bilinear', align_corners=False)
            h = layer(h, zplus[:, (2 * i) % N_STYLES], zplus[:, (2 * i + 1) % N_STYLES])
        return torch.sigmoid(h)


def pose_matrices(poses: torch.Tensor) -> torch.Tensor:
    """
    Transformations affines homogènes (B, 3, 3) : visage de face -> visage posé.

    Le lacet et le tangage raccourcissent et translatent le visage, le roulis le fait tourner.
    """
    rad = torch.deg2rad(poses)
    yaw, pitch, roll = rad[:, 0], rad[:, 1], rad[:, 2]
    sx = torch.cos(yaw).clamp(min=MIN_FORESHORTENING)
    sy = torch.cos(pitch).clamp(min=MIN_FORESHORTENING)
    cr, sr = torch.cos(roll), torch.sin(roll)

    m = torch.zeros(poses.shape[0], 3, 3, dtype=poses.dtype, device=poses.device)
    m[:, 0, 0] = cr * sx
    m[:, 0, 1] = -sr * sy
    m[:, 1, 0] = sr * sx
    m[:, 1, 1] = cr * sy
    m[:, 0, 2] = POSE_SHIFT * torch.sin(yaw)
    m[:, 1, 2] = POSE_SHIFT * torch.sin(pitch)
    m[:, 2, 2] = 1.0
    return m


def warp_between_poses(pixels: torch.Tensor, from_poses: torch.Tensor,
                       to_poses: torch.Tensor) -> torch.Tensor:
    """Ré-échantillonne des visages posés en `from_poses` vers `to_poses` (différentiable)"""
    theta = (pose_matrices(from_poses) @ torch.linalg.inv(pose_matrices(to_poses)))[:, :2, :]
    grid = F.affine_grid(theta, list(pixels.shape), align_corners=False)
    return F.grid_sample(pixels, grid, mode='bilinear', padding_mode='border', align_corners=False)


class ToyPoseModule:
    """
    Module de correction de posture G_f jouet.

    Les images jouets portent leur posture paramétrique : la correction applique la
    transformation affine qui amène le visage virtuel à la posture de l'original,
    et l'étiquette de sortie est exactement celle de l'original.
    """

    component_name = 'pose_module'
    component_version = '1.0'

    def __init__(self, config: BackboneConfig):
        self.image_shape = config.image_shape

    def correct(self, virtual_pixels: torch.Tensor, virtual_poses: torch.Tensor,
                original_poses: torch.Tensor) -> torch.Tensor:
        check_image_batch(virtual_pixels, self.image_shape, 'pose_module')
        return warp_between_poses(virtual_pixels, virtual_poses.to(virtual_pixels.dtype),
                                  original_poses.to(virtual_pixels.dtype))


class ToyDetector:
    """Détecteur jouet : un visage est détecté si la variance des pixels dépasse un plancher"""

    component_name = 'detector'
    component_version = '1.0'

    def __init__(self, config: BackboneConfig):
        self.variance_floor = config.detector_variance_floor

    def detect(self, pixels: torch.Tensor) -> bool:
        return float(pixels.double().var()) > self.variance_floor


@dataclass
class BackboneBundle:
    """Les cinq composants de la génération, plus le reconnaisseur d'évaluation indépendant"""
    config: BackboneConfig
    encoder: ToyEncoder
    recognizer: ToyRecognizer
    generator: ToyGenerator
    pose_module: ToyPoseModule
    detector: ToyDetector
    eval_recognizer: Optional[ToyRecognizer] = None

    def trainable_modules(self) -> Dict[str, nn.Module]:
        modules = {'encoder': self.encoder, 'recognizer': self.recognizer, 'generator': self.generator}
        if self.eval_recognizer is not None:
            modules['eval_recognizer'] = self.eval_recognizer
        return modules

    def freeze(self):
        """Gèle tous les poids (inférence ou entraînement du seul projecteur)"""
        for module in self.trainable_modules().values():
            module.eval()
            for param in module.parameters():
                param.requires_grad_(False)

    def to(self, dtype: torch.dtype) -> 'BackboneBundle':
        for module in self.trainable_modules().values():
            module.to(dtype)
        return self

    def describe(self) -> Dict[str, str]:
        parts = (self.encoder, self.recognizer, self.generator, self.pose_module, self.detector)
        return {p.component_name: p.component_version for p in parts}


def build_toy_bundle(config: BackboneConfig, seed: int) -> BackboneBundle:
    """Construit un ensemble de composants jouets initialisés de façon reproductible"""
    torch.manual_seed(seed)
    encoder = ToyEncoder(config)
    recognizer = ToyRecognizer(config)
    generator = ToyGenerator(config)
    # Reconnaisseur d'évaluation initialisé indépendamment du reconnaisseur d'entraînement
    torch.manual_seed(seed + 1)
    eval_recognizer = ToyRecognizer(config)
    return BackboneBundle(
        config=config,
        encoder=encoder,
        recognizer=recognizer,
        generator=generator,
        pose_module=ToyPoseModule(config),
        detector=ToyDetector(config),
        eval_recognizer=eval_recognizer,
    )


# ---------------------------------------------------------------------------
# Opérations au niveau d'une image
# ---------------------------------------------------------------------------

def _single(image: FaceImage, image_shape: Sequence[int], component: str) -> torch.Tensor:
    if tuple(image.pixels.shape) != tuple(image_shape):
        raise InvalidArgumentError(
            f"{component}: forme d'image {tuple(image.pixels.shape)} incompatible avec {tuple(image_shape)}",
            field='pixels')
    return image.pixels.unsqueeze(0)


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@torch.no_grad()
def encode(encoder: ToyEncoder, x: FaceImage) -> LatentVector:
    """z = E(x)"""
    pixels = _single(x, encoder.image_shape, 'encoder').to(_param_dtype(encoder))
    return LatentVector(values=encoder.eval()(pixels)[0])


@torch.no_grad()
def recognize(recognizer: ToyRecognizer, x: FaceImage) -> IdentityEmbedding:
    """R(x), normalisé L2 à cette frontière"""
    pixels = _single(x, recognizer.image_shape, 'recognizer').to(_param_dtype(recognizer))
    return IdentityEmbedding(values=recognizer.eval().embed(pixels)[0], normalized=True)


@torch.no_grad()
def generate(generator: ToyGenerator, zplus: ExtendedLatent) -> FaceImage:
    """x' = G(z+), visage de face"""
    styles = zplus.styles.unsqueeze(0).to(_param_dtype(generator))
    pixels = generator.eval()(styles)[0]
    return FaceImage(pixels=pixels.clamp(0.0, 1.0), pose_label=PoseAngles.frontal())


@torch.no_grad()
def correct_pose(pose_module: ToyPoseModule, x_virtual: FaceImage, x_original: FaceImage) -> FaceImage:
    """x_v = G_f(x', x) : apparence de x_virtual, posture de x_original"""
    virtual = _single(x_virtual, pose_module.image_shape, 'pose_module')
    _single(x_original, pose_module.image_shape, 'pose_module')
    if x_original.pose_label is None:
        raise InvalidArgumentError("La correction de posture requiert la posture de l'original",
                                   field='pose_label')
    virtual_pose = (x_virtual.pose_label or PoseAngles.frontal()).to_tensor(virtual.dtype).unsqueeze(0)
    original_pose = x_original.pose_tensor(virtual.dtype).unsqueeze(0)
    pixels = pose_module.correct(virtual, virtual_pose, original_pose)[0]
    return FaceImage(pixels=pixels.clamp(0.0, 1.0), identity_label=None,
                     pose_label=x_original.pose_label, expression=x_original.expression)


def detect_face(detector: ToyDetector, x: FaceImage) -> bool:
    return detector.detect(x.pixels)


def pose_of(x: FaceImage) -> PoseAngles:
    """Oracle de posture jouet : renvoie la posture paramétrique de l'image"""
    if x.pose_label is None:
        raise InvalidArgumentError("Image sans posture paramétrique", field='pose_label')
    return x.pose_label


# ---------------------------------------------------------------------------
# Jeu de visages synthétiques
# ---------------------------------------------------------------------------

# Paramètres d'apparence d'une identité : (nom, borne basse, borne haute)
APPEARANCE_PARAMS: List[Tuple[str, float, float]] = [
    ('skin_r', 0.45, 0.95), ('skin_g', 0.30, 0.85), ('skin_b', 0.20, 0.75),
    ('hair_r', 0.00, 0.60), ('hair_g', 0.00, 0.50), ('hair_b', 0.00, 0.45),
    ('eye_r', 0.00, 0.60), ('eye_g', 0.05, 0.60), ('eye_b', 0.05, 0.70),
    ('lip_r', 0.45, 0.90), ('lip_g', 0.05, 0.35), ('lip_b', 0.10, 0.40),
    ('face_rx', 0.45, 0.65), ('face_ry', 0.58, 0.74),
    ('eye_sep', 0.15, 0.30), ('eye_y', -0.25, -0.05), ('eye_size', 0.05, 0.10),
    ('mouth_w', 0.15, 0.32), ('mouth_y', 0.30, 0.45),
    ('hair_line', -0.55, -0.25), ('nose_len', 0.10, 0.22),
]
_P = {name: i for i, (name, _, _) in enumerate(APPEARANCE_PARAMS)}

BACKGROUND_LEVEL = 0.15
EDGE_SHARPNESS = 10.0
TRAIN, VALIDATION, TEST = 'train', 'validation', 'test'
SPLITS = (TRAIN, VALIDATION, TEST)

POSE_SAMPLING_RANGE = {'yaw': 30.0, 'pitch': 30.0, 'roll': 15.0}


def sample_appearance(n: int, rng: np.random.Generator) -> np.ndarray:
    low = np.array([lo for _, lo, _ in APPEARANCE_PARAMS])
    high = np.array([hi for _, _, hi in APPEARANCE_PARAMS])
    return low + (high - low) * rng.random((n, len(APPEARANCE_PARAMS)))


def render_frontal_faces(appearance: torch.Tensor, expressions: torch.Tensor, image_size: int) -> torch.Tensor:
    """Rend des visages de face (B, 3, S, S) à partir des paramètres d'apparence et d'expression"""
    a = appearance
    b = a.shape[0]
    coords = torch.linspace(-1 + 1 / image_size, 1 - 1 / image_size, image_size, dtype=a.dtype)
    v, u = torch.meshgrid(coords, coords, indexing='ij')
    u, v = u.expand(b, -1, -1), v.expand(b, -1, -1)

    def p(name):
        return a[:, _P[name]][:, None, None]

    def color(prefix):
        return torch.stack([a[:, _P[prefix + '_r']], a[:, _P[prefix + '_g']], a[:, _P[prefix + '_b']]],
                           dim=1)[:, :, None, None]

    def paint(img, mask, rgb):
        mask = mask.unsqueeze(1)
        return img * (1 - mask) + rgb * mask

    img = torch.full((b, 3, image_size, image_size), BACKGROUND_LEVEL, dtype=a.dtype)

    inside = 1 - (u / p('face_rx')) ** 2 - (v / p('face_ry')) ** 2
    face = torch.sigmoid(EDGE_SHARPNESS * inside)
    img = paint(img, face, color('skin'))

    head = 1 - (u / (1.08 * p('face_rx'))) ** 2 - (v / (1.08 * p('face_ry'))) ** 2
    hair = torch.sigmoid(EDGE_SHARPNESS * head) * torch.sigmoid(4 * EDGE_SHARPNESS * (p('hair_line') - v))
    img = paint(img, hair, color('hair'))

    for side in (-1.0, 1.0):
        d2 = (u - side * p('eye_sep')) ** 2 + (v - p('eye_y')) ** 2
        img = paint(img, torch.exp(-d2 / (2 * p('eye_size') ** 2)), color('eye'))

    nose_center = p('eye_y') + 0.08 + p('nose_len') / 2
    nose = torch.exp(-(u ** 2) / (2 * 0.03 ** 2) - (v - nose_center) ** 2 / (2 * (p('nose_len') / 2) ** 2))
    img = paint(img, 0.6 * nose, color('skin') * 0.7)

    e = expressions[:, None, None]
    mouth_curve = p('mouth_y') + 0.06 * e - 0.12 * e * (u / p('mouth_w')) ** 2
    mouth = (torch.exp(-(v - mouth_curve) ** 2 / (2 * 0.03 ** 2))
             * torch.sigmoid(4 * EDGE_SHARPNESS * (p('mouth_w') - u.abs())))
    img = paint(img, mouth, color('lip'))

    return img.clamp(0.0, 1.0)


@dataclass
class SyntheticFaceDataset:
    """Visages paramétriques étiquetés (identité, posture, expression, partition)"""
    pixels: torch.Tensor
    identities: torch.Tensor
    poses: torch.Tensor
    expressions: torch.Tensor
    splits: Tuple[str, ...]
    appearance: Optional[torch.Tensor] = None
    seed: Optional[int] = None
    _index_cache: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def n_identities(self) -> int:
        return int(self.identities.unique().numel())

    def image(self, index: int) -> FaceImage:
        return FaceImage(
            pixels=self.pixels[index],
            identity_label=int(self.identities[index]),
            pose_label=PoseAngles.from_tensor(self.poses[index]),
            expression=float(self.expressions[index]),
        )

    def indices(self, split: Optional[str] = None) -> torch.Tensor:
        """Indices des images d'une partition (toutes si None)"""
        if split is None:
            return torch.arange(len(self))
        if split not in SPLITS:
            raise InvalidArgumentError(f"Partition inconnue: {split}", field='split')
        if split not in self._index_cache:
            self._index_cache[split] = torch.tensor(
                [i for i, s in enumerate(self.splits) if s == split], dtype=torch.long)
        return self._index_cache[split]

    def images(self, split: Optional[str] = None) -> List[FaceImage]:
        return [self.image(int(i)) for i in self.indices(split)]

    def identity_groups(self, split: Optional[str] = None) -> Dict[int, List[int]]:
        """Identité -> liste des indices de ses images dans la partition"""
        groups: Dict[int, List[int]] = {}
        for i in self.indices(split).tolist():
            groups.setdefault(int(self.identities[i]), []).append(i)
        return groups


def make_synthetic_dataset(n_identities: int, images_per_identity: int, rng_seed: int,
                           image_size: int = 32, validation_fraction: float = 1 / 6,
                           test_fraction: float = 1 / 3) -> SyntheticFaceDataset:
    """
    Génère un jeu de visages paramétriques.

    Chaque identité est un vecteur d'apparence ; chacune de ses images la rend sous une
    posture et une expression tirées au hasard. Les partitions sont disjointes par image,
    tirées identité par identité.

    Args:
        n_identities: Nombre d'identités (>= 2)
        images_per_identity: Images par identité (>= 2)
        rng_seed: Graine du tirage
        image_size: Côté des images (multiple de 8)
        validation_fraction: Part des images de chaque identité en validation
        test_fraction: Part des images de chaque identité en test

    Returns:
        Jeu de données étiqueté
    """
    if n_identities < 2 or images_per_identity < 2:
        raise InvalidArgumentError(
            f"Jeu dégénéré: {n_identities} identités x {images_per_identity} images (minimum 2 x 2)",
            field='n_identities' if n_identities < 2 else 'images_per_identity')

    rng = np.random.default_rng(rng_seed)
    appearance = sample_appearance(n_identities, rng)
    n = n_identities * images_per_identity

    identities = np.repeat(np.arange(n_identities), images_per_identity)
    poses = np.stack([
        rng.uniform(-POSE_SAMPLING_RANGE['yaw'], POSE_SAMPLING_RANGE['yaw'], n),
        rng.uniform(-POSE_SAMPLING_RANGE['pitch'], POSE_SAMPLING_RANGE['pitch'], n),
        rng.uniform(-POSE_SAMPLING_RANGE['roll'], POSE_SAMPLING_RANGE['roll'], n),
    ], axis=1)
    expressions = rng.uniform(-1.0, 1.0, n)

    splits: List[str] = []
    n_test = int(round(images_per_identity * test_fraction))
    n_val = int(round(images_per_identity * validation_fraction))
    if images_per_identity - n_test - n_val < 1:
        n_val = max(0, images_per_identity - n_test - 1)
    for _ in range(n_identities):
        order = rng.permutation(images_per_identity)
        labels = [TRAIN] * images_per_identity
        for j in order[:n_test]:
            labels[j] = TEST
        for j in order[n_test:n_test + n_val]:
            labels[j] = VALIDATION
        splits.extend(labels)

    appearance_t = torch.tensor(appearance, dtype=torch.float32)
    expressions_t = torch.tensor(expressions, dtype=torch.float32)
    poses_t = torch.tensor(poses, dtype=torch.float32)
    frontal = render_frontal_faces(appearance_t[torch.tensor(identities)], expressions_t, image_size)
    pixels = warp_between_poses(frontal, torch.zeros_like(poses_t), poses_t).clamp(0.0, 1.0)

    logger.info(f"Jeu synthétique: {n_identities} identités x {images_per_identity} images "
                f"({image_size}x{image_size}, graine {rng_seed})")
    return SyntheticFaceDataset(
        pixels=pixels,
        identities=torch.tensor(identities, dtype=torch.long),
        poses=poses_t,
        expressions=expressions_t,
        splits=tuple(splits),
        appearance=appearance_t,
        seed=rng_seed,
    )


# ---------------------------------------------------------------------------
# Entrées / sorties d'images
# ---------------------------------------------------------------------------

def load_face_image(path: str, image_size: int) -> FaceImage:
    """Charge une image (PNG, JPEG...) en visage RGB S x S ; posture inconnue -> de face"""
    from PIL import Image

    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise NotFoundError(f"Image introuvable: {path}", field='image')

    if img.mode != 'RGB':
        img = img.convert('RGB')
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    array = np.asarray(img, dtype=np.float32) / 255.0
    pixels = torch.from_numpy(array.copy()).permute(2, 0, 1)
    return FaceImage(pixels=pixels, pose_label=PoseAngles.frontal())


def save_face_image(image: FaceImage, path: str):
    """Enregistre un visage en PNG 8 bits"""
    from PIL import Image

    array = (image.pixels.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round()
    Image.fromarray(array.astype(np.uint8), mode='RGB').save(path)


# ---------------------------------------------------------------------------
# Pré-entraînement des composants jouets
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    """Hyper-paramètres du pré-entraînement des reconnaisseurs et de l'auto-encodeur"""
    recognizer_epochs: int = 30
    autoencoder_epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 32
    softmax_scale: float = 16.0
    seed: int = 42


def _batches(n: int, batch_size: int, generator: torch.Generator) -> List[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain_recognizer(recognizer: ToyRecognizer, dataset: SyntheticFaceDataset,
                        config: PretrainConfig, seed: int) -> List[float]:
    """
    Classification d'identité à softmax normalisée sur la partition d'entraînement.

    Returns:
        Perte moyenne par époque
    """
    train = dataset.indices(TRAIN)
    if len(train) == 0:
        raise InvalidArgumentError("Partition d'entraînement vide", field='dataset')
    n_classes = int(dataset.identities.max()) + 1
    generator = torch.Generator().manual_seed(seed)
    dtype = _param_dtype(recognizer)
    centers = nn.Parameter(torch.randn(n_classes, recognizer.embedding_dim, generator=generator, dtype=dtype))
    optimizer = torch.optim.Adam([*recognizer.parameters(), centers], lr=config.learning_rate)

    recognizer.train()
    for param in recognizer.parameters():
        param.requires_grad_(True)
    history = []
    for epoch in range(config.recognizer_epochs):
        total, seen = 0.0, 0
        for rows in _batches(len(train), config.batch_size, generator):
            idx = train[rows]
            logits = config.softmax_scale * recognizer.embed(dataset.pixels[idx].to(dtype)) @ \
                F.normalize(centers, dim=1).t()
            loss = F.cross_entropy(logits, dataset.identities[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        logger.debug(f"Reconnaisseur époque {epoch + 1}/{config.recognizer_epochs}: perte={history[-1]:.4f}")
    recognizer.eval()
    return history


def pretrain_autoencoder(bundle: BackboneBundle, mapping: nn.Module, dataset: SyntheticFaceDataset,
                         config: PretrainConfig, seed: int) -> List[float]:
    """
    Entraîne E, M et G conjointement : la sortie de G, corrigée vers la posture de
    l'entrée par G_f, doit reconstruire l'entrée (erreur quadratique moyenne).

    Returns:
        Perte moyenne par époque
    """
    train = dataset.indices(TRAIN)
    generator = torch.Generator().manual_seed(seed)
    modules = [bundle.encoder, mapping, bundle.generator]
    params = [p for module in modules for p in module.parameters()]
    for module in modules:
        module.train()
    for param in params:
        param.requires_grad_(True)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    dtype = _param_dtype(bundle.encoder)

    history = []
    for epoch in range(config.autoencoder_epochs):
        total, seen = 0.0, 0
        for rows in _batches(len(train), config.batch_size, generator):
            idx = train[rows]
            pixels = dataset.pixels[idx].to(dtype)
            poses = dataset.poses[idx].to(dtype)
            frontal = bundle.generator(mapping(bundle.encoder(pixels)))
            recon = bundle.pose_module.correct(frontal, torch.zeros_like(poses), poses)
            loss = F.mse_loss(recon, pixels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        logger.debug(f"Auto-encodeur époque {epoch + 1}/{config.autoencoder_epochs}: mse={history[-1]:.5f}")
    for module in modules:
        module.eval()
    return history


def pretrain_backbones(bundle: BackboneBundle, mapping: nn.Module, dataset: SyntheticFaceDataset,
                       config: PretrainConfig) -> Dict[str, List[float]]:
    """
    Pré-entraîne les composants jouets puis les gèle.

    Args:
        bundle: Composants à entraîner (modifiés en place)
        mapping: Réseau de mapping M, entraîné avec E et G
        dataset: Jeu étiqueté (seule la partition d'entraînement est utilisée)
        config: Hyper-paramètres

    Returns:
        Historique des pertes par composant
    """
    logger.info(f"Pré-entraînement des composants jouets ({len(dataset.indices(TRAIN))} images)")
    history = {'recognizer': pretrain_recognizer(bundle.recognizer, dataset, config, config.seed)}
    if bundle.eval_recognizer is not None:
        history['eval_recognizer'] = pretrain_recognizer(bundle.eval_recognizer, dataset, config,
                                                         config.seed + 1)
    history['autoencoder'] = pretrain_autoencoder(bundle, mapping, dataset, config, config.seed + 2)

    bundle.freeze()
    mapping.eval()
    for param in mapping.parameters():
        param.requires_grad_(False)
    for name, losses in history.items():
        if losses:
            logger.info(f"Pré-entraînement {name}: perte finale {losses[-1]:.4f}")
    logger.success("Composants jouets pré-entraînés et gelés")
    return history

"""
Simulation déterministe du protocole à cinq participants.

U (utilisateur), FAS (serveur d'anonymisation), FR (reconnaisseur public),
VFAS (serveur d'authentification, honnête mais curieux) et AD (adversaire),
plus le stockage cloud. Les échanges sont des messages en mémoire consignés dans
un transcript : seuls le type de charge utile et des références opaques y figurent,
jamais une clé ni des pixels.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from backbones import FaceImage, SyntheticFaceDataset, TEST, ToyRecognizer
from errors import InvalidArgumentError, InvalidStateError
from hpvfg import HPVFGPipeline
from keying import UserKey, inject_key_errors, keygen
from kvfa import SCENARIOS, AuthDecision, AuthMode, KVFAModel, extract, extract_with_key
from metrics import fid, mismatch_rate
from utils.logger import logger
from utils.seeding import torch_generator


class Role(Enum):
    USER = 'U'
    FAS = 'FAS'
    FR = 'FR'
    VFAS = 'VFAS'
    ADVERSARY = 'AD'
    CLOUD = 'cloud'


class Payload(Enum):
    ORIGINAL_IMAGE = 'original_image'
    VIRTUAL_IMAGE = 'virtual_image'
    KEY = 'key'
    EMBEDDING = 'embedding'
    RECORD_ID = 'record_id'


class Participant:
    """Participant et son état détenu, indexé par nature de donnée"""

    def __init__(self, role: Role):
        self.role = role
        self.held_state: Dict[str, object] = {}

    def hold(self, kind: str, value: object):
        self.held_state[kind] = value

    def holds(self, kind: str) -> bool:
        return kind in self.held_state

    def clear(self):
        self.held_state.clear()

    def __repr__(self):
        return f"Participant({self.role.value}, détient={sorted(self.held_state)})"


# ---------------------------------------------------------------------------
# Cloud
# ---------------------------------------------------------------------------

FORBIDDEN_METADATA = ('key', 'bits', 'identity', 'identity_label', 'original')


@dataclass(frozen=True)
class CloudRecord:
    record_id: str
    image: FaceImage
    metadata: Dict[str, str]


class CloudStore:
    """Stockage des visages virtuels : ni clé, ni étiquette d'identité, ni original"""

    def __init__(self):
        self._records: Dict[str, CloudRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def upload(self, image: FaceImage, metadata: Optional[Dict[str, str]] = None) -> str:
        metadata = dict(metadata or {})
        if image.identity_label is not None:
            raise InvalidArgumentError("Le cloud refuse les images étiquetées", field='identity_label')
        leaked = [k for k in metadata if k in FORBIDDEN_METADATA]
        if leaked:
            raise InvalidArgumentError(f"Métadonnées interdites dans le cloud: {leaked}", field=leaked[0])
        record_id = f"rec-{len(self._records):05d}"
        self._records[record_id] = CloudRecord(record_id, image, metadata)
        return record_id

    def download(self, record_id: str) -> FaceImage:
        if record_id not in self._records:
            raise InvalidArgumentError(f"Enregistrement inconnu: {record_id}", field='record_id')
        return self._records[record_id].image

    def records(self) -> List[CloudRecord]:
        return [self._records[k] for k in sorted(self._records)]


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    step: int
    sender: Role
    receiver: Role
    payload: Payload
    reference: str = ''

    def to_dict(self) -> Dict[str, object]:
        return {'step': self.step, 'sender': self.sender.value, 'receiver': self.receiver.value,
                'payload': self.payload.value, 'reference': self.reference}


@dataclass
class StageEntry:
    step: int
    name: str
    messages: List[Message] = field(default_factory=list)
    notes: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {'step': self.step, 'name': self.name,
                'messages': [m.to_dict() for m in self.messages], 'notes': dict(self.notes)}


@dataclass
class Transcript:
    run_id: str
    key_length: int
    seed: int
    stages: List[StageEntry] = field(default_factory=list)

    def messages(self) -> List[Message]:
        return [m for stage in self.stages for m in stage.messages]

    def stage(self, step: int) -> StageEntry:
        return next(s for s in self.stages if s.step == step)

    def to_dict(self) -> Dict[str, object]:
        return {'run_id': self.run_id, 'key_length': self.key_length, 'seed': self.seed,
                'stages': [s.to_dict() for s in self.stages]}


# ---------------------------------------------------------------------------
# Monde simulé
# ---------------------------------------------------------------------------

@dataclass
class KeyedModels:
    """Modèles entraînés pour une longueur de clé"""
    pipeline: HPVFGPipeline
    kvfa: KVFAModel


@dataclass
class SimulationWorld:
    dataset: SyntheticFaceDataset
    models: Dict[int, KeyedModels]
    eval_recognizer: ToyRecognizer
    match_threshold: float
    auth_threshold: float = 0.7
    split: str = TEST
    vfas_observations: List[Dict[str, object]] = field(default_factory=list)

    def models_for(self, key_length: int) -> KeyedModels:
        if key_length not in self.models:
            raise InvalidStateError(
                f"Aucun modèle entraîné pour des clés de {key_length} bits", field='key_length')
        return self.models[key_length]

    def test_images(self) -> List[FaceImage]:
        images = self.dataset.images(self.split)
        if not images:
            raise InvalidStateError(f"Partition '{self.split}' vide", field='split')
        return images

    def pick_images(self, n_trials: int, seed: int) -> List[FaceImage]:
        """Tirage déterministe de `n_trials` images de la partition"""
        if n_trials < 1:
            raise InvalidArgumentError("n_trials doit être >= 1", field='n_trials')
        images = self.test_images()
        generator = torch_generator(seed)
        order = torch.randperm(len(images), generator=generator).tolist()
        return [images[order[i % len(order)]] for i in range(n_trials)]


@torch.no_grad()
def _fr_similarity(recognizer: ToyRecognizer, a: FaceImage, b: FaceImage) -> float:
    dtype = next(recognizer.parameters()).dtype
    pixels = torch.stack([a.pixels.to(dtype), b.pixels.to(dtype)])
    emb = recognizer.eval().embed(pixels)
    return float(emb[0] @ emb[1])


def _cos(a, b) -> float:
    return float(a.values @ b.values)


def run_interaction(world: SimulationWorld, x: FaceImage, key_length: int, seed: int,
                    cloud: Optional[CloudStore] = None) -> Transcript:
    """
    Déroule les six étapes du protocole pour une image.

    Args:
        world: Monde simulé (modèles entraînés chargés)
        x: Visage original de l'utilisateur
        key_length: Longueur de la clé tirée par U
        seed: Graine de la clé
        cloud: Stockage partagé entre exécutions (nouveau par défaut)

    Returns:
        Transcript des six étapes
    """
    models = world.models_for(key_length)
    cloud = cloud if cloud is not None else CloudStore()
    parties = {role: Participant(role) for role in Role if role is not Role.CLOUD}
    user, fas, ad, vfas = parties[Role.USER], parties[Role.FAS], parties[Role.ADVERSARY], parties[Role.VFAS]
    vfas.hold('kvfa_model', models.kvfa)
    transcript = Transcript(run_id=f"interaction-{seed}", key_length=key_length, seed=seed)

    # Étape 1 : U tire sa clé et envoie clé + original à FAS
    key = keygen(key_length, seed)
    user.hold('key', key)
    user.hold('original', x)
    stage = StageEntry(1, 'U envoie clé et visage original à FAS', [
        Message(1, Role.USER, Role.FAS, Payload.KEY, key.id),
        Message(1, Role.USER, Role.FAS, Payload.ORIGINAL_IMAGE, 'original'),
    ])
    fas.hold('key', key)
    fas.hold('original', x)
    transcript.stages.append(stage)

    # Étape 2 : FAS anonymise, téléverse, puis efface les données utilisateur
    virtual = models.pipeline(fas.held_state['original'], fas.held_state['key'])
    record_id = cloud.upload(virtual, {'key_length': str(key_length)})
    fas.clear()
    fas_cleared = not (fas.holds('key') or fas.holds('original'))
    if not fas_cleared:
        raise InvalidStateError("FAS détient encore des données utilisateur après l'étape 2", field='FAS')
    transcript.stages.append(StageEntry(2, 'FAS génère le visage virtuel et le téléverse', [
        Message(2, Role.FAS, Role.CLOUD, Payload.VIRTUAL_IMAGE, record_id),
        Message(2, Role.FAS, Role.USER, Payload.RECORD_ID, record_id),
    ], {'fas_cleared': fas_cleared}))

    # Étape 3 : AD télécharge le visage virtuel partagé
    ad.hold('virtual', cloud.download(record_id))
    transcript.stages.append(StageEntry(3, 'AD télécharge le visage virtuel depuis le cloud', [
        Message(3, Role.CLOUD, Role.ADVERSARY, Payload.VIRTUAL_IMAGE, record_id),
    ], {'ad_holds_original': ad.holds('original')}))

    # Étape 4 : AD interroge FR ; l'identité obtenue diffère de l'original
    fr_similarity = _fr_similarity(world.eval_recognizer, ad.held_state['virtual'], x)
    transcript.stages.append(StageEntry(4, 'AD applique le reconnaisseur public FR', [
        Message(4, Role.ADVERSARY, Role.FR, Payload.VIRTUAL_IMAGE, record_id),
        Message(4, Role.FR, Role.ADVERSARY, Payload.EMBEDDING, record_id),
    ], {'fr_similarity': fr_similarity, 'match_threshold': world.match_threshold,
        'fr_mismatch': fr_similarity <= world.match_threshold}))

    # Étape 5 : U récupère son visage virtuel
    user.hold('virtual', cloud.download(record_id))
    transcript.stages.append(StageEntry(5, 'U télécharge le visage virtuel', [
        Message(5, Role.CLOUD, Role.USER, Payload.VIRTUAL_IMAGE, record_id),
    ]))

    # Étape 6 : U présente (visage virtuel, clé) à VFAS ; la référence reste chez U
    query = extract_with_key(vfas.held_state['kvfa_model'], user.held_state['virtual'], user.held_state['key'])
    world.vfas_observations.append({
        'run_id': transcript.run_id, 'record_id': record_id, 'key_id': key.id,
        'embedding': [round(float(v), 6) for v in query.values],
    })
    reference = extract(models.kvfa, user.held_state['original'])
    decision = AuthDecision.decide(_cos(reference, query), world.auth_threshold, AuthMode.WITH_KEY)
    transcript.stages.append(StageEntry(6, 'U présente visage virtuel et clé à VFAS', [
        Message(6, Role.USER, Role.VFAS, Payload.VIRTUAL_IMAGE, record_id),
        Message(6, Role.USER, Role.VFAS, Payload.KEY, key.id),
        Message(6, Role.VFAS, Role.USER, Payload.EMBEDDING, record_id),
    ], {'similarity': decision.similarity, 'threshold': decision.threshold, 'accept': decision.accept}))

    logger.debug(f"Interaction {transcript.run_id}: FR={fr_similarity:.3f}, VFAS={decision.similarity:.3f}")
    return transcript


# ---------------------------------------------------------------------------
# Scénarios d'authentification
# ---------------------------------------------------------------------------

@dataclass
class ScenarioReport:
    """Similarités par essai, moyenne et taux d'acceptation au seuil"""
    scenario: str
    similarities: List[float]
    threshold: float
    mean_similarity: float = 0.0
    accept_rate: float = 0.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidArgumentError(f"Scénario inconnu: {self.scenario}", field='scenario')
        if not self.similarities:
            raise InvalidArgumentError("Aucun essai", field='similarities')
        self.mean_similarity = float(np.mean(self.similarities))
        self.accept_rate = self.recount()

    def recount(self) -> float:
        return sum(s > self.threshold for s in self.similarities) / len(self.similarities)

    def to_dict(self) -> Dict[str, object]:
        return {'scenario': self.scenario, 'threshold': self.threshold,
                'mean_similarity': self.mean_similarity, 'accept_rate': self.accept_rate,
                'similarities': list(self.similarities)}


@torch.no_grad()
def run_scenario(world: SimulationWorld, scenario: str, n_trials: int, seed: int,
                 key_length: Optional[int] = None) -> ScenarioReport:
    """
    Mesure la similarité entre original et visage virtuel dans un scénario.

    S1 : AD connaît la clé sans accès à VFAS et réapplique HPVFG pour « récupérer » l'original (FR)
    S2 : authentification KVFA sans clé
    S3 : authentification KVFA avec une mauvaise clé
    S4 : authentification KVFA avec la bonne clé
    """
    if scenario not in SCENARIOS:
        raise InvalidArgumentError(f"Scénario inconnu: {scenario}", field='scenario')
    if key_length is None:
        if not world.models:
            raise InvalidStateError("Aucun modèle entraîné chargé", field='models')
        key_length = min(world.models)
    models = world.models_for(key_length)

    similarities = []
    for trial, x in enumerate(world.pick_images(n_trials, seed)):
        key = keygen(key_length, seed + 7919 * (trial + 1))
        virtual = models.pipeline(x, key)
        if scenario == 'S1':
            recovered = models.pipeline(virtual, key)
            similarity = _fr_similarity(world.eval_recognizer, recovered, x)
        elif scenario == 'S2':
            similarity = _cos(extract(models.kvfa, x), extract(models.kvfa, virtual))
        else:
            query_key = key if scenario == 'S4' else _wrong_key(key, seed + trial)
            similarity = _cos(extract(models.kvfa, x), extract_with_key(models.kvfa, virtual, query_key))
        similarities.append(similarity)

    report = ScenarioReport(scenario, similarities, world.auth_threshold)
    logger.info(f"Scénario {scenario}: similarité moyenne {report.mean_similarity:.3f}, "
                f"acceptation {report.accept_rate:.2%}")
    return report


def _wrong_key(key: UserKey, seed: int) -> UserKey:
    """Clé fraîche différente de `key`"""
    candidate = keygen(key.length, seed)
    while candidate.bits == key.bits:
        seed += 1
        candidate = keygen(key.length, seed)
    return candidate


# ---------------------------------------------------------------------------
# Balayages
# ---------------------------------------------------------------------------

@dataclass
class SweepTable:
    """Tableau (longueur de clé x colonnes) ; None marque une cellule absente"""
    name: str
    columns: List[str]
    rows: Dict[int, Dict[str, Optional[float]]] = field(default_factory=dict)

    def header(self) -> List[str]:
        return ['key_length', *self.columns]

    def as_rows(self) -> List[List[Optional[float]]]:
        return [[length, *[self.rows[length].get(c) for c in self.columns]] for length in sorted(self.rows)]

    def to_dict(self) -> Dict[str, object]:
        return {'name': self.name, 'columns': self.header(),
                'rows': {str(length): self.rows[length] for length in sorted(self.rows)}}


@torch.no_grad()
def fault_tolerance_sweep(world: SimulationWorld, key_lengths: Sequence[int], error_bits: Sequence[int],
                          n_trials: int, seed: int) -> SweepTable:
    """
    Similarité moyenne avec la bonne clé entachée de `e` bits erronés.

    Les cellules e > L sont absentes (None).
    """
    table = SweepTable('fault_tolerance', [f"{e}_bits" for e in error_bits])
    for length in key_lengths:
        models = world.models_for(length)
        sums = {e: [] for e in error_bits if e <= length}
        for trial, x in enumerate(world.pick_images(n_trials, seed)):
            key = keygen(length, seed + 7919 * (trial + 1))
            virtual = models.pipeline(x, key)
            reference = extract(models.kvfa, x)
            for e in sums:
                noisy = inject_key_errors(key, e, seed + 31 * trial + e)
                sums[e].append(_cos(reference, extract_with_key(models.kvfa, virtual, noisy)))
        table.rows[length] = {
            f"{e}_bits": (float(np.mean(sums[e])) if e in sums else None) for e in error_bits
        }
        logger.info(f"Tolérance aux erreurs L={length}: {table.rows[length]}")
    return table


@torch.no_grad()
def key_length_sweep(world: SimulationWorld, key_lengths: Sequence[int], n_trials: int, seed: int) -> SweepTable:
    """Anonymat et FID des visages virtuels pour chaque longueur de clé"""
    for length in key_lengths:
        world.models_for(length)
    table = SweepTable('key_length', ['anonymity', 'fid'])
    dtype = next(world.eval_recognizer.parameters()).dtype
    images = world.pick_images(n_trials, seed)
    originals = torch.stack([img.pixels.to(dtype) for img in images])
    world.eval_recognizer.eval()
    original_emb = world.eval_recognizer.embed(originals)
    original_feats = world.eval_recognizer.features(originals).double().numpy()

    for length in key_lengths:
        models = world.models_for(length)
        virtuals = [models.pipeline(x, keygen(length, seed + 7919 * (i + 1))) for i, x in enumerate(images)]
        pixels = torch.stack([v.pixels.to(dtype) for v in virtuals])
        similarities = (world.eval_recognizer.embed(pixels) * original_emb).sum(dim=1).tolist()
        feats = world.eval_recognizer.features(pixels).double().numpy()
        fid_value = fid(original_feats, feats) if len(images) > feats.shape[1] else None
        if fid_value is None:
            logger.warning(f"FID non calculée pour L={length}: {len(images)} essais pour {feats.shape[1]} dimensions")
        table.rows[length] = {'anonymity': mismatch_rate(similarities, world.match_threshold), 'fid': fid_value}
        logger.info(f"Longueur de clé {length}: {table.rows[length]}")
    return table


# ---------------------------------------------------------------------------
# Audit des flux d'information
# ---------------------------------------------------------------------------

KEY_ALLOWED = {(1, Role.USER, Role.FAS), (6, Role.USER, Role.VFAS)}
ORIGINAL_ALLOWED = {(1, Role.USER, Role.FAS)}


@dataclass
class AuditReport:
    n_transcripts: int
    n_messages: int
    violations: List[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, object]:
        return {'n_transcripts': self.n_transcripts, 'n_messages': self.n_messages,
                'clean': self.clean, 'violations': list(self.violations)}


def audit_transcripts(transcripts: Iterable[Transcript]) -> AuditReport:
    """
    Vérifie qu'aucune clé n'atteint FAS après l'étape 2, FR, le cloud ou AD, et
    qu'aucun original ne circule au-delà de l'envoi U -> FAS de l'étape 1.
    """
    transcripts = list(transcripts)
    report = AuditReport(len(transcripts), 0)
    for transcript in transcripts:
        for message in transcript.messages():
            report.n_messages += 1
            route = (message.step, message.sender, message.receiver)
            if message.payload is Payload.KEY and route not in KEY_ALLOWED:
                report.violations.append(f"{transcript.run_id}: clé transmise {message.to_dict()}")
            if message.payload is Payload.ORIGINAL_IMAGE and route not in ORIGINAL_ALLOWED:
                report.violations.append(f"{transcript.run_id}: original transmis {message.to_dict()}")
        for stage in transcript.stages:
            if stage.notes.get('fas_cleared') is False:
                report.violations.append(f"{transcript.run_id}: FAS non effacé à l'étape {stage.step}")
            if stage.notes.get('ad_holds_original'):
                report.violations.append(f"{transcript.run_id}: AD détient un original")
    if report.violations:
        logger.warning(f"Audit: {len(report.violations)} violation(s) de flux d'information")
    return report

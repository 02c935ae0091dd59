"""
Configuration d'une exécution : arbre de dataclasses chargé depuis un fichier JSON.

Les champs absents prennent les valeurs par défaut de la méthode ; les champs
inconnus sont rejetés avec leur chemin pointé (ex. « hpvfg.weights.foo »).
La graine et la longueur de clé sont uniques et propagées aux sections.
"""

import json
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from backbones import BackboneConfig, PretrainConfig
from errors import InvalidArgumentError, NotFoundError
from evaluation import EvaluationConfig
from hpvfg import HPVFGTrainConfig
from kvfa import SCENARIOS, KVFATrainConfig
from utils.logger import logger
from utils.seeding import derive_seed

DEFAULT_SEED = 42
DEFAULT_OUTPUT_DIR = 'runs/default'


class ConfigError(InvalidArgumentError):
    """Configuration invalide ; `field` porte le chemin pointé du champ fautif"""
    pass


@dataclass(frozen=True)
class DatasetConfig:
    """Jeu synthétique (ou manifeste JSON-lines si `manifest` est renseigné)"""
    n_identities: int = 50
    images_per_identity: int = 6
    manifest: Optional[str] = None


@dataclass(frozen=True)
class SimulationConfig:
    """Paramètres du simulateur de protocole et des balayages"""
    n_trials: int = 50
    n_interactions: int = 50
    scenarios: Tuple[str, ...] = SCENARIOS
    key_lengths: Tuple[int, ...] = (8, 128, 256)
    error_bits: Tuple[int, ...] = (0, 1, 3, 5, 16)


@dataclass
class RunConfig:
    seed: int = DEFAULT_SEED
    output_dir: str = DEFAULT_OUTPUT_DIR
    key_length: int = 128
    threshold: float = 0.7
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    hpvfg: HPVFGTrainConfig = field(default_factory=HPVFGTrainConfig)
    kvfa: KVFATrainConfig = field(default_factory=KVFATrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def stream_seed(self, stream: str) -> int:
        return derive_seed(self.seed, stream)

    def all_key_lengths(self) -> Tuple[int, ...]:
        """Longueur principale puis celles des balayages, sans doublon"""
        lengths = [self.key_length]
        lengths += [L for L in self.simulation.key_lengths if L not in lengths]
        return tuple(lengths)

    def for_key_length(self, key_length: int) -> 'RunConfig':
        """Copie dont les sections d'entraînement visent `key_length`"""
        return replace(self, key_length=key_length,
                       hpvfg=replace(self.hpvfg, key_length=key_length),
                       kvfa=replace(self.kvfa, key_length=key_length))


# Champs de section dérivés des champs racine : interdits dans le fichier
DERIVED_FIELDS = {
    'pretrain': ('seed',),
    'hpvfg': ('seed', 'key_length'),
    'kvfa': ('seed', 'key_length', 'threshold'),
    'evaluation': ('auth_threshold',),
}


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: booléen attendu, reçu {value!r}", field=path)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: entier attendu, reçu {value!r}", field=path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: nombre attendu, reçu {value!r}", field=path)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: liste attendue, reçu {value!r}", field=path)
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: texte attendu, reçu {value!r}", field=path)
    if default is None and isinstance(value, list):
        return tuple(value)
    return value


def _build(cls, data: Dict[str, Any], path: str, excluded: Tuple[str, ...] = ()):
    """Instancie la dataclass `cls` depuis `data`, récursivement"""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'racine'}: objet JSON attendu", field=path or 'root')
    defaults = cls()
    known = {f.name for f in fields(cls) if f.name not in excluded}
    for name in data:
        if name not in known:
            dotted = f"{path}.{name}" if path else name
            raise ConfigError(f"Champ inconnu: {dotted}", field=dotted)

    kwargs = {}
    for name, value in data.items():
        dotted = f"{path}.{name}" if path else name
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, dotted, DERIVED_FIELDS.get(name, ()))
        else:
            kwargs[name] = _coerce(value, default, dotted)
    try:
        return cls(**kwargs)
    except InvalidArgumentError as e:
        if not e.field or e.field == path.rsplit(".", 1)[-1]:
            dotted = path or e.field
        else:
            dotted = f"{path}.{e.field}" if path else e.field
        raise ConfigError(str(e), field=dotted)


def _validate(config: RunConfig):
    positives = {
        'key_length': config.key_length,
        'dataset.n_identities': config.dataset.n_identities - 1,
        'dataset.images_per_identity': config.dataset.images_per_identity - 1,
        'hpvfg.epochs': config.hpvfg.epochs,
        'hpvfg.batch_size': config.hpvfg.batch_size,
        'kvfa.epochs': config.kvfa.epochs,
        'kvfa.batch_size': config.kvfa.batch_size,
        'simulation.n_trials': config.simulation.n_trials,
        'simulation.n_interactions': config.simulation.n_interactions,
    }
    for dotted, value in positives.items():
        if value < 1:
            raise ConfigError(f"{dotted}: valeur trop petite", field=dotted)
    for dotted, value in (('hpvfg.learning_rate', config.hpvfg.learning_rate),
                          ('kvfa.learning_rate', config.kvfa.learning_rate)):
        if value <= 0:
            raise ConfigError(f"{dotted}: doit être > 0", field=dotted)
    for section in ('hpvfg', 'kvfa'):
        train = getattr(config, section)
        lr_min = train.lr_min
        if lr_min is not None and (isinstance(lr_min, bool) or not isinstance(lr_min, (int, float))
                                   or not 0 <= lr_min <= train.learning_rate):
            raise ConfigError(f"{section}.lr_min: nombre dans [0, learning_rate] attendu, reçu {lr_min!r}",
                              field=f"{section}.lr_min")
    key_scale = config.kvfa.key_scale
    if key_scale is not None and (isinstance(key_scale, bool) or not isinstance(key_scale, (int, float))
                                  or key_scale <= 0):
        raise ConfigError(f"kvfa.key_scale: nombre > 0 attendu, reçu {key_scale!r}", field='kvfa.key_scale')
    if not -1.0 <= config.threshold <= 1.0:
        raise ConfigError(f"threshold hors de [-1, 1]: {config.threshold}", field='threshold')
    if any(L < 1 for L in config.simulation.key_lengths):
        raise ConfigError("simulation.key_lengths: longueurs >= 1 attendues", field='simulation.key_lengths')
    unknown = [s for s in config.simulation.scenarios if s not in SCENARIOS]
    if unknown:
        raise ConfigError(f"Scénarios inconnus: {unknown}", field='simulation.scenarios')
    try:
        config.hpvfg.weights.with_ablation(config.hpvfg.ablate)
    except InvalidArgumentError as e:
        raise ConfigError(str(e), field='hpvfg.ablate')
    try:
        config.kvfa.weights.with_ablation(config.kvfa.ablate)
    except InvalidArgumentError as e:
        raise ConfigError(str(e), field='kvfa.ablate')
    if config.dataset.manifest and not os.path.exists(config.dataset.manifest):
        raise NotFoundError(f"Manifeste introuvable: {config.dataset.manifest}", field='dataset.manifest')


def _propagate(config: RunConfig) -> RunConfig:
    """Reporte graine, longueur de clé et seuil racine dans les sections"""
    return replace(
        config,
        pretrain=replace(config.pretrain, seed=derive_seed(config.seed, 'init')),
        hpvfg=replace(config.hpvfg, seed=derive_seed(config.seed, 'training'), key_length=config.key_length),
        kvfa=replace(config.kvfa, seed=derive_seed(config.seed, 'training') + 1, key_length=config.key_length,
                     threshold=config.threshold),
        evaluation=replace(config.evaluation, auth_threshold=config.threshold),
    )


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """
    Construit et valide une configuration.

    Raises:
        ConfigError: champ inconnu, type invalide, graine absente
        NotFoundError: chemin référencé introuvable
    """
    if data and 'seed' not in data:
        raise ConfigError("Champ obligatoire manquant: seed", field='seed')
    config = _build(RunConfig, data or {}, '')
    _validate(config)
    return _propagate(config)


def load_config(path: str) -> RunConfig:
    """
    Charge un fichier de configuration JSON.

    Un fichier vide (ou « {} ») donne toutes les valeurs par défaut, graine 42.
    La variable d'environnement KFAAR_OUT remplace le dossier de sortie.

    Args:
        path: Chemin du fichier

    Returns:
        Configuration validée
    """
    load_dotenv()
    if not os.path.exists(path):
        raise NotFoundError(f"Fichier de configuration introuvable: {path}", field='config')
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON invalide dans {path}: {e}", field='config')

    config = config_from_dict(data)
    out = os.environ.get('KFAAR_OUT')
    if out:
        config = replace(config, output_dir=out)
    logger.info(f"Configuration chargée: {path} (graine {config.seed}, L={config.key_length})")
    return config


def _to_plain(value: Any, excluded: Tuple[str, ...] = ()) -> Any:
    if is_dataclass(value):
        return {
            f.name: _to_plain(getattr(value, f.name), DERIVED_FIELDS.get(f.name, ()))
            for f in fields(value) if f.name not in excluded and not f.name.startswith('_')
        }
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Configuration effective, relisible par config_from_dict à l'identique"""
    return _to_plain(config)

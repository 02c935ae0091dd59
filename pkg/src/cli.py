"""
Point d'entrée en ligne de commande de KFAAR.

Sous-commandes : keygen, train-hpvfg, train-kvfa, anonymize, authenticate,
evaluate, simulate, run-all et sweep-weights. Code de sortie 0 en cas de
succès, 1 sur erreur KFAAR, 2 sur erreur d'usage.
"""

import argparse
import json
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

from backbones import load_face_image, save_face_image
from checkpoints import load_world
from errors import InvalidArgumentError, InvalidStateError, KFAARError
from experiment_runner import (
    EVALUATE, PRETRAIN, SIMULATE, SIMULATION_PARTS, STAGES, TRAIN_HPVFG, TRAIN_KVFA, ExperimentRunner,
    StageError,
)
from hpvfg import generate_virtual_checked
from keying import deserialize_key, keygen
from kvfa import DEFAULT_THRESHOLD, authenticate
from run_config import RunConfig, load_config
from utils.logger import LogLevel, logger
from utils.sanitize import validate_path

EXIT_OK = 0
EXIT_ERROR = 1

SIMULATE_CHOICES = ('all', 'S1', 'S2', 'S3', 'S4', 'interaction', 'fault', 'keylen')

_LEVEL_TAGS = {
    LogLevel.DEBUG.value: 'DEBUG',
    LogLevel.INFO.value: 'INFO',
    LogLevel.SUCCESS.value: 'OK',
    LogLevel.WARNING.value: 'ATTENTION',
    LogLevel.ERROR.value: 'ERREUR',
}


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"entier attendu: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"doit être >= 1: {value}")
    return value


def _float_list(text: str) -> List[float]:
    try:
        values = [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"liste de nombres attendue: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("liste vide")
    return values


def _console(verbose: bool):
    """Affiche les logs sur stderr ; stdout reste réservé aux résultats"""

    def echo(message: str, level: str):
        if level == LogLevel.DEBUG.value and not verbose:
            return
        print(f"[{_LEVEL_TAGS.get(level, level.upper())}] {message}", file=sys.stderr)

    return echo


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='kfaar',
        description="Anonymisation de visages pilotée par clé et authentification sur visages virtuels",
    )
    parser.add_argument('--verbose', '-v', action='store_true', help="Affiche aussi les messages de débogage")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('keygen', help="Tire une clé utilisateur et l'affiche en hexadécimal")
    p.add_argument('--bits', type=_positive_int, required=True, help="Longueur de la clé")
    p.add_argument('--seed', type=int, default=None, help="Graine (sinon tirage cryptographique)")

    def with_config(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', required=True, help="Fichier de configuration JSON")
        p.add_argument('--workers', type=_positive_int, default=None,
                       help="Parallélise les boucles d'évaluation (ordre de fusion déterministe)")
        return p

    with_config('train-hpvfg', "Pré-entraîne les composants jouets puis entraîne le projecteur HPVFG")
    with_config('train-kvfa', "Entraîne KVFA sur les visages virtuels du checkpoint")
    with_config('evaluate', "Calcule les métriques d'évaluation")
    p = with_config('simulate', "Simule le protocole et les scénarios de menace")
    p.add_argument('--scenario', choices=SIMULATE_CHOICES, default='all')
    with_config('run-all', "Exécute tout le pipeline")
    p = with_config('sweep-weights', "Réentraîne un composant pour plusieurs valeurs d'un poids de perte")
    p.add_argument('--component', choices=('hpvfg', 'kvfa'), required=True)
    p.add_argument('--term', required=True, help="Poids balayé (ex. div, per2)")
    p.add_argument('--values', type=_float_list, required=True, help="Valeurs séparées par des virgules")

    p = sub.add_parser('anonymize', help="Génère le visage virtuel d'une image")
    p.add_argument('--image', required=True)
    p.add_argument('--key', required=True, help="Clé « <L>:0x<hex> » ou « 0x<hex> »")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--max-attempts', type=_positive_int, default=1,
                   help="Au-delà de 1, nouvelle clé tant que le visage reste reconnu")
    p.add_argument('--seed', type=int, default=None, help="Graine des clés de remplacement")

    p = sub.add_parser('authenticate', help="Authentifie un visage virtuel contre une référence")
    p.add_argument('--reference', required=True)
    p.add_argument('--virtual', required=True)
    p.add_argument('--key', default=None)
    p.add_argument('--key-length', type=_positive_int, default=None,
                   help="Modèle KVFA à utiliser sans clé (défaut : longueur principale du checkpoint)")
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--threshold', type=float, default=DEFAULT_THRESHOLD)
    return parser


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    if args.workers:
        config = replace(config, evaluation=replace(config.evaluation, workers=args.workers))
    return config


def _progress(current: int, total: int, message: str):
    logger.info(f"[{current}/{total}] {message}")


def _run_stages(args: argparse.Namespace, stages: Sequence[str], parts: Sequence[str] = SIMULATION_PARTS) -> int:
    runner = ExperimentRunner(_load_run_config(args), _progress)
    stats = runner.run(stages, parts)
    logger.info(f"Artefacts dans {runner.output_dir}")
    return EXIT_OK if stats.failed == 0 and stats.skipped == 0 else EXIT_ERROR


def cmd_keygen(args: argparse.Namespace) -> int:
    key = keygen(args.bits, args.seed)
    print(key.serialize())
    return EXIT_OK


def cmd_anonymize(args: argparse.Namespace) -> int:
    key = deserialize_key(args.key)
    world = load_world(args.checkpoint)
    pipeline = world.pipeline(key.length)
    image = load_face_image(args.image, world.bundle.config.image_size)

    if 'match_threshold' not in world.metadata:
        raise InvalidStateError("Checkpoint sans seuil de correspondance", field='match_threshold')
    eval_r = world.bundle.eval_recognizer or world.bundle.recognizer
    result = generate_virtual_checked(pipeline, eval_r, image, float(world.metadata['match_threshold']),
                                      args.max_attempts, args.seed, first_key=key)
    save_face_image(result.image, args.out)
    if result.key is not key:
        logger.warning(f"Clé révoquée après {result.attempts} essai(s), nouvelle clé {result.key.id}")
    print(json.dumps({
        'out': args.out, 'key': result.key.serialize(), 'attempts': result.attempts,
        'similarity': result.similarity, 'anonymous': result.anonymous,
    }, sort_keys=True))
    return EXIT_OK


def cmd_authenticate(args: argparse.Namespace) -> int:
    if not -1.0 <= args.threshold <= 1.0:
        raise InvalidArgumentError(f"Seuil hors de [-1, 1]: {args.threshold}", field='threshold')
    for path in (args.reference, args.virtual):
        if not validate_path(path):
            raise InvalidArgumentError(f"Image introuvable: {path}", field='image')
    key = deserialize_key(args.key) if args.key else None
    world = load_world(args.checkpoint)
    length = key.length if key else (args.key_length or int(world.metadata.get('key_length', 0)))
    model = world.kvfa(length)
    size = world.bundle.config.image_size
    decision = authenticate(model, load_face_image(args.reference, size), load_face_image(args.virtual, size),
                            key, args.threshold)
    print(json.dumps(decision.to_dict(), sort_keys=True))
    return EXIT_OK


def dispatch(args: argparse.Namespace) -> int:
    command = args.command
    if command == 'keygen':
        return cmd_keygen(args)
    if command == 'anonymize':
        return cmd_anonymize(args)
    if command == 'authenticate':
        return cmd_authenticate(args)
    if command == 'train-hpvfg':
        return _run_stages(args, (PRETRAIN, TRAIN_HPVFG))
    if command == 'train-kvfa':
        return _run_stages(args, (TRAIN_KVFA,))
    if command == 'evaluate':
        return _run_stages(args, (EVALUATE,))
    if command == 'simulate':
        parts = SIMULATION_PARTS if args.scenario == 'all' else (args.scenario,)
        return _run_stages(args, (SIMULATE,), parts)
    if command == 'run-all':
        return _run_stages(args, STAGES)
    if command == 'sweep-weights':
        runner = ExperimentRunner(_load_run_config(args), _progress)
        rows = runner.weight_sweep(args.component, args.term, args.values)
        print(json.dumps(rows, sort_keys=True))
        return EXIT_OK
    raise InvalidArgumentError(f"Commande inconnue: {command}", field='command')


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Exécute une commande.

    Args:
        argv: Arguments (défaut : sys.argv[1:])

    Returns:
        Code de sortie
    """
    args = build_parser().parse_args(argv)
    logger.set_console_callback(_console(args.verbose))
    try:
        return dispatch(args)
    except StageError as e:
        logger.error(f"Échec à l'étape '{e.stage}' (champ: {e.field or '-'}): {e}")
        return EXIT_ERROR
    except KFAARError as e:
        logger.error(f"Échec de '{args.command}' (champ: {e.field or '-'}): {e}")
        return EXIT_ERROR
    finally:
        logger.set_console_callback(None)

"""
Orchestrateur d'exécution KFAAR.
Enchaîne pré-entraînement, entraînement HPVFG puis KVFA, évaluation et simulation,
et range les artefacts dans checkpoints/, reports/ et transcripts/.
"""

import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

from backbones import SyntheticFaceDataset, build_toy_bundle, make_synthetic_dataset, pretrain_backbones
from checkpoints import TrainedWorld, load_world, read_manifest, save_world
from errors import InvalidArgumentError, InvalidStateError, KFAARError
from evaluation import evaluate_system, generate_virtual_batch, recognizer_match_threshold
from hpvfg import HPVFGTrainConfig, MappingNetwork, ProjectorHPVFG, train_hpvfg
from keying import keygen
from kvfa import KVFATrainConfig, build_kvfa_model, train_kvfa
from protocol import (
    CloudStore, KeyedModels, SimulationWorld, audit_transcripts, fault_tolerance_sweep, key_length_sweep,
    run_interaction, run_scenario,
)
from report_generator import (
    ReportError, ReportGenerator, save_face_grid, write_csv, write_json, write_transcript_jsonl,
)
from run_config import RunConfig, config_to_dict
from utils.logger import logger
from utils.seeding import seed_everything

PRETRAIN = 'pretrain'
TRAIN_HPVFG = 'train-hpvfg'
TRAIN_KVFA = 'train-kvfa'
EVALUATE = 'evaluate'
SIMULATE = 'simulate'
STAGES = (PRETRAIN, TRAIN_HPVFG, TRAIN_KVFA, EVALUATE, SIMULATE)

SIMULATION_PARTS = ('interaction', 'S1', 'S2', 'S3', 'S4', 'fault', 'keylen')

CHECKPOINT_FILE = 'world.pt'
GRID_FACES = 8


class StageError(KFAARError):
    """Échec d'une étape ; porte le nom de l'étape et le champ fautif"""

    def __init__(self, stage: str, message: str, field: Optional[str] = None):
        super().__init__(f"[{stage}] {message}", field)
        self.stage = stage


class StageStatus(Enum):
    """États possibles d'une étape"""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    SUCCESS = "success"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class StageResult:
    """Résultat d'une étape"""
    stage: str
    status: StageStatus
    duration: float = 0.0
    artifacts: List[str] = field(default_factory=list)
    error_message: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'stage': self.stage,
            'status': self.status.value,
            'duration': round(self.duration, 3),
            'artifacts': list(self.artifacts),
            'error': self.error_message,
        }


@dataclass
class RunStats:
    """Statistiques d'exécution"""
    total: int = 0
    processed: int = 0
    success: int = 0
    failed: int = 0
    skipped: int = 0

    @property
    def progress_percent(self) -> float:
        if self.total == 0:
            return 0.0
        return (self.processed / self.total) * 100

    def to_dict(self) -> Dict[str, Any]:
        return {
            'total': self.total,
            'processed': self.processed,
            'success': self.success,
            'failed': self.failed,
            'skipped': self.skipped,
            'progress': self.progress_percent
        }


class ExperimentRunner:
    """
    Exécute les étapes d'une expérience à partir d'une configuration.

    Les étapes postérieures au pré-entraînement rechargent le checkpoint du dossier
    de sortie si les composants ne sont pas déjà en mémoire.
    """

    def __init__(self, config: RunConfig,
                 progress_callback: Optional[Callable[[int, int, str], None]] = None):
        """
        Initialise l'orchestrateur.

        Args:
            config: Configuration validée
            progress_callback: Callback de progression (current, total, message)
        """
        self.config = config
        self.output_dir = config.output_dir
        self.checkpoint_dir = os.path.join(self.output_dir, 'checkpoints')
        self.reports_dir = os.path.join(self.output_dir, 'reports')
        self.transcripts_dir = os.path.join(self.output_dir, 'transcripts')
        for directory in (self.checkpoint_dir, self.reports_dir, self.transcripts_dir):
            os.makedirs(directory, exist_ok=True)

        self._progress_callback = progress_callback
        self.report_generator = ReportGenerator(os.path.join(self.reports_dir, 'pdf'))
        self._stage_pdfs: List[str] = []

        self.stats = RunStats()
        self.results: List[StageResult] = []
        self.dataset: Optional[SyntheticFaceDataset] = None
        self.world: Optional[TrainedWorld] = None

        self._is_running = False
        self._should_stop = False

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.checkpoint_dir, CHECKPOINT_FILE)

    @property
    def is_running(self) -> bool:
        return self._is_running

    def set_progress_callback(self, callback: Callable[[int, int, str], None]):
        self._progress_callback = callback

    def _report_progress(self, current: int, total: int, message: str):
        if self._progress_callback:
            self._progress_callback(current, total, message)

    def stop(self):
        """Demande l'arrêt après l'étape en cours"""
        self._should_stop = True
        logger.warning("Arrêt de l'exécution demandé...")

    # ------------------------------------------------------------------
    # Données et composants
    # ------------------------------------------------------------------

    def load_dataset(self) -> SyntheticFaceDataset:
        """Jeu du manifeste configuré, sinon jeu synthétique du flux « dataset »"""
        if self.dataset is not None:
            return self.dataset
        cfg = self.config.dataset
        if cfg.manifest:
            dataset = read_manifest(cfg.manifest)
            if dataset.image_shape != self.config.backbone.image_shape:
                raise InvalidArgumentError(
                    f"Images du manifeste {dataset.image_shape}, composants {self.config.backbone.image_shape}",
                    field='dataset.manifest')
        else:
            dataset = make_synthetic_dataset(cfg.n_identities, cfg.images_per_identity,
                                             self.config.stream_seed('dataset'),
                                             image_size=self.config.backbone.image_size)
        logger.info(f"Jeu de données: {len(dataset)} images, {dataset.n_identities} identités")
        self.dataset = dataset
        return dataset

    def load_checkpoint(self) -> TrainedWorld:
        if self.world is None:
            self.world = load_world(self.checkpoint_path)
            seed = self.world.metadata.get('seed')
            if seed is not None and seed != self.config.seed:
                logger.warning(f"Checkpoint produit avec la graine {seed}, configuration en graine {self.config.seed}")
        return self.world

    def _save_checkpoint(self) -> str:
        return save_world(self.checkpoint_path, self.world)

    def _match_threshold(self) -> float:
        if self.config.evaluation.match_threshold is not None:
            return self.config.evaluation.match_threshold
        if 'match_threshold' not in self.world.metadata:
            raise InvalidStateError("Seuil de correspondance absent du checkpoint (relancer le pré-entraînement)",
                                    field='match_threshold')
        return float(self.world.metadata['match_threshold'])

    # ------------------------------------------------------------------
    # Étapes
    # ------------------------------------------------------------------

    def stage_pretrain(self) -> List[str]:
        dataset = self.load_dataset()
        init_seed = self.config.stream_seed('init')
        bundle = build_toy_bundle(self.config.backbone, init_seed)
        seed_everything(init_seed + 2)
        mapping = MappingNetwork(self.config.backbone.mapping_layers)
        history = pretrain_backbones(bundle, mapping, dataset, self.config.pretrain)

        eval_r = bundle.eval_recognizer or bundle.recognizer
        match_threshold = recognizer_match_threshold(eval_r, dataset, self.config.evaluation.split,
                                                     self.config.evaluation.workers)
        self.world = TrainedWorld(bundle=bundle, mapping=mapping, metadata={
            'seed': self.config.seed, 'key_length': self.config.key_length, 'match_threshold': match_threshold,
        })
        artifacts = [self._save_checkpoint(),
                     write_json(os.path.join(self.reports_dir, 'pretrain_history.json'), history)]
        self._stage_pdf('Pré-entraînement', {
            'Perte finale': (['composant', 'perte'],
                             [[name, losses[-1] if losses else None] for name, losses in history.items()]),
        }, [f"Seuil de correspondance du reconnaisseur d'évaluation: {match_threshold:.4f}"])
        return artifacts

    def _train_projector(self, key_length: int, hpvfg_config: Optional[HPVFGTrainConfig] = None):
        config = hpvfg_config or self.config.for_key_length(key_length).hpvfg
        seed_everything(self.config.stream_seed('init') + 1000 + key_length)
        projector = ProjectorHPVFG(key_length, config.projector_hidden)
        projector, report = train_hpvfg(self.world.bundle, projector, self.world.mapping,
                                        self.load_dataset(), config)
        return projector, report

    def stage_train_hpvfg(self) -> List[str]:
        world = self.load_checkpoint()
        artifacts = []
        tables = {}
        for length in self.config.all_key_lengths():
            self._check_stop()
            projector, report = self._train_projector(length)
            world.projectors[length] = projector
            artifacts.append(write_csv(os.path.join(self.reports_dir, f"hpvfg_train_L{length}.csv"),
                                       report.header(), report.as_rows()))
            tables[f"L = {length}"] = (report.header(), report.as_rows())
        world.metadata['key_length'] = self.config.key_length
        artifacts.insert(0, self._save_checkpoint())
        self._stage_pdf('Entraînement HPVFG', tables)
        return artifacts

    def _train_kvfa(self, length: int, kvfa_config: Optional[KVFATrainConfig] = None):
        config = kvfa_config or self.config.for_key_length(length).kvfa
        seed_everything(self.config.stream_seed('init') + 2000 + length)
        model = build_kvfa_model(self.config.backbone, config)
        return train_kvfa(model, self.world.pipeline(length, self.config.hpvfg.use_pose_correction),
                          self.load_dataset(), config)

    def stage_train_kvfa(self) -> List[str]:
        world = self.load_checkpoint()
        artifacts = []
        tables = {}
        for length in self.config.all_key_lengths():
            self._check_stop()
            model, report = self._train_kvfa(length)
            world.kvfa_models[length] = model
            artifacts.append(write_csv(os.path.join(self.reports_dir, f"kvfa_train_L{length}.csv"),
                                       report.header(), report.as_rows()))
            tables[f"L = {length}"] = (report.header(), report.as_rows())
        artifacts.insert(0, self._save_checkpoint())
        self._stage_pdf('Entraînement KVFA', tables)
        return artifacts

    def _evaluation_config(self):
        return replace(self.config.evaluation, match_threshold=self._match_threshold())

    def stage_evaluate(self) -> List[str]:
        world = self.load_checkpoint()
        dataset = self.load_dataset()
        length = self.config.key_length
        pipeline = world.pipeline(length, self.config.hpvfg.use_pose_correction)
        result = evaluate_system(pipeline, world.kvfa(length), dataset, self._evaluation_config(),
                                 self.config.stream_seed('keys'), metadata={'root_seed': self.config.seed})
        report = result.report

        artifacts = [
            write_json(os.path.join(self.reports_dir, 'metrics.json'), report.to_dict()),
            write_csv(os.path.join(self.reports_dir, 'metrics.csv'), report.columns(), [report.to_row()]),
        ]
        sweep_rows = [[row['threshold'], row['crr'], row['far']] for row in result.sweep]
        if sweep_rows:
            artifacts.append(write_csv(os.path.join(self.reports_dir, 'threshold_sweep.csv'),
                                       ['threshold', 'crr', 'far'], sweep_rows))

        # Planche : originaux puis visages virtuels correspondants
        images = dataset.images(self.config.evaluation.split)[:GRID_FACES]
        keys = [keygen(length, self.config.stream_seed('keys') + i) for i in range(len(images))]
        grid = os.path.join(self.reports_dir, 'faces.png')
        artifacts.append(save_face_grid([images, generate_virtual_batch(pipeline, images, keys)], grid))

        self._stage_pdf('Évaluation', {
            'Métriques': (report.columns(), [report.to_row()]),
            'Balayage de seuils': (['threshold', 'crr', 'far'], sweep_rows),
        }, [f"Préservation de la posture: {result.pose_preservation:.2%}"], grid)
        return artifacts

    def simulation_world(self) -> SimulationWorld:
        world = self.load_checkpoint()
        models = {
            length: KeyedModels(world.pipeline(length, self.config.hpvfg.use_pose_correction), world.kvfa(length))
            for length in self.config.all_key_lengths()
        }
        return SimulationWorld(
            dataset=self.load_dataset(),
            models=models,
            eval_recognizer=world.bundle.eval_recognizer or world.bundle.recognizer,
            match_threshold=self._match_threshold(),
            auth_threshold=self.config.threshold,
            split=self.config.evaluation.split,
        )

    def stage_simulate(self, parts: Sequence[str] = SIMULATION_PARTS) -> List[str]:
        unknown = [p for p in parts if p not in SIMULATION_PARTS]
        if unknown:
            raise InvalidArgumentError(f"Simulation inconnue: {unknown}", field='scenario')
        sim = self.config.simulation
        seed = self.config.stream_seed('simulation')
        world = self.simulation_world()
        artifacts = []
        tables = {}

        if 'interaction' in parts:
            cloud = CloudStore()
            images = world.pick_images(sim.n_interactions, seed)
            transcripts = []
            for i, x in enumerate(images):
                self._check_stop()
                transcripts.append(run_interaction(world, x, self.config.key_length, seed + i, cloud))
            audit = audit_transcripts(transcripts)
            accepted = sum(bool(t.stage(6).notes['accept']) for t in transcripts)
            mismatched = sum(bool(t.stage(4).notes['fr_mismatch']) for t in transcripts)
            artifacts += [
                write_transcript_jsonl(os.path.join(self.transcripts_dir, 'interactions.jsonl'), transcripts),
                write_transcript_jsonl(os.path.join(self.transcripts_dir, 'vfas_observations.jsonl'),
                                       world.vfas_observations),
                write_json(os.path.join(self.reports_dir, 'audit.json'), audit.to_dict()),
            ]
            tables['Interactions'] = (['n', 'fr_mismatch', 'vfas_accept', 'violations'],
                                      [[len(transcripts), mismatched, accepted, len(audit.violations)]])
            if not audit.clean:
                raise InvalidArgumentError(f"Audit: {audit.violations[0]}", field='audit')

        scenarios = [p for p in parts if p in ('S1', 'S2', 'S3', 'S4') and p in sim.scenarios]
        if scenarios:
            reports = []
            for scenario in scenarios:
                self._check_stop()
                reports.append(run_scenario(world, scenario, sim.n_trials, seed, self.config.key_length))
            rows = [[r.scenario, r.mean_similarity, r.accept_rate] for r in reports]
            artifacts += [
                write_json(os.path.join(self.reports_dir, 'scenarios.json'), [r.to_dict() for r in reports]),
                write_csv(os.path.join(self.reports_dir, 'scenarios.csv'),
                          ['scenario', 'mean_similarity', 'accept_rate'], rows),
            ]
            tables['Scénarios'] = (['scenario', 'mean_similarity', 'accept_rate'], rows)

        sweeps = []
        if 'fault' in parts:
            sweeps.append(fault_tolerance_sweep(world, sim.key_lengths, sim.error_bits, sim.n_trials, seed))
        if 'keylen' in parts:
            sweeps.append(key_length_sweep(world, sim.key_lengths, sim.n_trials, seed))
        for table in sweeps:
            artifacts += [
                write_json(os.path.join(self.reports_dir, f"{table.name}.json"), table.to_dict()),
                write_csv(os.path.join(self.reports_dir, f"{table.name}.csv"), table.header(), table.as_rows()),
            ]
            tables[table.name] = (table.header(), table.as_rows())

        self._stage_pdf('Simulation du protocole', tables)
        return artifacts

    # ------------------------------------------------------------------
    # Balayage des poids de perte
    # ------------------------------------------------------------------

    def weight_sweep(self, component: str, term: str, values: Sequence[float]) -> List[Dict[str, Optional[float]]]:
        """
        Réentraîne un composant pour chaque valeur d'un poids, les autres fixés.

        Args:
            component: 'hpvfg' (AUC, anonymat, diversité) ou 'kvfa' (CRR, FAR)
            term: Nom du poids (ex. 'div', 'per2')
            values: Valeurs essayées

        Returns:
            Une ligne par valeur
        """
        if component not in ('hpvfg', 'kvfa'):
            raise InvalidArgumentError(f"Composant inconnu: {component}", field='component')
        section = getattr(self.config, component)
        if term not in section.weights.TERMS:
            raise InvalidArgumentError(f"Poids inconnu pour {component}: {term}", field='term')
        if not values:
            raise InvalidArgumentError("Aucune valeur à balayer", field='values')

        world = self.load_checkpoint()
        length = self.config.key_length
        eval_config = self._evaluation_config()
        rows = []
        for i, value in enumerate(values):
            self._check_stop()
            self._report_progress(i + 1, len(values), f"{component}: {term} = {value}")
            logger.info(f"Balayage {component}.{term} = {value}")
            trained = replace(self.config.for_key_length(length), **{component: replace(
                section, key_length=length, weights=replace(section.weights, **{term: float(value)}))})
            if component == 'hpvfg':
                projector, _ = self._train_projector(length, trained.hpvfg)
                pipeline = TrainedWorld(world.bundle, world.mapping, {length: projector}).pipeline(
                    length, trained.hpvfg.use_pose_correction)
                result = evaluate_system(pipeline, None, self.load_dataset(), eval_config,
                                         self.config.stream_seed('keys'))
                rows.append({term: float(value), 'auc': result.report.auc,
                             'anonymity': result.report.anonymity, 'diversity': result.report.diversity})
            else:
                model, _ = self._train_kvfa(length, trained.kvfa)
                result = evaluate_system(world.pipeline(length, self.config.hpvfg.use_pose_correction), model,
                                         self.load_dataset(), eval_config, self.config.stream_seed('keys'))
                rows.append({term: float(value), 'crr': result.report.crr, 'far': result.report.far})

        header = list(rows[0])
        write_csv(os.path.join(self.reports_dir, f"weight_sweep_{component}_{term}.csv"),
                  header, [[row[c] for c in header] for row in rows])
        return rows

    # ------------------------------------------------------------------
    # Boucle principale
    # ------------------------------------------------------------------

    def _check_stop(self):
        if self._should_stop:
            raise InterruptedError("Exécution interrompue par l'utilisateur")

    def _stage_pdf(self, title: str, tables: Dict[str, Any], notes: Optional[List[str]] = None,
                   image_path: Optional[str] = None):
        if not self.report_generator.available:
            return
        try:
            self._stage_pdfs.append(self.report_generator.stage_pdf(title, tables, notes, image_path))
        except ReportError as e:
            logger.warning(f"Résumé PDF non généré pour '{title}': {e}")

    def _dispatch(self, stage: str, simulation_parts: Sequence[str]) -> List[str]:
        if stage == PRETRAIN:
            return self.stage_pretrain()
        if stage == TRAIN_HPVFG:
            return self.stage_train_hpvfg()
        if stage == TRAIN_KVFA:
            return self.stage_train_kvfa()
        if stage == EVALUATE:
            return self.stage_evaluate()
        return self.stage_simulate(simulation_parts)

    def run(self, stages: Sequence[str] = STAGES,
            simulation_parts: Sequence[str] = SIMULATION_PARTS) -> RunStats:
        """
        Exécute les étapes demandées dans l'ordre du pipeline.

        Args:
            stages: Sous-ensemble de STAGES
            simulation_parts: Parties de la simulation à exécuter

        Returns:
            Statistiques d'exécution

        Raises:
            StageError: à la première étape en échec (les suivantes sont ignorées)
        """
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise StageError(unknown[0], "Étape inconnue", field='stage')
        ordered = [s for s in STAGES if s in stages]

        self._is_running = True
        self._should_stop = False
        self.stats = RunStats(total=len(ordered))
        self.results = []
        self._stage_pdfs = []
        write_json(os.path.join(self.output_dir, 'effective_config.json'), config_to_dict(self.config))

        try:
            for i, stage in enumerate(ordered):
                if self._should_stop:
                    logger.warning("Exécution interrompue par l'utilisateur")
                    for skipped in ordered[i:]:
                        self.results.append(StageResult(skipped, StageStatus.SKIPPED,
                                                        error_message="Exécution interrompue"))
                        self.stats.skipped += 1
                    break

                self._report_progress(i + 1, self.stats.total, f"Étape: {stage}")
                logger.info(f"Étape {i + 1}/{self.stats.total}: {stage}")
                result = StageResult(stage, StageStatus.IN_PROGRESS)
                start = time.perf_counter()
                try:
                    result.artifacts = self._dispatch(stage, simulation_parts)
                    result.status = StageStatus.SUCCESS
                except InterruptedError as e:
                    result.status = StageStatus.SKIPPED
                    result.error_message = str(e)
                except KFAARError as e:
                    result.status = StageStatus.FAILED
                    result.error_message = str(e)
                    raise StageError(stage, str(e), e.field) from e
                except Exception as e:
                    result.status = StageStatus.FAILED
                    result.error_message = f"{type(e).__name__}: {e}"
                    raise StageError(stage, result.error_message) from e
                finally:
                    result.duration = time.perf_counter() - start
                    self.results.append(result)
                    self.stats.processed += 1
                    if result.status == StageStatus.SUCCESS:
                        self.stats.success += 1
                        logger.success(f"Étape {stage} terminée en {result.duration:.1f} s")
                    elif result.status == StageStatus.FAILED:
                        self.stats.failed += 1
                        logger.error(f"Étape {stage} en échec: {result.error_message}")
                    else:
                        self.stats.skipped += 1
        finally:
            self._is_running = False
            write_json(os.path.join(self.reports_dir, 'run_stats.json'), {
                'stats': self.stats.to_dict(), 'stages': [r.to_dict() for r in self.results]})
            if self._stage_pdfs:
                self.report_generator.merge(self._stage_pdfs, os.path.join(self.reports_dir, 'run_report.pdf'))
            logger.export_logs(os.path.join(self.output_dir, 'kfaar.log'))

        return self.stats

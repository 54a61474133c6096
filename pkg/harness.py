"""
Stage orchestration for a full experiment run.

Each stage writes artifacts under the output directory and records their
content hashes in manifest.json. A stage is done only while its artifacts
exist and hash-match; re-running a stage marks everything downstream of it
pending. Every stage seed is derived from the global seed and the stage name.
"""

import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from attacks import attack_corpus, attack_success_rate, build_attack_config, load_pairs, save_pairs
from classifiers import ClassifierModel, accuracy_on_arrays
from config import Config, ExperimentConfig
from data_synth import (
    SPLITS,
    CorpusSplits,
    generate_labeled_corpus,
    generate_unlabeled_corpus,
    load_corpus,
    load_image_split,
    load_unlabeled_corpus,
    save_corpus,
    stack_values,
)
from defenses import FILTER_ARMS, load_suite, rand_encoder, save_suite_manifest, train_arm
from diagnostics import (
    defense_report,
    lnsr_comparison,
    robustness_sweep,
    write_curves_csv,
    write_lnsr_csv,
)
from encoder import EncoderModel, pretrain, random_init, reconstruction_error
from exceptions import ConfigError, CorpusFormatError, MissingUpstreamError
from models import Architecture, AttackAlgorithm, RunManifest, StageRecord, StageStatus, TrainConfig
from utils import artifact_name, config_hash, derive_seed, file_sha256, parallel_map, write_json

logger = logging.getLogger(__name__)

TRAIN_ARMS = ("mel", "mock", "rand", "scratch")

# stage -> upstream stages
STAGES: Dict[str, Tuple[str, ...]] = {
    "data": (),
    "pretrain": ("data",),
    "train:mel": ("data",),
    "train:mock": ("data", "pretrain"),
    "train:rand": ("data",),
    "train:scratch": ("data",),
    "attack": ("train:mel",),
    "evaluate": ("attack", "train:mel", "train:mock", "train:rand", "train:scratch"),
    "lnsr": ("attack", "pretrain", "train:rand"),
}


def command_for(stage: str) -> str:
    """CLI command that produces a stage."""
    if stage.startswith("train:"):
        return f"train --arm {stage.split(':', 1)[1]}"
    return stage


def downstream_of(stage: str) -> List[str]:
    """Stages that transitively depend on stage."""
    found: List[str] = []
    frontier = [stage]
    while frontier:
        current = frontier.pop()
        for name, deps in STAGES.items():
            if current in deps and name not in found:
                found.append(name)
                frontier.append(name)
    return found


class OutputLock:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = self.path.read_text().strip() or "unknown"
            raise ConfigError(f"{self.path.parent} is locked by process {owner}; "
                              f"remove {self.path} if that process is gone") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


class ExperimentRunner:
    """Runs stages of one experiment into one output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, force: bool = False):
        self.config = config
        self.out = Path(out_dir)
        self.force = force
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()
        self._splits: Optional[CorpusSplits] = None
        self._handlers: Dict[str, Callable[[], List[Path]]] = {
            "data": self._stage_data,
            "pretrain": self._stage_pretrain,
            "train:mel": self._stage_train_mel,
            "train:mock": self._stage_train_mock,
            "train:rand": self._stage_train_rand,
            "train:scratch": self._stage_train_scratch,
            "attack": self._stage_attack,
            "evaluate": self._stage_evaluate,
            "lnsr": self._stage_lnsr,
        }

    # Manifest

    def _load_manifest(self) -> RunManifest:
        snapshot = self.config.to_dict()
        digest = config_hash(snapshot)
        if self.manifest_path.exists():
            manifest = RunManifest.from_dict(json.loads(self.manifest_path.read_text()))
            if manifest.config_hash == digest:
                return manifest
            if not self.force:
                raise ConfigError(f"config differs from the one recorded in {self.manifest_path}; "
                                  f"pass --force or use a fresh output directory")
            logger.warning("Config changed; --force discards every recorded stage")
        return RunManifest(config=snapshot, config_hash=digest,
                           stages={name: StageRecord() for name in STAGES})

    def _save_manifest(self) -> None:
        write_json(self.manifest_path, self.manifest.to_dict())

    def is_done(self, stage: str) -> bool:
        record = self.manifest.stages.get(stage)
        if record is None or record.status is not StageStatus.DONE:
            return False
        for rel, digest in record.artifacts.items():
            path = self.out / rel
            if not path.exists() or file_sha256(path) != digest:
                logger.warning(f"Artifact {rel} of stage {stage} is missing or modified; stage must re-run")
                return False
        return True

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """
        Run one stage unless it is already done.

        Args:
            stage: Stage name
            force: Re-run even if done

        Returns:
            True if the stage ran, False if it was skipped

        Raises:
            MissingUpstreamError: If an upstream stage is not done
        """
        for dep in STAGES[stage]:
            if not self.is_done(dep):
                raise MissingUpstreamError(command_for(dep), f"needed by {stage}")
        if not force and self.is_done(stage):
            logger.info(f"Stage {stage}: up to date, skipping")
            return False

        logger.info(f"Stage {stage}: running")
        artifacts = self._handlers[stage]()
        self.manifest.stages[stage] = StageRecord(
            StageStatus.DONE,
            {str(p.relative_to(self.out)): file_sha256(p) for p in sorted(artifacts)},
        )
        for name in downstream_of(stage):
            self.manifest.stages[name] = StageRecord()
        self._save_manifest()
        logger.info(f"Stage {stage}: done ({len(artifacts)} artifacts)")
        return True

    def run_all(self) -> List[str]:
        """Run every stage in dependency order; returns the stages that actually ran."""
        ran = []
        for stage in STAGES:
            if self.run_stage(stage, force=self.force):
                ran.append(stage)
        return ran

    def run_train(self, arm: Optional[str] = None) -> List[str]:
        arms = TRAIN_ARMS if arm is None else (arm,)
        unknown = set(arms) - set(TRAIN_ARMS)
        if unknown:
            raise ConfigError(f"unknown arm {sorted(unknown)}; choose from {', '.join(TRAIN_ARMS)}")
        return [f"train:{a}" for a in arms if self.run_stage(f"train:{a}", force=self.force)]

    # Helpers

    def seed(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)

    @property
    def architectures(self) -> List[Architecture]:
        return [Architecture(a) for a in self.config.architectures]

    def directions(self) -> List[Tuple[Architecture, Architecture]]:
        """(attacker, target) pairs; both transfer directions when both families are configured."""
        archs = self.architectures
        return [(a, a.other) for a in archs if a.other in archs]

    def splits(self) -> CorpusSplits:
        if self._splits is None:
            bins = self.config.corpus.bins
            self._splits = CorpusSplits(*(load_corpus(self.out / "data" / f"{s}.jsonl", bins) for s in SPLITS))
        return self._splits

    def _classifier_path(self, arch: Architecture, arm: str) -> Path:
        return self.out / "classifiers" / f"{arch.value}_{arm}.npz"

    def _encoder_path(self, name: str) -> Path:
        return self.out / "encoders" / f"{name}.npz"

    def _pairs_path(self, attacker: Architecture, algorithm: AttackAlgorithm, eps: float) -> Path:
        return self.out / "attacks" / f"{artifact_name(attacker.value, algorithm.value, float(eps))}.jsonl"

    def _attacker(self, arch: Architecture) -> ClassifierModel:
        return ClassifierModel.load(self._classifier_path(arch, "Mel"), architecture=arch)

    def _pgd_epsilons(self) -> List[float]:
        return sorted(set(self.config.epsilons) | set(self.config.lnsr_epsilons))

    # Stages

    def _import_split(self, source: Path, split: str):
        bins = self.config.corpus.bins
        if (source / f"{split}.jsonl").is_file():
            return load_corpus(source / f"{split}.jsonl", bins)
        if (source / split).is_dir():
            return load_image_split(source / split, bins)
        raise ConfigError(f"imported corpus {source} has neither {split}.jsonl nor a {split}/ image folder")

    def _stage_data(self) -> List[Path]:
        data_dir = self.out / "data"
        cfg = self.config
        if cfg.corpus_import_path:
            source = Path(cfg.corpus_import_path)
            splits = CorpusSplits(*(self._import_split(source, s) for s in SPLITS))
            if any(not split for split in splits):
                raise ConfigError(f"imported corpus {source} has an empty split")
            frames = {name: split[0].spec.frames for name, split in zip(SPLITS, splits)}
            if len(set(frames.values())) > 1:
                raise CorpusFormatError(f"imported splits disagree on the frame count: {frames}")
            logger.info(f"Imported labeled corpus from {source}")
        else:
            splits = generate_labeled_corpus(replace(cfg.corpus, seed=self.seed("data")))
        paths = []
        for name, examples in zip(SPLITS, splits):
            path = data_dir / f"{name}.jsonl"
            save_corpus(examples, path)
            paths.append(path)
        frames = splits.train[0].spec.frames
        unlabeled = generate_unlabeled_corpus(cfg.unlabeled_count, self.seed("data:unlabeled"), frames,
                                              cfg.corpus.bins, cfg.corpus.noise_level,
                                              cfg.corpus.class_separation)
        path = data_dir / "unlabeled.jsonl"
        save_corpus(unlabeled, path)
        self._splits = splits
        return paths + [path]

    def _stage_pretrain(self) -> List[Path]:
        corpus = load_unlabeled_corpus(self.out / "data" / "unlabeled.jsonl", self.config.corpus.bins)
        held_out = [ex.spec for ex in self.splits().dev]
        model = random_init(self.config.encoder, self.seed("pretrain:init"))
        heldout_seed = self.seed("pretrain:heldout")
        before = reconstruction_error(model, held_out, self.config.masking, heldout_seed)
        model, history = pretrain(model, corpus, self.config.masking,
                                  replace(self.config.pretrain, seed=self.seed("pretrain")))
        after = reconstruction_error(model, held_out, self.config.masking, heldout_seed)
        logger.info(f"Held-out masked L1: {before:.4f} at init, {after:.4f} after pre-training")
        ckpt = self._encoder_path("pretrained")
        model.save(ckpt)
        hist = self.out / "encoders" / "pretrain_history.json"
        write_json(hist, {"l1_loss": history, "dev_reconstruction_error": {"init": before, "pretrained": after}})
        return [ckpt, hist]

    def _train_each(self, arm: str, config: TrainConfig, **encoder_inputs) -> List[Tuple[Architecture, Tuple]]:
        """Train one arm for every architecture, in parallel; results are in architecture order."""
        splits = self.splits()

        def run(arch: Architecture):
            return arch, train_arm(arm, arch, splits.train, splits.dev, config, self.config.seed, **encoder_inputs)

        return parallel_map(run, self.architectures, Config.THREADS)

    def _stage_train_mel(self) -> List[Path]:
        paths = []
        for arch, (_, model) in self._train_each("mel", self.config.classifier):
            model.save(self._classifier_path(arch, "Mel"))
            paths.append(self._classifier_path(arch, "Mel"))
        return paths

    def _stage_train_mock(self) -> List[Path]:
        encoder = EncoderModel.load(self._encoder_path("pretrained"), expected=self.config.encoder)
        paths = []
        for arch, (_, model) in self._train_each("mock", self.config.classifier, encoder=encoder):
            model.save(self._classifier_path(arch, "Mock"))
            paths.append(self._classifier_path(arch, "Mock"))
        return paths

    def _stage_train_rand(self) -> List[Path]:
        encoder = rand_encoder(self.config.encoder, self.config.seed)
        encoder.save(self._encoder_path("rand"))
        paths = [self._encoder_path("rand")]
        for arch, (_, model) in self._train_each("rand", self.config.classifier, encoder=encoder):
            model.save(self._classifier_path(arch, "rand"))
            paths.append(self._classifier_path(arch, "rand"))
        return paths

    def _stage_train_scratch(self) -> List[Path]:
        budget = self.config.scratch_train
        logger.info(f"Scratch arm budget: {budget.epochs} epochs "
                    f"({self.config.classifier.epochs} classifier + {self.config.pretrain.epochs} pre-training)")
        paths = []
        for arch, (encoder, classifier) in self._train_each("scratch", budget, encoder_config=self.config.encoder):
            enc_path = self._encoder_path(f"{arch.value}_scratch")
            encoder.save(enc_path)
            classifier.save(self._classifier_path(arch, "scratch"))
            paths += [enc_path, self._classifier_path(arch, "scratch")]
        return paths

    def _stage_attack(self) -> List[Path]:
        eval_set = self.splits().eval
        settings = self.config.attack
        paths = []
        for attacker_arch, _ in self.directions():
            attacker = self._attacker(attacker_arch)
            for name in settings.algorithms:
                algorithm = AttackAlgorithm(name)
                grid = self._pgd_epsilons() if algorithm is AttackAlgorithm.PGD else self.config.epsilons
                for eps in grid:
                    config = build_attack_config(
                        algorithm, eps, settings.pgd_steps, settings.pgd_step_size, settings.random_start,
                        self.seed(f"attack:{attacker_arch.value}:{algorithm.value}:{eps:g}"))
                    pairs = attack_corpus(attacker, eval_set, config, source_model_id=f"{attacker_arch.value}/Mel")
                    logger.info(f"{config.summary()} from {attacker_arch.value}/Mel: "
                                f"{attack_success_rate(attacker, pairs):.3f} of predictions flipped")
                    path = self._pairs_path(attacker_arch, algorithm, eps)
                    save_pairs(pairs, path)
                    paths.append(path)
        return paths

    def _suite_entries(self, arch: Architecture) -> Dict[str, Dict[str, object]]:
        def rel(path: Path) -> str:
            return str(path.relative_to(self.out))

        mel = rel(self._classifier_path(arch, "Mel"))
        entries = {"Mel": {"front_end": "identity", "classifier_checkpoint": mel}}
        for kind in FILTER_ARMS:
            entries[kind] = {"front_end": "filter", "classifier_checkpoint": mel,
                             "filter": {"kind": kind, "kernel_size": self.config.filters.kernel_size,
                                        "sigma": self.config.filters.sigma}}
        encoders = {"Mock": "pretrained", "rand": "rand", "scratch": f"{arch.value}_scratch"}
        for arm, enc in encoders.items():
            entries[arm] = {"front_end": "encoder",
                            "encoder_checkpoint": rel(self._encoder_path(enc)),
                            "classifier_checkpoint": rel(self._classifier_path(arch, arm))}
        return entries

    def _stage_evaluate(self) -> List[Path]:
        eval_set = self.splits().eval
        values, labels = stack_values(eval_set)
        algorithms = [AttackAlgorithm(a) for a in self.config.attack.algorithms]
        curves, paths, white_box = [], [], {}
        for attacker_arch, target_arch in self.directions():
            manifest = self.out / f"defenders_{target_arch.value}.json"
            save_suite_manifest(manifest, self._suite_entries(target_arch))
            paths.append(manifest)
            suite = load_suite(manifest)
            attacker = self._attacker(attacker_arch)

            def provider(algorithm, eps, arch=attacker_arch):
                return load_pairs(self._pairs_path(arch, algorithm, eps))

            for algorithm in algorithms:
                for eps in self.config.epsilons:
                    if not self._pairs_path(attacker_arch, algorithm, eps).exists():
                        raise MissingUpstreamError("attack", f"no {algorithm.value} pairs at eps={eps:g}")
            curves += robustness_sweep(suite, attacker, eval_set, algorithms, self.config.epsilons,
                                       pair_provider=provider, name_prefix=f"{target_arch.value}-")

            wb = {"clean": accuracy_on_arrays(attacker, values, labels)}
            for eps in self._pgd_epsilons():
                path = self._pairs_path(attacker_arch, AttackAlgorithm.PGD, eps)
                if path.exists():
                    adv = np.stack([p.adversarial for p in load_pairs(path)])
                    wb[f"pgd_{eps:g}"] = accuracy_on_arrays(attacker, adv, labels)
            white_box[attacker_arch.value] = wb

        curves_path = self.out / "curves.csv"
        write_curves_csv(curves, curves_path)
        targets = [t.value for _, t in self.directions()]
        summary = defense_report(curves, targets, [e for e in (4.0, 8.0, 16.0) if e in self.config.epsilons]
                                 or list(self.config.epsilons[-1:]))
        summary["white_box_accuracy"] = white_box
        summary_path = self.out / "summary.json"
        write_json(summary_path, summary)
        logger.info(f"Defense ordering held in {summary['ordering_held']}/{summary['ordering_total']} cells")
        return paths + [curves_path, summary_path]

    def _stage_lnsr(self) -> List[Path]:
        directions = self.directions()
        if not directions:
            raise ConfigError("LNSR needs at least one attacker/target direction")
        attacker_arch = directions[0][0]
        pretrained = EncoderModel.load(self._encoder_path("pretrained"), expected=self.config.encoder)
        rand = EncoderModel.load(self._encoder_path("rand"), expected=self.config.encoder)
        pairs_by_eps = {}
        for eps in self.config.lnsr_epsilons:
            path = self._pairs_path(attacker_arch, AttackAlgorithm.PGD, eps)
            if not path.exists():
                raise MissingUpstreamError("attack", f"no pgd pairs at eps={eps:g}")
            pairs_by_eps[eps] = load_pairs(path)
        rows = lnsr_comparison(pretrained, rand, pairs_by_eps)
        path = self.out / "lnsr.csv"
        write_lnsr_csv(rows, path)
        return [path]

import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from classifiers import ClassifierModel
from config import experiment_config_from_dict
from data_synth import load_corpus, save_corpus
from defenses import build_defender_suite
from diagnostics import read_curves_csv
from encoder import EncoderModel
from exceptions import ConfigError, CorpusFormatError, MissingUpstreamError
from harness import STAGES, ExperimentRunner, OutputLock, command_for, downstream_of
from main import main
from models import Architecture, LabeledExample, Spectrogram

def parameter_digest(model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


TINY_CONFIG = {
    "corpus": {"n_train": 8, "n_dev": 2, "n_eval": 4, "frames": 16, "bins": 8, "bumps": 2},
    "unlabeled_count": 4,
    "masking": {"segment_length": 2},
    "encoder": {"layers": 2, "model_dim": 8, "heads": 2, "ff_dim": 16, "bins": 8, "stack_factor": 2},
    "pretrain": {"epochs": 1, "batch_size": 2},
    "classifier": {"epochs": 1, "batch_size": 4},
    "attack": {"pgd_steps": 2},
    "epsilons": [1.0, 2.0],
    "lnsr_epsilons": [2.0],
}


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    runner = ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), out)
    ran = runner.run_all()
    return out, ran


class TestStageGraph:
    def test_train_stages_map_to_arm_flag(self):
        assert command_for("train:mock") == "train --arm mock"
        assert command_for("attack") == "attack"

    def test_downstream(self):
        assert set(downstream_of("pretrain")) == {"train:mock", "lnsr", "evaluate"}
        assert downstream_of("evaluate") == []
        assert set(downstream_of("data")) == set(STAGES) - {"data"}


class TestFullRun:
    def test_all_stages_ran(self, finished_run):
        _, ran = finished_run
        assert ran == list(STAGES)

    def test_outputs(self, finished_run):
        out, _ = finished_run
        curves = read_curves_csv(out / "curves.csv")
        # 2 directions x 7 defenders x 2 algorithms x 3 grid points
        assert len(curves) == 84
        assert {row["epsilon"] for row in curves} == {"0", "1", "2"}
        assert {row["defender"].split("-")[0] for row in curves} == {"A", "B"}
        lnsr_rows = (out / "lnsr.csv").read_text().splitlines()
        assert len(lnsr_rows) == 1 + 2 * 3
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["white_box_accuracy"]) == {"A", "B"}
        history = json.loads((out / "encoders" / "pretrain_history.json").read_text())
        assert len(history["l1_loss"]) == 1
        assert set(history["dev_reconstruction_error"]) == {"init", "pretrained"}
        manifest = json.loads((out / "manifest.json").read_text())
        assert all(rec["status"] == "done" for rec in manifest["stages"].values())

    def test_second_run_is_noop(self, finished_run):
        out, _ = finished_run
        assert ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), out).run_all() == []

    def test_same_seed_same_bytes(self, finished_run, tmp_path):
        out, _ = finished_run
        ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), tmp_path).run_all()
        for name in ("curves.csv", "lnsr.csv", "summary.json"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_tampered_artifact_reruns_stage(self, finished_run, tmp_path):
        out, _ = finished_run
        runner = ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), tmp_path)
        runner.run_all()
        (tmp_path / "curves.csv").write_text("defender\n")
        assert runner.run_all() == ["evaluate"]
        assert (tmp_path / "curves.csv").read_bytes() == (out / "curves.csv").read_bytes()

    def test_library_suite_matches_trained_checkpoints(self, finished_run):
        out, _ = finished_run
        config = experiment_config_from_dict(TINY_CONFIG)
        train, dev = (load_corpus(out / "data" / f"{s}.jsonl") for s in ("train", "dev"))
        suite = build_defender_suite(train, dev, out / "encoders" / "pretrained.npz", Architecture.B,
                                     config.classifier, config.scratch_train, config.seed)
        for arm in ("Mel", "Mock", "rand", "scratch"):
            saved = ClassifierModel.load(out / "classifiers" / f"B_{arm}.npz")
            assert parameter_digest(suite[arm].classifier) == parameter_digest(saved), arm
        for arm, name in (("rand", "rand"), ("scratch", "B_scratch")):
            saved = EncoderModel.load(out / "encoders" / f"{name}.npz")
            assert parameter_digest(suite[arm].encoder) == parameter_digest(saved), arm


class TestResumability:
    def test_missing_upstream(self, tmp_path):
        runner = ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), tmp_path)
        with pytest.raises(MissingUpstreamError) as info:
            runner.run_stage("evaluate")
        assert info.value.command == "attack"
        assert "lab attack" in str(info.value)

    def test_missing_arm(self, tmp_path):
        runner = ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), tmp_path)
        runner.run_stage("data")
        with pytest.raises(MissingUpstreamError, match="lab pretrain"):
            runner.run_train("mock")

    def test_config_change_needs_force(self, tmp_path):
        ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), tmp_path).run_stage("data")
        changed = experiment_config_from_dict({**TINY_CONFIG, "seed": 1})
        with pytest.raises(ConfigError, match="--force"):
            ExperimentRunner(changed, tmp_path)
        runner = ExperimentRunner(changed, tmp_path, force=True)
        assert not runner.is_done("data")

    def test_rerun_marks_downstream_pending(self, tmp_path):
        runner = ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), tmp_path)
        runner.run_stage("data")
        runner.run_stage("pretrain")
        assert runner.run_stage("data", force=True)
        assert not runner.is_done("pretrain")

    def test_imported_corpus(self, tmp_path):
        source = tmp_path / "source"
        ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), source).run_stage("data")
        imported = experiment_config_from_dict({**TINY_CONFIG, "corpus_import_path": str(source / "data")})
        out = tmp_path / "imported"
        ExperimentRunner(imported, out).run_stage("data")
        for split in ("train", "dev", "eval"):
            assert (out / "data" / f"{split}.jsonl").read_bytes() == (source / "data" / f"{split}.jsonl").read_bytes()

    def test_imported_image_corpus(self, tmp_path):
        source = tmp_path / "images"
        for split in ("train", "dev", "eval"):
            for label, name in enumerate(("bonafide", "spoof")):
                folder = source / split / name
                folder.mkdir(parents=True)
                for i in range(2):
                    pixels = np.full((8, 16), 60 * label + 10 * i, dtype=np.uint8)
                    Image.fromarray(pixels).save(folder / f"{i}.png")
        config = experiment_config_from_dict({**TINY_CONFIG, "corpus_import_path": str(source)})
        runner = ExperimentRunner(config, tmp_path / "out")
        assert runner.run_stage("data")
        train = load_corpus(tmp_path / "out" / "data" / "train.jsonl", bins=8)
        assert [ex.label for ex in train] == [0, 0, 1, 1]
        assert all(ex.spec.shape == (16, 8) for ex in train)

    def test_imported_splits_must_share_frames(self, tmp_path):
        source = tmp_path / "source"
        ExperimentRunner(experiment_config_from_dict(TINY_CONFIG), source).run_stage("data")
        save_corpus([LabeledExample(Spectrogram(np.zeros((17, 8))), 0)], source / "data" / "dev.jsonl")
        imported = experiment_config_from_dict({**TINY_CONFIG, "corpus_import_path": str(source / "data")})
        with pytest.raises(CorpusFormatError, match="frame count"):
            ExperimentRunner(imported, tmp_path / "out").run_stage("data")

    def test_imported_split_missing(self, tmp_path):
        (tmp_path / "empty").mkdir()
        imported = experiment_config_from_dict({**TINY_CONFIG, "corpus_import_path": str(tmp_path / "empty")})
        with pytest.raises(ConfigError, match="train.jsonl"):
            ExperimentRunner(imported, tmp_path / "out").run_stage("data")

    def test_lock_is_exclusive(self, tmp_path):
        with OutputLock(tmp_path):
            with pytest.raises(ConfigError, match="locked"):
                with OutputLock(tmp_path):
                    pass
        assert not (tmp_path / ".lock").exists()


class TestCommandLine:
    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(TINY_CONFIG))
        return path

    def test_data_succeeds(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["data", "--config", str(config_file), "--out", str(out)]) == 0
        assert (out / "data" / "train.jsonl").exists()
        assert not (out / ".lock").exists()

    def test_missing_upstream_exit_code(self, config_file, tmp_path):
        assert main(["evaluate", "--config", str(config_file), "--out", str(tmp_path / "out")]) == 2

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"epsilons": [2.0, 1.0]}))
        assert main(["data", "--config", str(bad), "--out", str(tmp_path / "out")]) == 1

    def test_arm_only_with_train(self, config_file, tmp_path):
        assert main(["data", "--arm", "mel", "--config", str(config_file), "--out", str(tmp_path / "out")]) == 1

    def test_seed_override(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["data", "--config", str(config_file), "--out", str(out), "--seed", "5"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 5

    def test_mixed_frame_corpus_exit_code(self, tmp_path):
        source = tmp_path / "source"
        for split in ("train", "dev", "eval"):
            save_corpus([LabeledExample(Spectrogram(np.zeros((16, 8))), 0),
                         LabeledExample(Spectrogram(np.zeros((20, 8))), 1)], source / f"{split}.jsonl")
        config = tmp_path / "config.json"
        config.write_text(json.dumps({**TINY_CONFIG, "corpus_import_path": str(source)}))
        assert main(["data", "--config", str(config), "--out", str(tmp_path / "out")]) == 1

    def test_output_under_regular_file_exit_code(self, config_file, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert main(["data", "--config", str(config_file), "--out", str(blocker / "out")]) == 1

"""Config schema/hash behavior and the command-line surface."""

import json
from pathlib import Path

import pytest
import yaml

from cromo import config as C
from cromo.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


def toy_doc(**strategy):
    doc = C.validate_config(C.load_config("toy_cromo_simclr"))
    doc["trainer"]["epochs_per_task"] = 2
    doc["data"]["synthetic"]["per_class_train"] = 50
    doc["data"]["synthetic"]["per_class_test"] = 20
    doc["eval"] = {"probe_epochs": 5, "probe_lr": 0.3, "probe_batch_size": 64,
                   "knn_k": 5}
    doc["strategy"].update(strategy)
    return doc


class TestSchema:
    def test_defaults_fill(self):
        norm = C.validate_config({})
        assert norm["strategy"]["name"] == "cromo"
        assert norm["trainer"]["optimizer"]["kind"] == "sgd"

    def test_unknown_keys_rejected(self):
        with pytest.raises(C.ConfigError, match="unknown keys"):
            C.validate_config({"trainer": {"epochz": 3}})

    def test_bad_choice_rejected(self):
        with pytest.raises(C.ConfigError):
            C.validate_config({"loss": {"kind": "moco"}})

    def test_bad_type_rejected(self):
        with pytest.raises(C.ConfigError):
            C.validate_config({"seed": "five"})

    def test_hash_invariant_to_key_order(self):
        doc = C.validate_config(toy_doc())
        shuffled = dict(reversed(list(doc.items())))
        assert C.config_hash(doc) == C.config_hash(shuffled)

    def test_hash_sensitive_to_values(self):
        assert C.config_hash(toy_doc()) != \
            C.config_hash(C.apply_overrides(toy_doc(), ["seed=99"]))

    def test_overrides_parse_yaml_scalars(self):
        doc = C.apply_overrides(toy_doc(), ["strategy.zeta=0.5",
                                            "model.mlp_hidden=[8, 8]",
                                            "data.augmentation.preset=none"])
        norm = C.validate_config(doc)
        assert norm["strategy"]["zeta"] == 0.5
        assert norm["model"]["mlp_hidden"] == [8, 8]

    def test_strategy_aliases(self):
        for alias, (base, src, embd, zeta) in C.STRATEGY_ALIASES.items():
            tc = C.make_train_config(toy_doc(name=alias))
            assert tc.strategy == base
            assert tc.mix_source == src
            assert tc.mix_embed == embd
            assert tc.zeta == zeta

    def test_preset_registry_covers_paper_grid(self):
        assert "cifar100_split5_barlow_twins_cromo" in C.PRESETS
        assert "cifar10_split2_byol_cassle_plus" in C.PRESETS
        assert "tinyimagenet_split10_corinfomax_finetune" in C.PRESETS
        for name, doc in C.PRESETS.items():
            C.validate_config(doc)   # every preset must be schema-clean

    def test_paper_preset_values(self):
        doc = C.validate_config(C.PRESETS["cifar100_split5_barlow_twins_cromo"])
        assert doc["trainer"]["epochs_per_task"] == 750
        assert doc["trainer"]["buffer_budget"] == 500
        assert doc["trainer"]["optimizer"]["kind"] == "lars"
        assert doc["trainer"]["optimizer"]["lr"] == 0.3
        assert doc["model"]["projector_dim"] == 2048
        doc10 = C.validate_config(C.PRESETS["cifar100_split10_byol_cromo"])
        assert doc10["trainer"]["epochs_per_task"][:2] == [600, 350]
        assert doc10["trainer"]["buffer_budget"] == 100
        assert doc10["model"]["predictor_hidden"] == 4096
        assert doc10["model"]["projector_dim"] == 4096
        doc2 = C.validate_config(C.PRESETS["cifar10_split2_simclr_cromo"])
        assert doc2["trainer"]["epochs_per_task"] == 500
        assert doc2["trainer"]["buffer_budget"] == 500
        assert doc2["data"]["num_tasks"] == 2
        assert doc2["loss"]["temperature"] == 0.5


class TestCli:
    def _write(self, tmp_path, doc):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(doc))
        return str(path)

    def test_train_and_artifacts(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        assert main(["train", "--config", cfg]) == EXIT_OK
        runs = list(Path("runs").glob("toy_cromo_simclr-*"))
        assert len(runs) == 1
        run = runs[0]
        for artifact in ("config.snapshot", "manifest.json", "metrics.log",
                         "report.json", "checkpoints/task_1.ckpt",
                         "buffer.snapshot"):
            assert (run / artifact).exists(), artifact
        report = json.loads((run / "report.json").read_text())
        assert {"la", "wp", "tp"} <= set(report)

    def test_override_changes_run_hash(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        main(["train", "--config", cfg, "--skip-eval"])
        main(["train", "--config", cfg, "--skip-eval", "--override", "seed=9"])
        assert len(list(Path("runs").glob("toy_cromo_simclr-*"))) == 2

    def test_invalid_strategy_exits_config_code(self, tmp_path):
        doc = toy_doc()
        doc["strategy"]["name"] = "bogus"
        cfg = self._write(tmp_path, doc)
        assert main(["train", "--config", cfg]) == EXIT_CONFIG

    def test_unknown_preset_exits_config_code(self):
        assert main(["train", "--config", "no_such_preset"]) == EXIT_CONFIG

    def test_eval_linear_and_knn(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        main(["train", "--config", cfg, "--skip-eval"])
        run = next(Path("runs").glob("toy_cromo_simclr-*"))
        ckpt = str(run / "checkpoints" / "task_1.ckpt")
        assert main(["eval", "--checkpoint", ckpt, "--config", cfg,
                     "--mode", "linear", "--out", "evald"]) == EXIT_OK
        report = json.loads(Path("evald/report.json").read_text())
        assert abs(report["la"] - report["wp"] * report["tp"]) < 1e-9
        assert main(["eval", "--checkpoint", ckpt, "--config", cfg,
                     "--mode", "knn", "--k", "5", "--out", "evalk",
                     "--dump-embeddings"]) == EXIT_OK
        knn = json.loads(Path("evalk/report.json").read_text())
        assert 0.0 <= knn["knn_accuracy"] <= 1.0
        from cromo.container import load_embeddings
        z, labels, tasks, meta = load_embeddings("evalk/embeddings.bin")
        assert z.shape[0] == len(labels) == len(tasks) == 80
        assert meta["dim"] == z.shape[1]

    def test_eval_arch_mismatch_is_config_error(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        main(["train", "--config", cfg, "--skip-eval"])
        run = next(Path("runs").glob("toy_cromo_simclr-*"))
        ckpt = str(run / "checkpoints" / "task_1.ckpt")
        wrong = toy_doc()
        wrong["data"]["synthetic"]["image_size"] = 16
        wrong["model"]["image_size"] = 16
        (tmp_path / "wrong.yaml").write_text(yaml.safe_dump(wrong))
        assert main(["eval", "--checkpoint", ckpt, "--config",
                     str(tmp_path / "wrong.yaml")]) == EXIT_CONFIG

    def test_run_dir_is_self_describing(self, tmp_path, monkeypatch):
        # re-running eval out of a finished run needs nothing but the run dir
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        main(["train", "--config", cfg, "--skip-eval"])
        run = next(Path("runs").glob("toy_cromo_simclr-*"))
        ckpt = str(run / "checkpoints" / "task_1.ckpt")
        snapshot = str(run / "config.snapshot")
        assert main(["eval", "--checkpoint", ckpt, "--config", snapshot,
                     "--out", "from_snapshot"]) == EXIT_OK
        assert Path("from_snapshot/report.json").exists()

    def test_eval_transfer_mode(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        main(["train", "--config", cfg, "--skip-eval"])
        run = next(Path("runs").glob("toy_cromo_simclr-*"))
        ckpt = str(run / "checkpoints" / "task_1.ckpt")
        # transfer target: the same synthetic family with another seed
        target = toy_doc()
        target["data"]["synthetic"]["seed"] = 77
        (tmp_path / "target.yaml").write_text(yaml.safe_dump(target))
        assert main(["eval", "--checkpoint", ckpt, "--config",
                     str(tmp_path / "target.yaml"), "--mode", "transfer",
                     "--transfer-epochs", "5", "--out", "ood"]) == EXIT_OK
        rep = json.loads(Path("ood/report.json").read_text())
        assert "transfer_accuracy" in rep

    def test_sweep_axis_table(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        assert main(["sweep", "--config", cfg, "--axis", "buffer_budget",
                     "--values", "8", "16", "--out", "sw"]) == EXIT_OK
        rows = Path("sw/sweep.csv").read_text().splitlines()
        assert len(rows) == 3      # header + 2 cells
        assert Path("sw/sweep.png").exists()

    def test_sweep_continues_after_cell_failure(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        # batch_size larger than a task makes the first cell fail
        assert main(["sweep", "--config", cfg, "--axis", "strategy",
                     "--values", "bogus_strategy", "finetune",
                     "--out", "sw2"]) == EXIT_OK
        rows = Path("sw2/sweep.csv").read_text().splitlines()
        assert "error" in rows[1]
        assert "ok" in rows[2]

    def test_confusion_command(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        doc = toy_doc()
        doc["confusion"] = {"learners": ["simclr"], "modes": ["cil_minibatch"],
                            "iterations": 16, "probe_cadence": 8,
                            "num_tasks": 2, "batch_size": 32}
        cfg = self._write(tmp_path, doc)
        assert main(["confusion", "--config", cfg]) == EXIT_OK
        out = next(Path("runs/confusion").iterdir())
        assert (out / "curves.csv").exists()
        assert (out / "tp.png").exists()

    def test_plot_command(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self._write(tmp_path, toy_doc())
        main(["train", "--config", cfg, "--skip-eval"])
        run = str(next(Path("runs").glob("toy_cromo_simclr-*")))
        assert main(["plot", "--run", run]) == EXIT_OK
        assert Path(run, "plots", "losses.png").exists()

    def test_plot_missing_run_exits_runtime_code(self, tmp_path):
        assert main(["plot", "--run", str(tmp_path / "nope")]) == EXIT_RUNTIME

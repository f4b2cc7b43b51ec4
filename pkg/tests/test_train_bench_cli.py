"""
Тесты цикла обучения, оценки, бенчмарка внимания и командной строки.
"""

import os

import numpy as np
import pytest

from conftest import PRESETS_DIR, RUN_CONFIG
from main import cli_dispatch
from src.core.serialization import mten_read, mten_write, save_checkpoint
from src.core.tensor import precision
from src.data.loader import SegmentationDataset
from src.domain.config import ModelConfig, TrainRecipe
from src.domain.errors import CheckpointMismatchError, ContractError
from src.nn.network import build_model
from src.training.bench import BENCH_COLUMNS, bench_attention, save_bench_csv
from src.training.trainer import (
    BEST_CHECKPOINT,
    CONFIG_SIDECAR,
    FINAL_CHECKPOINT,
    TRAIN_LOG_NAME,
    _first_non_finite,
    evaluate,
    evaluate_model,
    format_record,
    infer,
    load_model,
    train_loop,
)
from src.utils import load_config, report_frame, report_lines


@pytest.fixture
def recipe() -> TrainRecipe:
    return TrainRecipe(optimizer="adamw", lr=3e-3, weight_decay=5e-4, batch_size=4, epochs=2, dice_weight=0.6)


@pytest.fixture
def trained(tiny_config, corpus32, recipe, tmp_path):
    out = str(tmp_path / "run")
    summary = train_loop(tiny_config, SegmentationDataset(corpus32), recipe, out, seed=0)
    return summary, out


class TestTrainLoop:

    def test_artifacts(self, trained, recipe):
        summary, out = trained
        for name in (CONFIG_SIDECAR, TRAIN_LOG_NAME, BEST_CHECKPOINT, FINAL_CHECKPOINT):
            assert os.path.exists(os.path.join(out, name)), name
        assert len(summary["history"]) == recipe.epochs
        with open(os.path.join(out, TRAIN_LOG_NAME), encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0].startswith("epoch=1 loss=")
        assert "val_dsc=na" in lines[0]

    def test_loss_decreases(self, trained):
        history = trained[0]["history"]
        assert history[1]["loss"] < history[0]["loss"]

    def test_reproducible_checkpoint(self, tiny_config, corpus32, recipe, tmp_path):
        single = recipe.model_copy(update={"epochs": 1})
        paths = []
        for name in ("a", "b"):
            summary = train_loop(tiny_config, SegmentationDataset(corpus32), single, str(tmp_path / name), seed=1)
            paths.append(summary["final_path"])
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            assert a.read() == b.read()

    def test_validation_split(self, tiny_config, corpus32, recipe, tmp_path):
        split = recipe.model_copy(update={"epochs": 1, "val_fraction": 0.2})
        summary = train_loop(tiny_config, SegmentationDataset(corpus32), split, str(tmp_path / "v"), seed=0)
        assert summary["history"][0]["val_dsc"] is not None

    def test_empty_dataset(self, tiny_config, corpus32, recipe, tmp_path):
        with pytest.raises(ContractError):
            train_loop(tiny_config, SegmentationDataset(corpus32).subset([]), recipe, str(tmp_path / "e"))

    def test_first_non_finite_parameter(self, tiny_config):
        model = build_model(tiny_config, seed=0)
        assert _first_non_finite(model) is None
        model.enc.stage2.block0.pw1.weight.data[0, 0, 0, 0] = np.nan
        assert _first_non_finite(model) == "enc.stage2.block0.pw1.weight"

    def test_format_record(self):
        line = format_record({"epoch": 3, "loss": 0.123456789, "val_dsc": None})
        assert line == "epoch=3 loss=0.123457 val_dsc=na"


class TestEvaluate:

    def test_report(self, trained, tiny_config, corpus32):
        summary, _ = trained
        report = evaluate(summary["final_path"], SegmentationDataset(corpus32), tiny_config, "95")
        assert report["samples"] == 10
        assert report["hd_variant"] == "95"
        assert set(report["per_class_dsc"]) == {1, 2, 3}
        assert 0.0 <= report["accuracy"] <= 1.0
        lines = report_lines(report)
        assert lines[0] == "samples=10"
        assert list(report_frame(report)["class"]) == ["1", "2", "3", "mean"]

    def test_repeatable(self, trained, tiny_config, corpus32):
        model = load_model(tiny_config, trained[0]["final_path"])
        a = evaluate_model(model, SegmentationDataset(corpus32))
        b = evaluate_model(model, SegmentationDataset(corpus32))
        assert report_lines(a) == report_lines(b)

    def test_unknown_hd_variant(self, tiny_config, corpus32):
        with pytest.raises(ContractError):
            evaluate_model(build_model(tiny_config, seed=0), SegmentationDataset(corpus32), "90")

    def test_config_mismatch(self, trained):
        other = ModelConfig.create(stage_depths=[1, 1, 1, 1], stage_widths=[16, 32, 64, 128], block_pattern="LLGG",
                                   kernel_set=[3, 5, 7, 9], head_width=8, num_classes=3, input_size=(32, 32))
        with pytest.raises(CheckpointMismatchError, match="dec.head"):
            load_model(other, trained[0]["final_path"])

    def test_infer_single_image(self, trained, tiny_config, corpus32):
        image, _ = SegmentationDataset(corpus32)[0]
        labels = infer(trained[0]["final_path"], image, tiny_config)
        assert labels.shape == (32, 32)
        assert labels.min() >= 0 and labels.max() < 4


class TestBench:

    def test_rows_and_flops(self):
        report = bench_attention(["efficient", "softmax"], [64, 256], channels=16, head_width=4)
        rows = {(r["mechanism"], r["N"]): r for r in report["rows"]}
        assert len(rows) == 4
        assert rows[("efficient", 256)]["flops"] / rows[("efficient", 64)]["flops"] == 4.0
        assert rows[("softmax", 256)]["flops"] / rows[("softmax", 64)]["flops"] == 16.0
        assert all(r["median_ms"] > 0 and r["peak_bytes"] > 0 for r in report["rows"])
        assert set(report["monotone"]) == {"efficient", "softmax"}

    def test_msla_rows(self):
        report = bench_attention(["msla"], [16, 64], channels=16, head_width=4)
        assert [r["N"] for r in report["rows"]] == [16, 64]
        assert report["rows"][1]["flops"] > report["rows"][0]["flops"]

    def test_msla_needs_square(self):
        with pytest.raises(ContractError):
            bench_attention(["msla"], [20], channels=16, head_width=4)

    def test_contract(self):
        with pytest.raises(ContractError):
            bench_attention(["efficient"], [64], reps=3)
        with pytest.raises(ContractError):
            bench_attention(["flash"], [64])

    @pytest.mark.slow
    def test_time_scaling(self):
        with precision("float32"):
            report = bench_attention(["efficient", "softmax"], [1024, 4096], channels=64, head_width=16)
        times = {(r["mechanism"], r["N"]): r["median_ms"] for r in report["rows"]}
        assert times[("efficient", 4096)] / times[("efficient", 1024)] <= 6.0
        assert times[("softmax", 4096)] / times[("softmax", 1024)] >= 10.0

    def test_csv(self, tmp_path):
        report = bench_attention(["efficient"], [16], channels=16, head_width=4)
        path = tmp_path / "bench.csv"
        save_bench_csv(report, str(path))
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == ",".join(BENCH_COLUMNS)


class TestRunConfig:

    def test_shipped_recipes(self):
        config = load_config(str(RUN_CONFIG))
        assert set(config.recipes) == {"synapse", "acdc", "cvc", "desk"}
        assert config.recipe("synapse").optimizer == "sgd"
        assert config.recipe("cvc").dice_weight == 1.0
        assert config.bench.reps >= 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(str(tmp_path / "absent.yaml"))


class TestCli:

    def _run(self, *argv: str) -> int:
        return cli_dispatch(["--run-config", str(RUN_CONFIG), "--log-level", "WARNING", *argv])

    def test_unknown_flag(self):
        assert self._run("count", "--frobnicate") == 1

    def test_missing_subcommand(self):
        assert self._run() == 1

    def test_count_desk(self, capsys):
        assert self._run("count", "--config", str(PRESETS_DIR / "desk.cfg")) == 0
        out = capsys.readouterr().out
        assert "params=" in out and "flops=" in out

    @pytest.mark.slow
    def test_count_base(self, capsys):
        assert self._run("count", "--config", str(PRESETS_DIR / "base.cfg")) == 0
        assert "gflops=" in capsys.readouterr().out

    def test_invalid_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("stage_widths=64,128,256,500\n", encoding="utf-8")
        assert self._run("count", "--config", str(path)) == 1

    def test_missing_checkpoint_exit_code(self, tmp_path, corpus32):
        assert self._run("eval", "--checkpoint", str(tmp_path / "none.mckp"), "--data", corpus32) == 2

    def test_corrupt_checkpoint_exit_code(self, tmp_path, corpus32):
        (tmp_path / "model.cfg").write_text("preset=desk\n", encoding="utf-8")
        (tmp_path / "bad.mckp").write_bytes(b"NOPE")
        assert self._run("eval", "--checkpoint", str(tmp_path / "bad.mckp"), "--data", corpus32) == 2

    def test_gradcheck_single(self):
        assert self._run("gradcheck", "--module", "matmul", "--seeds", "2") == 0

    @pytest.mark.slow
    def test_gradcheck_all(self):
        assert self._run("gradcheck", "--module", "all") == 0

    def test_bench(self, tmp_path):
        out = tmp_path / "bench.csv"
        code = self._run("bench", "--sizes", "16,64", "--channels", "16", "--mechanisms", "efficient",
                         "--out", str(out))
        assert code == 0
        assert out.read_text(encoding="utf-8").startswith("mechanism,N,C")

    def test_pipeline(self, tmp_path):
        data = str(tmp_path / "data")
        run = str(tmp_path / "run")
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text("preset=desk\nstage_depths=1,1,1,1\nstage_widths=16,32,64,128\nhead_width=8\n",
                       encoding="utf-8")

        assert self._run("gen-data", "--out", data, "--count", "8", "--size", "64", "--classes", "4",
                         "--seed", "7") == 0
        assert self._run("train", "--config", str(cfg), "--data", data, "--out", run, "--seed", "0",
                         "--recipe", "desk", "--epochs", "1") == 0
        checkpoint = os.path.join(run, BEST_CHECKPOINT)
        assert self._run("eval", "--checkpoint", checkpoint, "--data", data, "--hd", "95") == 0
        assert os.path.exists(os.path.join(run, "metrics.txt"))
        assert os.path.exists(os.path.join(run, "metrics.csv"))

        image = os.path.join(data, "images", "00000.mten")
        labels_path = str(tmp_path / "labels.mten")
        assert self._run("infer", "--checkpoint", checkpoint, "--input", image, "--output", labels_path) == 0
        assert mten_read(labels_path).shape == (64, 64)

        heatmap_path = str(tmp_path / "attn.mten")
        assert self._run("inspect-attn", "--checkpoint", checkpoint, "--input", image, "--stage", "3",
                         "--query", "1,2", "--output", heatmap_path) == 0
        heatmap = mten_read(heatmap_path)
        assert heatmap.shape == (4, 4)
        assert abs(heatmap.sum() - 1.0) <= 1e-6

        assert self._run("inspect-attn", "--checkpoint", checkpoint, "--input", image, "--stage", "3",
                         "--query", "3,5", "--output", heatmap_path) == 1
        assert self._run("inspect-attn", "--checkpoint", checkpoint, "--input", image, "--stage", "1",
                         "--query", "0,0", "--output", heatmap_path) == 1

    def test_infer_rejects_bad_input(self, tmp_path):
        config = ModelConfig.create(stage_depths=[1, 1, 1, 1], stage_widths=[16, 32, 64, 128], block_pattern="LLGG",
                                    kernel_set=[3, 5, 7, 9], head_width=8, num_classes=4, input_size=(32, 32))
        (tmp_path / CONFIG_SIDECAR).write_text(config.to_text(), encoding="utf-8")
        checkpoint = str(tmp_path / FINAL_CHECKPOINT)
        save_checkpoint(build_model(config, seed=0).state_dict(), checkpoint)
        image = str(tmp_path / "gray.mten")
        mten_write(np.zeros((1, 32, 32), dtype=np.float32), image)
        assert self._run("infer", "--checkpoint", checkpoint, "--input", image,
                         "--output", str(tmp_path / "out.mten")) == 1

    def test_inspect_attn_rectangular(self, tmp_path, rng):
        config = ModelConfig.create(stage_depths=[1, 1, 1, 1], stage_widths=[16, 32, 64, 128], block_pattern="LLGG",
                                    kernel_set=[3, 5, 7, 9], head_width=8, num_classes=4, input_size=(64, 96))
        (tmp_path / CONFIG_SIDECAR).write_text(config.to_text(), encoding="utf-8")
        checkpoint = str(tmp_path / FINAL_CHECKPOINT)
        save_checkpoint(build_model(config, seed=0).state_dict(), checkpoint)
        image = str(tmp_path / "wide.mten")
        mten_write(rng.random((3, 64, 96)).astype(np.float32), image)
        heatmap_path = str(tmp_path / "attn.mten")
        assert self._run("inspect-attn", "--checkpoint", checkpoint, "--input", image, "--stage", "3",
                         "--query", "3,5", "--output", heatmap_path) == 0
        heatmap = mten_read(heatmap_path)
        assert heatmap.shape == (4, 6)
        assert abs(heatmap.sum() - 1.0) <= 1e-6
        assert self._run("inspect-attn", "--checkpoint", checkpoint, "--input", image, "--stage", "3",
                         "--query", "4,0", "--output", heatmap_path) == 1

from __future__ import annotations

import json
import logging
from typing import TYPE_CHECKING

import pytest

from selfretrieve.config import RunConfig
from selfretrieve.model.checkpoint import EmbeddingTable, load_checkpoint
from selfretrieve.search.manifest import DatasetManifest
from selfretrieve.tools.pipeline import EXIT_CONFIGURATION, EXIT_MISSING_ARTIFACT, Run, main

if TYPE_CHECKING:
    from collections.abc import Iterator
    from pathlib import Path

TINY = (
    "synth.classes=3",
    "synth.instances=6",
    "synth.side=64",
    "synth.distractors=2",
    "proposals.scale=2",
    "encoder.channels=[4,8]",
    "encoder.projection_dim=8",
    "encoder.input_side=16",
    "ssl.epochs=1",
    "ssl.batch_size=8",
    "ssl.queue_size=16",
    "ssl.steps_per_epoch=2",
    "ssl.prefetch=1",
    "diffusion.knn=5",
    "boost.k_max=4",
    "boost.epochs=1",
    "boost.batch_size=4",
    "eval.image_side=32",
)


def run_cli(run_dir: Path, *args: str, overrides: tuple[str, ...] | list[str] = TINY) -> int:
    argv = ["--run-dir", str(run_dir)]
    for override in overrides:
        argv += ["-o", override]
    return main([*argv, *args])


@pytest.fixture(autouse=True)
def reset_logger() -> Iterator[None]:
    yield
    logger = logging.getLogger("selfretrieve")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)


def test_pipeline_initial_variant(tmp_path: Path) -> None:
    for command in (["synth"], ["propose"], ["train-ssl"], ["embed"], ["eval", "--variant", "initial"]):
        assert run_cli(tmp_path, *command) == 0, command

    manifest = DatasetManifest.load(tmp_path / "dataset" / "manifest.jsonl")
    assert len(manifest.database) == 18
    assert len(manifest.queries) == 3

    stats = json.loads((tmp_path / "proposals" / "stats.json").read_text())
    assert stats["images"] == 18
    assert stats["generator"] == "grid"

    params = load_checkpoint(tmp_path / "checkpoints" / "initial.srck")
    assert [params[weight].data.shape[0] for weight, _ in params.conv_layers] == [4, 8]
    assert params.projection_dim == 8
    assert not params.has_boost

    table = EmbeddingTable.load(tmp_path / "embeddings" / "initial.srem")
    assert set(table.ids) == set(manifest.index)

    report = json.loads((tmp_path / "reports" / "eval_initial.json").read_text())
    assert set(report["variants"]["initial"]) == {"medium", "hard"}
    assert all(0.0 < result["mAP"] <= 1.0 for result in report["variants"]["initial"].values())
    assert (tmp_path / "reports" / "summary_initial.csv").read_text().startswith("variant,setting,mAP\n")

    for name in ("synth", "propose", "train-ssl", "embed-initial", "eval-initial"):
        record = json.loads((tmp_path / "stages" / f"{name}.json").read_text())
        assert record["stage"] == name
        assert record["outputs"]


def test_pipeline_stage_up_to_date(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    assert run_cli(tmp_path, "synth") == 0
    assert run_cli(tmp_path, "propose") == 0
    regions = (tmp_path / "proposals" / "regions.jsonl").read_bytes()

    caplog.clear()
    with caplog.at_level(logging.INFO, logger="selfretrieve"):
        assert run_cli(tmp_path, "propose") == 0
    assert "Stage propose is up-to-date, skipping" in caplog.text

    caplog.clear()
    with caplog.at_level(logging.INFO, logger="selfretrieve"):
        assert run_cli(tmp_path, "--force", "propose") == 0
    assert "Running stage propose" in caplog.text
    assert (tmp_path / "proposals" / "regions.jsonl").read_bytes() == regions

    caplog.clear()
    with caplog.at_level(logging.INFO, logger="selfretrieve"):
        assert run_cli(tmp_path, "propose", overrides=[*TINY, "proposals.scale=3"]) == 0
    assert "Running stage propose" in caplog.text
    assert (tmp_path / "proposals" / "regions.jsonl").read_bytes() != regions


def test_pipeline_missing_artifact(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert run_cli(tmp_path, "propose") == EXIT_MISSING_ARTIFACT
    assert "manifest.jsonl" in capsys.readouterr().err

    assert run_cli(tmp_path, "synth") == 0
    assert run_cli(tmp_path, "eval", "--variant", "boosted") == EXIT_MISSING_ARTIFACT
    assert "missing artifact" in capsys.readouterr().err
    assert not (tmp_path / "reports" / "eval_boosted.json").exists()


def test_pipeline_configuration_error(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert run_cli(tmp_path, "synth", overrides=["ssl.momentum=2"]) == EXIT_CONFIGURATION
    assert "ssl.momentum" in capsys.readouterr().err

    assert main(["--config", str(tmp_path / "missing.json"), "synth"]) == EXIT_CONFIGURATION


def test_pipeline_deterministic(tmp_path: Path) -> None:
    for run_dir in (tmp_path / "a", tmp_path / "b"):
        for command in (["synth"], ["propose"], ["train-ssl"], ["embed"], ["eval", "--variant", "initial"]):
            assert run_cli(run_dir, *command) == 0

    for name in ("checkpoints/initial.srck", "embeddings/initial.srem", "reports/eval_initial.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_pipeline_mine(tmp_path: Path) -> None:
    for command in (["synth"], ["propose"], ["train-ssl"], ["embed"], ["mine"]):
        assert run_cli(tmp_path, *command) == 0, command

    mining = tmp_path / "mining"
    anchors = json.loads((mining / "anchors.json").read_text())
    assert anchors
    assert len((mining / "pseudo_labels.jsonl").read_text().splitlines()) == len(anchors)
    assert (mining / "scores.csv").read_text().startswith("seed,")
    assert (mining / "graph.jsonl").exists()
    assert (mining / "triplets.jsonl").exists()


def test_run_open_reuses_latest(tmp_path: Path) -> None:
    config = RunConfig.from_dict({"paths": {"runs": str(tmp_path)}})
    older = tmp_path / f"20240101-000000-{config.short_hash()}"
    newer = tmp_path / f"20240102-000000-{config.short_hash()}"
    older.mkdir()
    newer.mkdir()

    assert Run.open(config).root == newer
    assert (newer / "stages").is_dir()
    assert Run.open(config, tmp_path / "explicit").root == tmp_path / "explicit"

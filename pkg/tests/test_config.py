from __future__ import annotations

import json
from pathlib import Path

import pytest

from selfretrieve.config import DEFAULT_SEED, RunConfig, apply_overrides, parse_override
from selfretrieve.exceptions import ConfigurationError

CONFIGS = Path(__file__).parent.parent / "configs"


def test_config_defaults() -> None:
    cfg = RunConfig.from_dict({})

    assert cfg.seed == DEFAULT_SEED
    assert cfg.proposals.generator == "grid"
    assert cfg.diffusion.alpha == 0.99
    assert cfg.ssl.seed == cfg.boost.seed == cfg.encoder.seed == DEFAULT_SEED


def test_config_seed_inheritance() -> None:
    cfg = RunConfig.from_dict({"seed": 7, "ssl": {"seed": 3}})

    assert cfg.seed == 7
    assert cfg.ssl.seed == 3
    assert cfg.augment.seed == cfg.encoder.seed == cfg.boost.seed == cfg.eval.seed == cfg.synth.seed == 7


def test_config_bundled_file() -> None:
    cfg = RunConfig.load(CONFIGS / "desk.json")

    assert cfg.synth.classes == 10
    assert cfg.ssl.queue_size == 256
    assert RunConfig.load(CONFIGS / "desk.json").digest() == cfg.digest()


@pytest.mark.parametrize(
    ("raw", "key"),
    [
        ({"sampling": {}}, "sampling"),
        ({"ssl": {"epoch": 3}}, "ssl.epoch"),
        ({"ssl": 3}, "ssl"),
        ({"seed": -1}, "seed"),
        ({"seed": "1"}, "seed"),
        ({"seed": True}, "seed"),
        ({"diffusion": {"alpha": 1.5}}, "diffusion.alpha"),
        ({"paths": {"runs": ""}}, "paths.runs"),
    ],
)
def test_config_invalid(raw: dict, key: str) -> None:
    with pytest.raises(ConfigurationError) as e:
        RunConfig.from_dict(raw)

    assert e.value.key == key
    assert str(e.value).startswith(f"{key}: ")


def test_config_not_an_object() -> None:
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict([])


def test_config_load_invalid_json(tmp_path: Path) -> None:
    (tmp_path / "broken.json").write_text('{\n "seed": 1,\n}\n')

    with pytest.raises(ConfigurationError, match="line 3"):
        RunConfig.load(tmp_path / "broken.json")


def test_parse_override() -> None:
    assert parse_override("ssl.epochs=5") == (["ssl", "epochs"], 5)
    assert parse_override("proposals.generator=edge") == (["proposals", "generator"], "edge")
    assert parse_override("encoder.channels=[4,8]") == (["encoder", "channels"], [4, 8])
    assert parse_override("seed=3") == (["seed"], 3)
    assert parse_override("paths.dataset=") == (["paths", "dataset"], "")

    with pytest.raises(ConfigurationError):
        parse_override("ssl.epochs")
    with pytest.raises(ConfigurationError):
        parse_override("=5")


def test_apply_overrides() -> None:
    raw = {"ssl": {"epochs": 10, "lr": 0.1}}

    updated = apply_overrides(raw, ["ssl.epochs=2", "boost.margin=0.5", "seed=9"])

    assert updated == {"ssl": {"epochs": 2, "lr": 0.1}, "boost": {"margin": 0.5}, "seed": 9}
    assert raw == {"ssl": {"epochs": 10, "lr": 0.1}}


@pytest.mark.parametrize("override", ["ssl.epochs.inner=1", "seed.value=1", "ssl=1", "sampling.rate=1"])
def test_apply_overrides_invalid(override: str) -> None:
    with pytest.raises(ConfigurationError):
        apply_overrides({}, [override])


def test_config_digest() -> None:
    cfg = RunConfig.from_dict({"ssl": {"epochs": 2}})

    assert cfg.digest() == RunConfig.from_dict({"ssl": {"epochs": 2}}).digest()
    assert cfg.digest() != RunConfig.from_dict({"ssl": {"epochs": 3}}).digest()
    assert cfg.short_hash() == cfg.digest()[:12]
    assert json.loads(cfg.canonical()) == cfg.to_dict()
    assert cfg.to_dict()["ssl"]["epochs"] == 2


def test_config_section_digest() -> None:
    base = RunConfig.from_dict({})
    changed = RunConfig.from_dict({"ssl": {"epochs": 3}})
    reseeded = RunConfig.from_dict({"seed": 1})

    assert base.section_digest("eval", "diffusion") == changed.section_digest("eval", "diffusion")
    assert base.section_digest("ssl") != changed.section_digest("ssl")
    assert base.section_digest("eval") != reseeded.section_digest("eval")

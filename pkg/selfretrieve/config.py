from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from selfretrieve.exceptions import ConfigurationError
from selfretrieve.image.augment import AugmentConfig
from selfretrieve.image.proposals import ProposalConfig
from selfretrieve.model.boost import BoostConfig
from selfretrieve.model.encoder import EncoderConfig
from selfretrieve.model.ssl import SslConfig
from selfretrieve.search.diffusion import DiffusionConfig
from selfretrieve.search.evaluate import EvalConfig
from selfretrieve.util.synthgen import SynthConfig

DEFAULT_SEED = 42


@dataclass
class PathsConfig:
    # Manifest of an existing dataset; the synthetic dataset of the run is used when unset
    dataset: str | None = None
    runs: str = "runs"

    def __post_init__(self) -> None:
        if not self.runs:
            raise ConfigurationError("runs directory must not be empty", "paths.runs")


SECTIONS = {
    "augment": AugmentConfig,
    "proposals": ProposalConfig,
    "encoder": EncoderConfig,
    "ssl": SslConfig,
    "diffusion": DiffusionConfig,
    "boost": BoostConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    """All parameters of a pipeline run, one section per stage plus the global seed.

    Section seeds left unset inherit the global seed.
    """

    augment: AugmentConfig = field(default_factory=AugmentConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = DEFAULT_SEED

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        """Build and validate a configuration, rejecting unknown keys.

        Raises:
            ConfigurationError: With the dotted path of the offending key.
        """
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a JSON object")

        seed = raw.get("seed", DEFAULT_SEED)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigurationError("seed must be a non-negative integer", "seed")

        sections = {}
        for name, values in raw.items():
            if name == "seed":
                continue
            if name not in SECTIONS:
                raise ConfigurationError("unknown key", name)
            if not isinstance(values, dict):
                raise ConfigurationError("section must be an object", name)
            sections[name] = values

        kwargs = {name: _build_section(name, sections.get(name, {}), seed) for name in SECTIONS}
        return cls(**kwargs, seed=seed)

    @classmethod
    def load(cls, path: Path | str, overrides: list[str] | None = None) -> RunConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"invalid JSON at line {e.lineno}: {e.msg}") from e
        return cls.from_dict(apply_overrides(raw, overrides or []))

    def to_dict(self) -> dict[str, Any]:
        return json.loads(self.canonical())

    def canonical(self) -> str:
        """Sorted, whitespace-free JSON rendering used for hashing."""
        data = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        data["seed"] = self.seed
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def short_hash(self) -> str:
        return self.digest()[:12]

    def section_digest(self, *names: str) -> str:
        """Hash over the named sections and the global seed, so that a stage only depends on what it reads."""
        data = {name: dataclasses.asdict(getattr(self, name)) for name in names}
        data["seed"] = self.seed
        return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build_section(name: str, values: dict[str, Any], seed: int) -> Any:
    section = SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(section)}

    for key in values:
        if key not in fields:
            raise ConfigurationError("unknown key", f"{name}.{key}")

    values = dict(values)
    if "seed" in fields and values.get("seed") is None:
        values["seed"] = seed

    try:
        return section(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid value: {e}", name) from e


def parse_override(override: str) -> tuple[list[str], Any]:
    """Split ``section.key=value`` into its key path and value, parsing the value as JSON when possible."""
    key, sep, text = override.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {override!r} is not of the form key=value")

    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.split("."), value


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Return a copy of ``raw`` with the dotted ``key=value`` overrides applied."""
    raw = json.loads(json.dumps(raw))
    for override in overrides:
        path, value = parse_override(override)
        if path[0] != "seed" and path[0] not in SECTIONS:
            raise ConfigurationError("unknown key", ".".join(path))
        if len(path) > 2 or (path[0] == "seed") != (len(path) == 1):
            raise ConfigurationError("override must name a section key or the seed", ".".join(path))

        if len(path) == 1:
            raw["seed"] = value
        else:
            raw.setdefault(path[0], {})[path[1]] = value
    return raw

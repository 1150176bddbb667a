"""YAML configuration, validated against the pydantic schema"""

import logging
from pathlib import Path
from typing import Any, Optional

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError, NotFoundError
from .log import kv
from .models import (
    AttackConfig,
    ExperimentId,
    ExperimentSpec,
    GameConfig,
    GridPoint,
    Scenario,
    ScenarioKind,
    SimConfig,
    StrategyConfig,
)
from .traffic import STREAM_SITES, generate_sites, substream

logger = logging.getLogger(__name__)

SMALL_SITE_EXPERIMENTS = {ExperimentId.EXP3, ExperimentId.EXP4}
DEFAULT_SITES = 100
DEFAULT_SMALL_SITES = 10


class ExperimentSection(BaseModel):
    id: ExperimentId = ExperimentId.EXP1
    scenarios: list[Scenario] = Field(
        default_factory=lambda: [
            Scenario(kind=ScenarioKind.MULTI_CLOSED),
            Scenario(kind=ScenarioKind.MULTI_OPEN),
        ]
    )
    grid: Optional[list[GridPoint]] = None
    circuits_per_class: int = Field(default=1500, ge=1)
    output_dir: Path = Path("results")

    model_config = ConfigDict(extra="forbid")


class FileConfig(BaseModel):
    """Layout of a padlab config file."""

    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    sim: SimConfig
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    game: GameConfig = Field(default_factory=GameConfig)

    model_config = ConfigDict(extra="forbid")

    def to_spec(self) -> ExperimentSpec:
        return ExperimentSpec(
            id=self.experiment.id,
            scenarios=self.experiment.scenarios,
            sim=self.sim,
            strategy=self.strategy,
            attack=self.attack,
            game=self.game,
            grid=self.experiment.grid,
            circuits_per_class=self.experiment.circuits_per_class,
            output_dir=self.experiment.output_dir,
        )


def node_line(root: Optional[yaml.Node], loc: tuple) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along a pydantic error loc."""
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        child = None
        if isinstance(node, yaml.MappingNode):
            child = next((v for k, v in node.value if k.value == str(part)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            child = node.value[part] if part < len(node.value) else None
        if child is None:
            break
        node = child
        line = node.start_mark.line + 1
    return line


def _context(source: str, line: Optional[int]) -> str:
    return f"{source}:{line}" if line else source


def _fill_sites(raw: dict):
    sim = raw.setdefault("sim", {})
    if not isinstance(sim, dict) or "sites" in sim:
        return
    experiment = raw.get("experiment") or {}
    small = experiment.get("id") in {e.value for e in SMALL_SITE_EXPERIMENTS}
    n_sites = sim.pop("n_sites", DEFAULT_SMALL_SITES if small else DEFAULT_SITES)
    seed = sim.get("seed", 0)
    if not isinstance(n_sites, int) or n_sites < 1 or not isinstance(seed, int) or seed < 0:
        return
    sites = generate_sites(n_sites, substream(seed, STREAM_SITES))
    sim["sites"] = [s.model_dump() for s in sites]


def parse_config(
    text: str,
    source: str = "<config>",
    overrides: Optional[dict[str, Any]] = None,
) -> FileConfig:
    """Parse and validate config text.

    `overrides` maps dotted paths (e.g. "sim.seed") to values that win over
    the file.
    """
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        raise ConfigError(detail=f"invalid YAML: {exc}", context=_context(source, line))

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(detail="config must be a mapping of sections", context=_context(source, 1))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        target = raw.setdefault(section, {})
        if isinstance(target, dict):
            target[key] = value
    _fill_sites(raw)

    try:
        config = FileConfig.model_validate(raw)
    except pydantic.ValidationError as exc:
        error = exc.errors()[0]
        loc = tuple(error["loc"])
        where = ".".join(str(p) for p in loc)
        raise ConfigError(
            detail=f"{where}: {error['msg']}",
            context=_context(source, node_line(root, loc)),
        )
    try:
        config.to_spec()
    except pydantic.ValidationError as exc:
        raise ConfigError(
            detail=exc.errors()[0]["msg"],
            context=_context(source, node_line(root, ("experiment",))),
        )
    return config


def load_config(path: Optional[Path], overrides: Optional[dict[str, Any]] = None) -> FileConfig:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    if not path.exists():
        raise NotFoundError(detail=f"config file {path} does not exist")
    logger.info(kv(event="load_config", path=path))
    return parse_config(path.read_text(encoding="utf-8"), str(path), overrides)


def config_schema() -> dict:
    return FileConfig.model_json_schema()

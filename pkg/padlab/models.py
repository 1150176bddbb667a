"""Domain models"""

from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Literal, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ValidationError

TIME_DECIMALS = 6


def tick(t: float) -> float:
    """Snap a time to the microsecond grid."""
    return round(t, TIME_DECIMALS)


class CellDirection(IntEnum):
    OUTGOING = -1
    INCOMING = 1

    def __str__(self):
        return f"{self.value:+d}"


OUT = CellDirection.OUTGOING
IN = CellDirection.INCOMING


class RelayCommand(str, Enum):
    EXTEND2 = "EXTEND2"
    EXTENDED = "EXTENDED"
    BEGIN = "BEGIN"
    BEGIN_DIR = "BEGIN_DIR"
    CONNECTED = "CONNECTED"
    DATA = "DATA"
    END = "END"
    ESTABLISH_REND = "ESTABLISH_REND"
    REND_ESTABLISHED = "REND_ESTABLISHED"
    REND2 = "REND2"
    INTRODUCE1 = "INTRODUCE1"
    INTRO_ACK = "INTRO_ACK"
    APP_DATA = "APP_DATA"


class CircuitPurpose(str, Enum):
    EXIT = "Exit"
    HSDIR = "HSDir"
    INTRO = "Intro"
    REND = "Rend"
    FAKE_HSDIR = "FakeHSDir"
    FAKE_INTRO = "FakeIntro"
    PADDED_EXIT = "PaddedExit"
    PREEMPTIVE = "Preemptive"


class RequestKind(str, Enum):
    HSDIR_FETCH = "HsdirFetch"
    INTRO_HANDSHAKE = "IntroHandshake"
    REND_HANDSHAKE = "RendHandshake"


class CircuitKind(str, Enum):
    EXIT = "ExitCircuit"
    REND = "RendCircuit"


class ConnectionType(str, Enum):
    CLEARNET = "Clearnet"
    ONION = "Onion"


class PackingMode(str, Enum):
    IDENTICAL = "Identical"
    ASYMMETRIC = "Asymmetric"


class MachineEvent(str, Enum):
    CIRCUIT_CREATED = "CircuitCreated"
    REAL_CELL_SENT = "RealCellSent"
    REAL_CELL_RECEIVED = "RealCellReceived"
    TIMER_FIRED = "TimerFired"
    CONNECTION_ARRIVED = "ConnectionArrived"
    CIRCUIT_CLOSED = "CircuitClosed"


class StrategyKind(str, Enum):
    PROP999 = "Prop999"
    STRAWMAN = "Strawman"
    PCP = "PCP"


# Trace values. These are built by the million during experiments, so they
# are plain immutable tuples/dataclasses rather than validated models.


class Cell(NamedTuple):
    time: float
    direction: CellDirection
    command: RelayCommand
    is_padding: bool = False

    def shifted(self, delta: float) -> "Cell":
        return self._replace(time=tick(self.time + delta))


@dataclass(frozen=True, slots=True)
class CircuitTrace:
    circuit_id: str
    purpose: CircuitPurpose
    cells: tuple[Cell, ...]
    created_at: float
    closed_at: float
    attached_at: Optional[float] = None

    def __post_init__(self):
        if self.cells and self.closed_at < self.cells[-1].time:
            raise ValidationError(
                f"circuit {self.circuit_id} closes at {self.closed_at} before its last cell"
            )

    @property
    def duration(self) -> float:
        if len(self.cells) < 2:
            return 0.0
        return tick(self.cells[-1].time - self.cells[0].time)

    @property
    def last_time(self) -> float:
        return self.cells[-1].time if self.cells else self.created_at

    def real_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if not c.is_padding)

    def padding_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if c.is_padding)

    def directions(self) -> str:
        return "".join("-" if c.direction == OUT else "+" for c in self.cells)

    def evolve(self, **changes) -> "CircuitTrace":
        return replace(self, **changes)

    def __str__(self):
        return f"Circuit(id={self.circuit_id}, purpose={self.purpose.value}, cells={len(self.cells)})"


@dataclass(frozen=True, slots=True)
class SessionTrace:
    session_id: str
    connection_type: ConnectionType
    think_time: float
    circuits: tuple[CircuitTrace, ...]
    site_id: str

    @property
    def arrival(self) -> float:
        return self.think_time

    def circuit(self, purpose: CircuitPurpose) -> Optional[CircuitTrace]:
        return next((c for c in self.circuits if c.purpose == purpose), None)

    def __str__(self):
        return (
            f"Session(id={self.session_id}, type={self.connection_type.value}, "
            f"site={self.site_id}, circuits={len(self.circuits)})"
        )


@dataclass(frozen=True, slots=True)
class PaddedSession:
    base: SessionTrace
    strategy: StrategyKind
    circuits: tuple[CircuitTrace, ...]
    added_circuits: tuple[CircuitTrace, ...] = ()
    dummy_triplet_count: int = 0
    delay_added: float = 0.0
    drained_cells: int = 0

    def __post_init__(self):
        if self.dummy_triplet_count < 0:
            raise ValidationError("dummy_triplet_count must be non-negative")

    @property
    def connection_type(self) -> ConnectionType:
        return self.base.connection_type

    def as_session(self) -> SessionTrace:
        """The defended session as it appears on the wire."""
        return replace(self.base, circuits=self.circuits)


class MachineState(NamedTuple):
    current: Optional[str]
    pending_timer: Optional[float] = None
    emitted: int = 0
    fired: int = 0


# Validated records (configuration, machine specs, reports).


class DelayDistribution(BaseModel):
    """Delay (or lifetime) distribution in seconds."""

    kind: Literal["fixed", "exponential", "uniform"] = "fixed"
    value: float = Field(default=0.0, ge=0)
    rate: Optional[float] = Field(default=None, gt=0)
    lo: Optional[float] = Field(default=None, ge=0)
    hi: Optional[float] = Field(default=None, ge=0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_parameters(self):
        if self.kind == "exponential" and self.rate is None:
            raise ValueError("exponential delay needs a rate")
        if self.kind == "uniform":
            if self.lo is None or self.hi is None:
                raise ValueError("uniform delay needs lo and hi")
            if self.lo > self.hi:
                raise ValueError("uniform delay needs lo <= hi")
        return self

    @classmethod
    def fixed(cls, value: float) -> "DelayDistribution":
        return cls(kind="fixed", value=value)

    @classmethod
    def exponential(cls, rate: float) -> "DelayDistribution":
        return cls(kind="exponential", rate=rate)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "DelayDistribution":
        return cls(kind="uniform", lo=lo, hi=hi)

    @property
    def mean(self) -> float:
        if self.kind == "exponential":
            return 1.0 / self.rate
        if self.kind == "uniform":
            return (self.lo + self.hi) / 2.0
        return self.value

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "exponential":
            return float(rng.exponential(1.0 / self.rate))
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        return self.value

    def __str__(self):
        if self.kind == "exponential":
            return f"Exp({self.rate})"
        if self.kind == "uniform":
            return f"U({self.lo}, {self.hi})"
        return f"Fixed({self.value})"


class PaddingCell(BaseModel):
    """One cell of a raw padding burst, offset from the firing instant."""

    offset: float = Field(default=0.0, ge=0)
    direction: CellDirection
    command: RelayCommand = RelayCommand.DATA

    model_config = ConfigDict(frozen=True)


class MachineStateSpec(BaseModel):
    id: str
    pattern: Union[RequestKind, list[PaddingCell], None] = None
    delay: Optional[DelayDistribution] = None
    repeat: bool = False

    model_config = ConfigDict(frozen=True)


class Transition(BaseModel):
    source: str
    event: MachineEvent
    target: str

    model_config = ConfigDict(frozen=True)


class MachineSpec(BaseModel):
    """Finite-state padding machine."""

    name: str = "machine"
    states: list[MachineStateSpec] = Field(default_factory=list)
    transitions: list[Transition] = Field(default_factory=list)
    start_state: Optional[str] = None
    applies_to: list[CircuitPurpose] = Field(default_factory=list)
    lifetime: Optional[DelayDistribution] = None
    max_emissions: Optional[int] = Field(default=None, ge=0)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_graph(self):
        ids = {s.id for s in self.states}
        if len(ids) != len(self.states):
            raise ValueError("state ids must be unique")
        if self.states and self.start_state not in ids:
            raise ValueError(f"start state {self.start_state!r} is not a state")
        for t in self.transitions:
            if t.source not in ids or t.target not in ids:
                raise ValueError(f"transition {t.source}->{t.target} names an unknown state")
        for s in self.states:
            stalls = s.delay is None or s.delay.mean == 0
            if s.repeat and s.pattern is not None and stalls and self.max_emissions is None:
                raise ValueError(f"state {s.id} repeats with no delay and needs max_emissions")
        return self

    def state(self, state_id: str) -> MachineStateSpec:
        return next(s for s in self.states if s.id == state_id)

    def target(self, state_id: str, event: MachineEvent) -> Optional[str]:
        for t in self.transitions:
            if t.source == state_id and t.event == event:
                return t.target
        return None

    def applies(self, purpose: CircuitPurpose) -> bool:
        return not self.applies_to or purpose in self.applies_to


class UserModel(BaseModel):
    """User think-time and connection-type model."""

    lambda_u: float = Field(default=4.0, gt=0)
    c: float = Field(default=0.93, ge=0, le=1)

    model_config = ConfigDict(frozen=True)


class SiteModel(BaseModel):
    """Website as a sequence of (outgoing, incoming) APP_DATA bursts."""

    site_id: str
    out_in_pattern: list[tuple[int, int]] = Field(min_length=1)
    packing_inflation_mean: float = Field(default=1.15, ge=1.0)
    packing_inflation_sd: float = Field(default=0.08, ge=0)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_pattern(self):
        for n_out, n_in in self.out_in_pattern:
            if n_out < 0 or n_in < 0 or n_out + n_in == 0:
                raise ValueError(f"site {self.site_id}: empty or negative burst")
        return self

    @property
    def onion_cell_count(self) -> int:
        return sum(n_out + n_in for n_out, n_in in self.out_in_pattern)


class SimConfig(BaseModel):
    user: UserModel = Field(default_factory=UserModel)
    sites: list[SiteModel] = Field(min_length=1)
    rtt: float = Field(default=0.1, gt=0)
    n_sessions: int = Field(default=1000, ge=1)
    packing_mode: PackingMode = PackingMode.IDENTICAL
    lifetime_exit: DelayDistribution = DelayDistribution.uniform(600.0, 660.0)
    lifetime_rend: DelayDistribution = DelayDistribution.fixed(10.0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    balance: bool = False
    scheduling_noise: bool = False

    model_config = ConfigDict(frozen=True)

    def site(self, site_id: str) -> SiteModel:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(site_id)


class Prop999Config(BaseModel):
    """Knobs of the prop999 machines; the deployed values were never published."""

    obfuscate_delay: DelayDistribution = DelayDistribution.fixed(0.01)
    intro_burst: tuple[int, int] = (8, 32)
    rend_burst: tuple[int, int] = (2, 6)
    keepalive: DelayDistribution = DelayDistribution.exponential(0.05)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_bursts(self):
        for lo, hi in (self.intro_burst, self.rend_burst):
            if lo < 0 or lo > hi:
                raise ValueError("burst ranges need 0 <= lo <= hi")
        return self


class StrategyConfig(BaseModel):
    kind: StrategyKind = StrategyKind.PCP
    phi: float = Field(default=1.0, ge=0)
    lambda_u_estimate: float = Field(default=4.0, gt=0)
    prop999_lifetime: DelayDistribution = DelayDistribution.uniform(600.0, 660.0)
    rtt: float = Field(default=0.1, gt=0)
    prop999: Prop999Config = Field(default_factory=Prop999Config)
    triplet_jitter: DelayDistribution = DelayDistribution.fixed(0.0)
    estimate_rate: bool = False
    ema_alpha: float = Field(default=0.1, gt=0, le=1)

    model_config = ConfigDict(frozen=True)

    @property
    def lambda_d(self) -> float:
        return self.phi * self.lambda_u_estimate


class ClassifierKind(str, Enum):
    DECISION_TREE = "DecisionTree"
    NEAREST_NEIGHBOR = "NearestNeighbor"
    BAYES = "Bayes"


class AttackConfig(BaseModel):
    max_len: int = Field(default=120, ge=1)
    max_depth: int = Field(default=20, ge=1)
    min_leaf: int = Field(default=5, ge=1)
    classifiers: list[ClassifierKind] = Field(
        default_factory=lambda: [ClassifierKind.DECISION_TREE, ClassifierKind.NEAREST_NEIGHBOR]
    )

    model_config = ConfigDict(frozen=True)


class ExperimentId(str, Enum):
    EXP1 = "Exp1Vanilla"
    EXP2 = "Exp2Prop999"
    EXP3 = "Exp3StrawmanAsymmetric"
    EXP4 = "Exp4StrawmanIdentical"
    EXP5 = "Exp5PCP"
    GAME = "SecurityGame"


class ScenarioKind(str, Enum):
    MULTI_CLOSED = "MultiClosed"
    MULTI_OPEN = "MultiOpen"
    SINGLE_SITE = "SingleSite"


class Scenario(BaseModel):
    kind: ScenarioKind = ScenarioKind.MULTI_CLOSED
    site: Optional[str] = None

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_site(self):
        if self.kind == ScenarioKind.SINGLE_SITE and not self.site:
            raise ValueError("SingleSite scenario needs a site")
        return self

    def __str__(self):
        if self.kind == ScenarioKind.SINGLE_SITE:
            return f"SingleSite({self.site})"
        return self.kind.value


class GridPoint(BaseModel):
    phi: float = Field(ge=0)
    c: float = Field(ge=0, le=1)

    model_config = ConfigDict(frozen=True)


class GameConfig(BaseModel):
    k: int = Field(default=40, ge=1)
    trials: int = Field(default=200, ge=1)
    learner: Literal["tree", "bayes"] = "tree"
    confidence: float = Field(default=0.95, gt=0, lt=1)
    defended: bool = True

    model_config = ConfigDict(frozen=True)


class ExperimentSpec(BaseModel):
    id: ExperimentId
    scenarios: list[Scenario] = Field(
        default_factory=lambda: [
            Scenario(kind=ScenarioKind.MULTI_CLOSED),
            Scenario(kind=ScenarioKind.MULTI_OPEN),
        ]
    )
    sim: SimConfig
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    game: GameConfig = Field(default_factory=GameConfig)
    grid: Optional[list[GridPoint]] = None
    circuits_per_class: int = Field(default=1500, ge=1)
    output_dir: Path = Path("results")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_grid(self):
        if self.id == ExperimentId.EXP5 and not self.grid:
            raise ValueError("Exp5PCP needs a (phi, c) grid")
        return self

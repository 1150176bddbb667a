"""Vanilla traffic: user think times, website bursts and per-connection circuit sets."""

import logging
from multiprocessing import Pool
from typing import Optional, Sequence

import numpy as np
from scipy.stats import truncnorm

from .cells import CELL_SPACING, circuit_handshake, prologue, request_pattern
from .errors import ValidationError
from .log import kv
from .models import (
    IN,
    OUT,
    Cell,
    CircuitKind,
    CircuitPurpose,
    CircuitTrace,
    ConnectionType,
    PackingMode,
    RelayCommand,
    RequestKind,
    SessionTrace,
    SimConfig,
    SiteModel,
    UserModel,
    tick,
)

logger = logging.getLogger(__name__)

# Substream tags, so each consumer of randomness owns an independent stream.
STREAM_SITES = 0
STREAM_SESSIONS = 1
STREAM_DEFENSE = 2
STREAM_SPLIT = 3
STREAM_GAME = 4

REQUEST_BURST = 2
MIN_SITE_CELLS = 40
MAX_SITE_CELLS = 400
MAX_BURSTS = 5


def substream(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def generate_sites(n: int, rng: np.random.Generator, prefix: str = "site") -> list[SiteModel]:
    """A synthetic website population of request/response burst templates."""
    sites = []
    for i in range(n):
        n_bursts = int(rng.integers(1, MAX_BURSTS + 1))
        total = int(rng.integers(MIN_SITE_CELLS, MAX_SITE_CELLS + 1))
        spare = total - n_bursts * (REQUEST_BURST + 1)
        extra = rng.multinomial(spare, np.full(n_bursts, 1.0 / n_bursts))
        pattern = [(REQUEST_BURST, 1 + int(x)) for x in extra]
        sites.append(SiteModel(site_id=f"{prefix}{i:03d}", out_in_pattern=pattern))
    return sites


def sample_think_time(user: UserModel, rng: np.random.Generator) -> float:
    return float(rng.exponential(1.0 / user.lambda_u))


def sample_inflation(site: SiteModel, rng: np.random.Generator) -> float:
    """Clearnet packing inflation factor, a normal draw truncated below at 1."""
    mean, sd = site.packing_inflation_mean, site.packing_inflation_sd
    if sd == 0:
        return mean
    a = (1.0 - mean) / sd
    return float(truncnorm.rvs(a, np.inf, loc=mean, scale=sd, random_state=rng))


def _inflate(incoming: list[int], target: int) -> list[int]:
    """Spread extra response cells over bursts in proportion to their size."""
    extra = target - sum(incoming)
    if extra <= 0:
        return incoming
    total = sum(incoming)
    shares = [extra * n / total for n in incoming]
    grown = [n + int(s) for n, s in zip(incoming, shares)]
    order = sorted(range(len(incoming)), key=lambda i: (int(shares[i]) - shares[i], i))
    for i in order[: target - sum(grown)]:
        grown[i] += 1
    return grown


def burst_plan(
    site: SiteModel,
    conn: ConnectionType,
    mode: PackingMode,
    rng: np.random.Generator,
    scheduling_noise: bool = False,
) -> list[tuple[int, int]]:
    outgoing = [n_out for n_out, _ in site.out_in_pattern]
    incoming = [n_in for _, n_in in site.out_in_pattern]
    if conn == ConnectionType.CLEARNET:
        if mode == PackingMode.ASYMMETRIC:
            target = round(site.onion_cell_count * sample_inflation(site, rng))
            incoming = _inflate(incoming, target - sum(outgoing))
        if scheduling_noise and len(incoming) > 1:
            incoming = incoming[1:] + incoming[:1]
    return list(zip(outgoing, incoming))


def app_traffic(
    site: SiteModel,
    conn: ConnectionType,
    mode: PackingMode,
    base_time: float,
    rng: np.random.Generator,
    rtt: float = 0.1,
    scheduling_noise: bool = False,
) -> list[Cell]:
    """APP_DATA cells of one page load, starting at base_time."""
    cells: list[Cell] = []
    cursor = tick(base_time)
    for n_out, n_in in burst_plan(site, conn, mode, rng, scheduling_noise):
        for i in range(n_out):
            cells.append(Cell(tick(cursor + i * CELL_SPACING), OUT, RelayCommand.APP_DATA))
        if n_out:
            cursor = tick(cursor + (n_out - 1) * CELL_SPACING + rtt)
        for i in range(n_in):
            cells.append(Cell(tick(cursor + i * CELL_SPACING), IN, RelayCommand.APP_DATA))
        if n_in:
            cursor = tick(cursor + (n_in - 1) * CELL_SPACING)
    return cells


def _circuit(
    circuit_id: str,
    purpose: CircuitPurpose,
    cells: list[Cell],
    created_at: float,
    closed_at: Optional[float] = None,
) -> CircuitTrace:
    last = cells[-1].time if cells else created_at
    return CircuitTrace(
        circuit_id=circuit_id,
        purpose=purpose,
        cells=tuple(cells),
        created_at=created_at,
        closed_at=max(closed_at if closed_at is not None else last, last),
        attached_at=created_at,
    )


def onion_request_circuit(
    circuit_id: str, purpose: CircuitPurpose, kind: RequestKind, at: float, rtt: float
) -> CircuitTrace:
    """HSDir or Intro circuit: two-hop construction, one real request, closed after use."""
    cells = prologue(at, rtt)
    cells += request_pattern(kind, cells[-1].time, rtt, padding=False)
    return _circuit(circuit_id, purpose, cells, at)


def simulate_session(
    config: SimConfig,
    site: SiteModel,
    rng: np.random.Generator,
    session_id: str = "s000000",
    connection_type: Optional[ConnectionType] = None,
) -> SessionTrace:
    """One user connection: think time, then the circuits that carry it."""
    think = tick(sample_think_time(config.user, rng))
    if connection_type is None:
        clearnet = rng.random() < config.user.c
        connection_type = ConnectionType.CLEARNET if clearnet else ConnectionType.ONION
    rtt = config.rtt

    def app(after: float) -> list[Cell]:
        return app_traffic(
            site, connection_type, config.packing_mode, after, rng, rtt, config.scheduling_noise
        )

    if connection_type == ConnectionType.CLEARNET:
        cells = circuit_handshake(CircuitKind.EXIT, think, rtt)
        cells += app(cells[-1].time)
        closed_at = tick(think + config.lifetime_exit.sample(rng))
        circuits = (_circuit(f"{session_id}-0", CircuitPurpose.EXIT, cells, think, closed_at),)
    else:
        hsdir = onion_request_circuit(
            f"{session_id}-0", CircuitPurpose.HSDIR, RequestKind.HSDIR_FETCH, think, rtt
        )
        intro = onion_request_circuit(
            f"{session_id}-1", CircuitPurpose.INTRO, RequestKind.INTRO_HANDSHAKE, think, rtt
        )
        cells = circuit_handshake(CircuitKind.REND, think, rtt)
        cells += app(cells[-1].time)
        closed_at = tick(cells[-1].time + config.lifetime_rend.sample(rng))
        rend = _circuit(f"{session_id}-2", CircuitPurpose.REND, cells, think, closed_at)
        circuits = (hsdir, intro, rend)

    return SessionTrace(
        session_id=session_id,
        connection_type=connection_type,
        think_time=think,
        circuits=circuits,
        site_id=site.site_id,
    )


def session_slot(
    config: SimConfig,
    index: int,
    rng: np.random.Generator,
    connection_types: Optional[Sequence[ConnectionType]] = None,
):
    """Site and (when fixed) connection type of the index-th session."""
    if connection_types is not None:
        return config.sites[int(rng.integers(len(config.sites)))], connection_types[index]
    if config.balance:
        site = config.sites[(index // 2) % len(config.sites)]
        conn = ConnectionType.CLEARNET if index % 2 == 0 else ConnectionType.ONION
        return site, conn
    return config.sites[int(rng.integers(len(config.sites)))], None


def simulate_indices(
    config: SimConfig,
    indices: Sequence[int],
    connection_types: Optional[Sequence[ConnectionType]] = None,
) -> list[SessionTrace]:
    sessions = []
    for index in indices:
        rng = substream(config.seed, STREAM_SESSIONS, index)
        site, conn = session_slot(config, index, rng, connection_types)
        sessions.append(simulate_session(config, site, rng, f"s{index:06d}", conn))
    return sessions


def _simulate_chunk(args) -> list[SessionTrace]:
    return simulate_indices(*args)


def chunked(n: int, jobs: int) -> list[range]:
    size = -(-n // jobs)
    return [range(start, min(start + size, n)) for start in range(0, n, size)]


def simulate_dataset(
    config: SimConfig,
    jobs: int = 1,
    connection_types: Optional[Sequence[ConnectionType]] = None,
) -> list[SessionTrace]:
    """Generate config.n_sessions sessions, independent of the worker count.

    `connection_types`, when given, fixes the type of every session.
    """
    if connection_types is not None and len(connection_types) != config.n_sessions:
        raise ValidationError("need one connection type per session")
    logger.info(kv(event="simulate", n=config.n_sessions, seed=config.seed, jobs=jobs))
    if jobs <= 1 or config.n_sessions < 2 * jobs:
        return simulate_indices(config, range(config.n_sessions), connection_types)
    with Pool(jobs) as pool:
        parts = pool.map(_simulate_chunk, [(config, r, connection_types) for r in chunked(config.n_sessions, jobs)])
    return [s for part in parts for s in part]

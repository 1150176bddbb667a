"""Padding defenses applied to vanilla sessions: prop999, straw-man and PCP."""

import logging
import math
from multiprocessing import Pool
from typing import Optional, Sequence

import numpy as np

from .cells import CELL_SPACING, dummy_request, inject_cells, prologue
from .errors import ValidationError
from .log import kv
from .machine import firing_times, pcp_role_spec, prop999_intro_spec, prop999_rend_spec, run_machine
from .models import (
    Cell,
    CircuitPurpose,
    CircuitTrace,
    ConnectionType,
    PaddedSession,
    RequestKind,
    SessionTrace,
    StrategyConfig,
    StrategyKind,
    tick,
)
from .traffic import STREAM_DEFENSE, chunked, substream

logger = logging.getLogger(__name__)

PROLOGUE_CELLS = 4
ROLE_KINDS = (RequestKind.HSDIR_FETCH, RequestKind.INTRO_HANDSHAKE, RequestKind.REND_HANDSHAKE)


def _passthrough(session: SessionTrace, kind: StrategyKind) -> PaddedSession:
    return PaddedSession(base=session, strategy=kind, circuits=session.circuits)


def _sample_burst(bounds: tuple[int, int], rng: np.random.Generator) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def apply_prop999(
    session: SessionTrace, config: StrategyConfig, rng: np.random.Generator
) -> PaddedSession:
    """Pad onion intro and rend circuits and keep them open like exit circuits."""
    if session.connection_type == ConnectionType.CLEARNET:
        return _passthrough(session, StrategyKind.PROP999)

    knobs = config.prop999
    specs = {
        CircuitPurpose.INTRO: prop999_intro_spec(
            knobs, config.prop999_lifetime, _sample_burst(knobs.intro_burst, rng)
        ),
        CircuitPurpose.REND: prop999_rend_spec(
            knobs, config.prop999_lifetime, _sample_burst(knobs.rend_burst, rng)
        ),
    }
    circuits = []
    for circuit in session.circuits:
        spec = specs.get(circuit.purpose)
        if spec is not None:
            circuit = run_machine(spec, circuit, math.inf, rng, config.rtt)
        circuits.append(circuit)
    return PaddedSession(base=session, strategy=StrategyKind.PROP999, circuits=tuple(circuits))


def fake_circuit(
    circuit_id: str, purpose: CircuitPurpose, kind: RequestKind, at: float, rtt: float
) -> CircuitTrace:
    """Two-hop circuit carrying a single dummy request."""
    cells = prologue(at, rtt)
    cells += dummy_request(kind, cells[-1].time, rtt)
    return CircuitTrace(
        circuit_id=circuit_id,
        purpose=purpose,
        cells=tuple(cells),
        created_at=at,
        closed_at=cells[-1].time,
    )


def _shift_circuit(trace: CircuitTrace, delta: float) -> CircuitTrace:
    return trace.evolve(
        cells=tuple(c.shifted(delta) for c in trace.cells),
        created_at=tick(trace.created_at + delta),
        closed_at=tick(trace.closed_at + delta),
        attached_at=None if trace.attached_at is None else tick(trace.attached_at + delta),
    )


def apply_strawman(
    session: SessionTrace, config: StrategyConfig, rng: np.random.Generator
) -> PaddedSession:
    """Give every clearnet connection a dummy onion triplet, paying for it in latency."""
    if session.connection_type == ConnectionType.ONION:
        return _passthrough(session, StrategyKind.STRAWMAN)

    rtt, t = config.rtt, session.think_time
    fake_hsdir = fake_circuit(
        f"{session.session_id}-f0", CircuitPurpose.FAKE_HSDIR, RequestKind.HSDIR_FETCH, t, rtt
    )
    fake_intro = fake_circuit(
        f"{session.session_id}-f1", CircuitPurpose.FAKE_INTRO, RequestKind.INTRO_HANDSHAKE, t, rtt
    )
    wait = tick(max(fake_hsdir.closed_at, fake_intro.closed_at) - t)

    exit_circuit = _shift_circuit(session.circuit(CircuitPurpose.EXIT), wait)
    head = exit_circuit.cells[:PROLOGUE_CELLS]
    tail = exit_circuit.cells[PROLOGUE_CELLS:]
    dummy = dummy_request(RequestKind.REND_HANDSHAKE, head[-1].time, rtt)
    span = tick(dummy[-1].time - dummy[0].time)

    padded = exit_circuit.evolve(
        purpose=CircuitPurpose.PADDED_EXIT, cells=head, closed_at=head[-1].time
    )
    padded = inject_cells(padded, dummy)
    padded = inject_cells(padded, [c.shifted(span) for c in tail])
    padded = padded.evolve(closed_at=max(tick(exit_circuit.closed_at + span), padded.last_time))

    return PaddedSession(
        base=session,
        strategy=StrategyKind.STRAWMAN,
        circuits=(fake_hsdir, fake_intro, padded),
        added_circuits=(fake_hsdir, fake_intro),
        dummy_triplet_count=1,
        delay_added=tick(wait + span),
    )


class RateEstimator:
    """Online estimate of the user's connection rate from observed think times.

    Keeps an exponential moving average of the think time and reports its
    reciprocal.
    """

    def __init__(self, initial_rate: float, alpha: float = 0.1):
        if initial_rate <= 0:
            raise ValidationError(f"initial rate must be positive, got {initial_rate}")
        if not 0 < alpha <= 1:
            raise ValidationError(f"alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.mean_think = 1.0 / initial_rate
        self.observed = 0

    @property
    def rate(self) -> float:
        return 1.0 / self.mean_think

    def observe(self, think_time: float):
        # Guard against a zero draw collapsing the estimate.
        think_time = max(think_time, 1e-6)
        self.mean_think = (1 - self.alpha) * self.mean_think + self.alpha * think_time
        self.observed += 1


def _role_replay(vanilla: CircuitTrace) -> list[Cell]:
    """Vanilla cells after the two-hop construction, at their original times."""
    return list(vanilla.cells[PROLOGUE_CELLS:])


def _flush_backlog(
    cells: list[Cell], arrival: float, floor: float, deadline: float
) -> tuple[list[Cell], int]:
    """Pack padding still pending at arrival into [floor, deadline).

    Nothing moves when every cell already lands before the deadline. Order is
    kept, so each dummy request stays a contiguous block on the wire.
    """
    if not cells or cells[-1].time < deadline:
        return cells, 0
    sent = [c for c in cells if c.time < arrival]
    pending = cells[len(sent) :]
    spacing = min(CELL_SPACING, (deadline - floor) / (len(pending) + 1))
    packed = [c._replace(time=tick(floor + (i + 1) * spacing)) for i, c in enumerate(pending)]
    return sent + packed, len(pending)


def apply_pcp(
    session: SessionTrace,
    config: StrategyConfig,
    rng: np.random.Generator,
    lambda_u_estimate: Optional[float] = None,
) -> PaddedSession:
    """Preemptive circuit padding.

    Three preemptive circuits are built when the session starts and repeat
    synchronized dummy triplets until the connection arrives; the real
    requests then run on them at their vanilla offsets from arrival.

    Dummies fired while a circuit is busy queue behind the previous one.
    Whatever is still queued or in flight once the connection arrives is
    flushed inside the construction time the preemptive circuit saves, so
    every fired triplet reaches the wire ahead of the real request.
    """
    rtt, t = config.rtt, session.think_time
    rate = lambda_u_estimate if lambda_u_estimate is not None else config.lambda_u_estimate
    lambda_d = config.phi * rate

    timer_seed = int(rng.integers(2**63))
    jitter_rng = np.random.default_rng([timer_seed, 1])
    setup = prologue(0.0, rtt)
    setup_span = setup[-1].time
    # first real cell after the construction on every vanilla circuit
    deadline = prologue(t, rtt)[-1].time
    floor = max(t, setup_span)

    roles = []
    for kind in ROLE_KINDS:
        # Same seed per role, so the three timers fire at the same instants.
        fired = firing_times(pcp_role_spec(kind, lambda_d), 0.0, t, np.random.default_rng(timer_seed))
        busy_end = setup_span
        dummies: list[Cell] = []
        for instant in fired:
            start = max(tick(instant + config.triplet_jitter.sample(jitter_rng)), busy_end)
            pattern = dummy_request(kind, start, rtt)
            dummies.extend(pattern)
            busy_end = pattern[-1].time
        dummies, drained = _flush_backlog(dummies, t, floor, deadline)
        roles.append((fired, dummies, drained))

    count = len(roles[0][0])
    drained_cells = sum(drained for *_, drained in roles)
    sid = session.session_id
    clearnet = session.connection_type == ConnectionType.CLEARNET

    if clearnet:
        purposes = (CircuitPurpose.FAKE_HSDIR, CircuitPurpose.FAKE_INTRO, CircuitPurpose.PADDED_EXIT)
        vanilla = (None, None, session.circuit(CircuitPurpose.EXIT))
    else:
        purposes = (CircuitPurpose.HSDIR, CircuitPurpose.INTRO, CircuitPurpose.REND)
        vanilla = tuple(session.circuit(p) for p in purposes)

    circuits = []
    for i, ((_, dummies, _), purpose, base) in enumerate(zip(roles, purposes, vanilla)):
        trace = CircuitTrace(
            circuit_id=f"{sid}-p{i}",
            purpose=purpose,
            cells=tuple(setup),
            created_at=0.0,
            closed_at=setup_span,
        )
        trace = inject_cells(trace, dummies)
        if base is None:
            trace = trace.evolve(closed_at=max(t, trace.last_time))
        else:
            trace = inject_cells(trace, _role_replay(base))
            trace = trace.evolve(attached_at=t, closed_at=max(base.closed_at, trace.last_time))
        circuits.append(trace)

    added = tuple(circuits[:2]) if clearnet else ()
    logger.debug(kv(session=sid, strategy="pcp", D=count, drained=drained_cells))
    return PaddedSession(
        base=session,
        strategy=StrategyKind.PCP,
        circuits=tuple(circuits),
        added_circuits=added,
        dummy_triplet_count=count,
        drained_cells=drained_cells,
    )


def apply_strategy(
    session: SessionTrace,
    config: StrategyConfig,
    rng: np.random.Generator,
    estimator: Optional[RateEstimator] = None,
) -> PaddedSession:
    if config.kind == StrategyKind.PROP999:
        return apply_prop999(session, config, rng)
    if config.kind == StrategyKind.STRAWMAN:
        return apply_strawman(session, config, rng)
    rate = estimator.rate if estimator is not None else None
    padded = apply_pcp(session, config, rng, rate)
    if estimator is not None:
        estimator.observe(session.think_time)
    return padded


def _defend_indices(
    sessions: Sequence[SessionTrace], config: StrategyConfig, seed: int, offset: int
) -> list[PaddedSession]:
    estimator = None
    if config.kind == StrategyKind.PCP and config.estimate_rate:
        estimator = RateEstimator(config.lambda_u_estimate, config.ema_alpha)
    return [
        apply_strategy(s, config, substream(seed, STREAM_DEFENSE, offset + i), estimator)
        for i, s in enumerate(sessions)
    ]


def _defend_chunk(args) -> list[PaddedSession]:
    return _defend_indices(*args)


def defend_dataset(
    sessions: Sequence[SessionTrace], config: StrategyConfig, seed: int, jobs: int = 1
) -> list[PaddedSession]:
    """Apply one strategy to every session with per-session substreams."""
    logger.info(kv(event="defend", strategy=config.kind.value, n=len(sessions), phi=config.phi))
    sequential = config.kind == StrategyKind.PCP and config.estimate_rate
    if jobs <= 1 or sequential or len(sessions) < 2 * jobs:
        return _defend_indices(sessions, config, seed, 0)
    tasks = [(list(sessions[r.start : r.stop]), config, seed, r.start) for r in chunked(len(sessions), jobs)]
    with Pool(jobs) as pool:
        parts = pool.map(_defend_chunk, tasks)
    return [p for part in parts for p in part]

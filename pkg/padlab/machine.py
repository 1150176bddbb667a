"""Circuit padding state machines.

A machine reacts to circuit events (creation, real cells, its own timer,
connection arrival, close) and schedules padding on the circuit timeline.
Padding is overlaid with inject_cells, so real cells never move.
"""

import heapq
import logging
import math
from typing import Optional

import numpy as np

from .cells import CELL_SPACING, inject_cells, request_pattern
from .errors import ValidationError
from .log import kv
from .models import (
    IN,
    OUT,
    Cell,
    CircuitPurpose,
    CircuitTrace,
    DelayDistribution,
    MachineEvent,
    MachineSpec,
    MachineState,
    MachineStateSpec,
    PaddingCell,
    Prop999Config,
    RequestKind,
    Transition,
    tick,
)

logger = logging.getLogger(__name__)

DEFAULT_RTT = 0.1

# Tie order for events sharing a timestamp.
_CREATED, _REAL, _TIMER, _CLOSED = range(4)


def initial_state(spec: MachineSpec) -> MachineState:
    return MachineState(current=spec.start_state)


def _pattern_cells(
    state: MachineStateSpec, now: float, rtt: float
) -> list[Cell]:
    if isinstance(state.pattern, RequestKind):
        return request_pattern(state.pattern, now, rtt, padding=True)
    return [
        Cell(tick(now + p.offset), p.direction, p.command, True)
        for p in state.pattern or ()
    ]


def _arm(state: MachineStateSpec, now: float, rng: np.random.Generator) -> Optional[float]:
    if state.pattern is None:
        return None
    delay = state.delay.sample(rng) if state.delay else 0.0
    return tick(now + delay)


def _enter(
    spec: MachineSpec,
    state: MachineState,
    target: str,
    now: float,
    rng: np.random.Generator,
) -> MachineState:
    return state._replace(current=target, pending_timer=_arm(spec.state(target), now, rng))


def step(
    spec: MachineSpec,
    state: MachineState,
    event: MachineEvent,
    now: float,
    rng: np.random.Generator,
    rtt: float = DEFAULT_RTT,
) -> tuple[MachineState, list[Cell]]:
    """Advance one machine instance by one event.

    Returns the new state and the padding cells scheduled at `now`.
    """
    if state.current is None:
        return state, []

    if event != MachineEvent.TIMER_FIRED:
        target = spec.target(state.current, event)
        if target is None:
            return state, []
        return _enter(spec, state, target, now, rng), []

    if state.pending_timer is None:
        return state, []
    if spec.max_emissions is not None and state.fired >= spec.max_emissions:
        return state._replace(pending_timer=None), []

    current = spec.state(state.current)
    cells = _pattern_cells(current, now, rtt)
    pending = _arm(current, now, rng) if current.repeat else None
    state = state._replace(
        pending_timer=pending,
        emitted=state.emitted + len(cells),
        fired=state.fired + 1,
    )
    target = spec.target(state.current, MachineEvent.TIMER_FIRED)
    if target is not None:
        state = _enter(spec, state, target, now, rng)
    return state, cells


def run_machine(
    spec: MachineSpec,
    trace: CircuitTrace,
    stop_time: float,
    rng: np.random.Generator,
    rtt: float = DEFAULT_RTT,
    middle_supports_padding: bool = True,
) -> CircuitTrace:
    """Drive a machine over a circuit and overlay the padding it schedules."""
    if stop_time < trace.created_at:
        raise ValidationError(
            f"stop_time {stop_time} precedes circuit creation at {trace.created_at}"
        )
    if not spec.states or not spec.applies(trace.purpose):
        return trace
    if not middle_supports_padding:
        logger.debug(kv(event="padding_not_negotiated", circuit=trace.circuit_id))
        return trace

    closed_at = trace.closed_at
    if spec.lifetime is not None:
        closed_at = max(tick(trace.created_at + spec.lifetime.sample(rng)), trace.last_time)

    seq = 0
    queue: list[tuple[float, int, int, MachineEvent]] = [
        (trace.created_at, _CREATED, seq, MachineEvent.CIRCUIT_CREATED)
    ]
    for cell in trace.real_cells():
        seq += 1
        event = (
            MachineEvent.REAL_CELL_SENT if cell.direction == OUT else MachineEvent.REAL_CELL_RECEIVED
        )
        queue.append((cell.time, _REAL, seq, event))
    if closed_at <= stop_time:
        seq += 1
        queue.append((closed_at, _CLOSED, seq, MachineEvent.CIRCUIT_CLOSED))
    heapq.heapify(queue)

    state = initial_state(spec)
    armed: Optional[tuple[float, int]] = None
    padding: list[Cell] = []
    while queue:
        now, kind, key, event = heapq.heappop(queue)
        if now > stop_time:
            break
        if kind == _TIMER:
            if armed != (now, key):
                continue
            armed = None
        state, cells = step(spec, state, event, now, rng, rtt)
        padding.extend(cells)
        if event == MachineEvent.CIRCUIT_CLOSED:
            break
        if state.pending_timer is not None and (armed is None or armed[0] != state.pending_timer):
            seq += 1
            armed = (state.pending_timer, seq)
            heapq.heappush(queue, (state.pending_timer, _TIMER, seq, MachineEvent.TIMER_FIRED))
        elif state.pending_timer is None:
            armed = None

    logger.debug(
        kv(machine=spec.name, circuit=trace.circuit_id, fired=state.fired, cells=len(padding))
    )
    return inject_cells(trace.evolve(closed_at=closed_at), padding)


def firing_times(
    spec: MachineSpec,
    created_at: float,
    stop_time: float,
    rng: np.random.Generator,
) -> list[float]:
    """Instants at which a machine's timer fires strictly before `stop_time`.

    Only the creation event and the machine's own timer drive it, which is
    all a circuit sees before any connection uses it.
    """
    state, _ = step(spec, initial_state(spec), MachineEvent.CIRCUIT_CREATED, created_at, rng)
    fired = []
    while state.pending_timer is not None and state.pending_timer < stop_time:
        now = state.pending_timer
        fired.append(now)
        state, _ = step(spec, state, MachineEvent.TIMER_FIRED, now, rng)
    return fired


def _burst(n: int, directions) -> list[PaddingCell]:
    return [
        PaddingCell(offset=round(i * CELL_SPACING, 6), direction=directions[i % len(directions)])
        for i in range(n)
    ]


def _prop999_spec(
    name: str,
    purpose: CircuitPurpose,
    burst: list[PaddingCell],
    config: Prop999Config,
    lifetime: DelayDistribution,
) -> MachineSpec:
    keepalive = [PaddingCell(direction=IN)]
    return MachineSpec(
        name=name,
        states=[
            MachineStateSpec(id="start"),
            MachineStateSpec(id="obfuscate", pattern=burst, delay=config.obfuscate_delay),
            MachineStateSpec(id="hold", pattern=keepalive, delay=config.keepalive, repeat=True),
            MachineStateSpec(id="end"),
        ],
        transitions=[
            Transition(source="start", event=MachineEvent.CIRCUIT_CREATED, target="obfuscate"),
            Transition(source="obfuscate", event=MachineEvent.TIMER_FIRED, target="hold"),
            Transition(source="obfuscate", event=MachineEvent.CIRCUIT_CLOSED, target="end"),
            Transition(source="hold", event=MachineEvent.CIRCUIT_CLOSED, target="end"),
        ],
        start_state="start",
        applies_to=[purpose],
        lifetime=lifetime,
    )


def prop999_intro_spec(
    config: Prop999Config, lifetime: DelayDistribution, burst_size: int
) -> MachineSpec:
    """Intro-side machine: an incoming burst that imitates a descriptor download."""
    burst = _burst(burst_size, (IN,))
    return _prop999_spec("prop999-intro", CircuitPurpose.INTRO, burst, config, lifetime)


def prop999_rend_spec(
    config: Prop999Config, lifetime: DelayDistribution, burst_size: int
) -> MachineSpec:
    """Rend-side machine: short out/in chatter over the rendezvous handshake."""
    burst = _burst(burst_size, (OUT, IN))
    return _prop999_spec("prop999-rend", CircuitPurpose.REND, burst, config, lifetime)


def pcp_role_spec(kind: RequestKind, lambda_d: float) -> MachineSpec:
    """Preemptive-circuit machine repeating one dummy request at rate lambda_d.

    With lambda_d == 0 the dummy state carries no pattern and never fires.
    """
    if lambda_d < 0 or not math.isfinite(lambda_d):
        raise ValidationError(f"lambda_d must be a finite non-negative rate, got {lambda_d}")
    if lambda_d > 0:
        dummy = MachineStateSpec(
            id="dummy", pattern=kind, delay=DelayDistribution.exponential(lambda_d), repeat=True
        )
    else:
        dummy = MachineStateSpec(id="dummy")
    return MachineSpec(
        name=f"pcp-{kind.value}",
        states=[MachineStateSpec(id="preemptive"), dummy, MachineStateSpec(id="attached")],
        transitions=[
            Transition(source="preemptive", event=MachineEvent.CIRCUIT_CREATED, target="dummy"),
            Transition(source="dummy", event=MachineEvent.CONNECTION_ARRIVED, target="attached"),
        ],
        start_state="preemptive",
        applies_to=[CircuitPurpose.PREEMPTIVE],
    )

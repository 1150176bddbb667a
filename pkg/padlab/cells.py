"""Protocol cell patterns: circuit handshakes, onion-service requests, injection."""

from typing import Iterable

from .errors import ValidationError
from .models import (
    IN,
    OUT,
    Cell,
    CellDirection,
    CircuitKind,
    CircuitTrace,
    RelayCommand,
    RequestKind,
    tick,
)

# Spacing of back-to-back cells from the same sender.
CELL_SPACING = 0.001
HSDIR_DATA_CELLS = 30

PATTERN_SIZES = {
    RequestKind.HSDIR_FETCH: 37,
    RequestKind.INTRO_HANDSHAKE: 4,
    RequestKind.REND_HANDSHAKE: 3,
}


class _Timeline:
    """Lays out one request/reply exchange on the microsecond grid.

    An outgoing cell that answers an incoming one leaves immediately, a
    reply to an outgoing cell lands one rtt later, and a second reply or a
    repeated cell from the same sender follows after CELL_SPACING (or a full
    rtt for a separate reply).
    """

    def __init__(self, base_time: float, rtt: float, padding: bool):
        if rtt <= 0:
            raise ValidationError(f"rtt must be positive, got {rtt}")
        self.cursor = tick(base_time)
        self.rtt = rtt
        self.padding = padding
        self.cells: list[Cell] = []

    def _emit(self, direction: CellDirection, command: RelayCommand):
        self.cells.append(Cell(self.cursor, direction, command, self.padding))

    def send(self, command: RelayCommand):
        if self.cells and self.cells[-1].direction == OUT:
            self.cursor = tick(self.cursor + CELL_SPACING)
        self._emit(OUT, command)

    def reply(self, command: RelayCommand):
        if self.cells:
            self.cursor = tick(self.cursor + self.rtt)
        self._emit(IN, command)

    def follow(self, command: RelayCommand, count: int = 1):
        for _ in range(count):
            if self.cells:
                self.cursor = tick(self.cursor + CELL_SPACING)
            self._emit(IN, command)


def prologue(base_time: float, rtt: float, padding: bool = False) -> list[Cell]:
    """Two-hop circuit construction shared by every circuit type."""
    line = _Timeline(base_time, rtt, padding)
    for _ in range(2):
        line.send(RelayCommand.EXTEND2)
        line.reply(RelayCommand.EXTENDED)
    return line.cells


def request_pattern(
    kind: RequestKind, base_time: float, rtt: float, padding: bool
) -> list[Cell]:
    """The deterministic cell pattern of an onion-service request.

    Real and dummy requests come from this one builder, so the only
    difference between them is the ground-truth padding flag.
    """
    line = _Timeline(base_time, rtt, padding)
    if kind == RequestKind.HSDIR_FETCH:
        line.send(RelayCommand.EXTEND2)
        line.reply(RelayCommand.EXTENDED)
        line.send(RelayCommand.BEGIN_DIR)
        line.send(RelayCommand.DATA)
        line.reply(RelayCommand.CONNECTED)
        line.follow(RelayCommand.DATA)
        line.follow(RelayCommand.DATA, HSDIR_DATA_CELLS)
        line.follow(RelayCommand.END)
    elif kind == RequestKind.INTRO_HANDSHAKE:
        line.send(RelayCommand.EXTEND2)
        line.reply(RelayCommand.EXTENDED)
        line.send(RelayCommand.INTRODUCE1)
        line.reply(RelayCommand.INTRO_ACK)
    else:
        line.send(RelayCommand.ESTABLISH_REND)
        line.reply(RelayCommand.REND_ESTABLISHED)
        line.reply(RelayCommand.REND2)
    return line.cells


def pattern_span(kind: RequestKind, rtt: float) -> float:
    cells = request_pattern(kind, 0.0, rtt, padding=True)
    return cells[-1].time


def stream_open(base_time: float, rtt: float) -> list[Cell]:
    """BEGIN/CONNECTED exchange that opens the application stream."""
    line = _Timeline(base_time, rtt, padding=False)
    line.send(RelayCommand.BEGIN)
    line.reply(RelayCommand.CONNECTED)
    return line.cells


def circuit_handshake(kind: CircuitKind, base_time: float, rtt: float) -> list[Cell]:
    """Cells a client circuit exchanges before application data flows."""
    cells = prologue(base_time, rtt)
    if kind == CircuitKind.REND:
        cells += request_pattern(
            RequestKind.REND_HANDSHAKE, cells[-1].time, rtt, padding=False
        )
    cells += stream_open(cells[-1].time, rtt)
    return cells


def dummy_request(kind: RequestKind, base_time: float, rtt: float) -> list[Cell]:
    return request_pattern(kind, base_time, rtt, padding=True)


def inject_cells(trace: CircuitTrace, cells: Iterable[Cell]) -> CircuitTrace:
    """Overlay cells on a circuit without touching the existing ones.

    The merge is a stable sort on time, so on equal timestamps the
    circuit's own cells stay ahead of the injected ones and injected cells
    keep their relative order.
    """
    cells = list(cells)
    if not cells:
        return trace
    early = [c for c in cells if c.time < trace.created_at]
    if early:
        raise ValidationError(
            f"cannot inject a cell at t={early[0].time} before the circuit exists",
            context=f"circuit {trace.circuit_id} created_at={trace.created_at}",
        )
    merged = sorted([*trace.cells, *cells], key=lambda c: c.time)
    return trace.evolve(
        cells=tuple(merged), closed_at=max(trace.closed_at, merged[-1].time)
    )

"""Artifact formats: cell traces, feature CSVs, results and run manifests."""

import csv
import hashlib
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict

from .adversary import FeatureVector
from .errors import ExportError
from .log import kv
from .models import (
    Cell,
    CellDirection,
    CircuitPurpose,
    CircuitTrace,
    ConnectionType,
    PaddedSession,
    RelayCommand,
    SessionTrace,
)
from .reports import RESULT_COLUMNS, ResultRow, RunManifest

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["phi", "c", "accuracy", "leakage"]


class CellRecord(BaseModel):
    """One line of a trace file; field order is the file format."""

    run_id: str
    session_id: str
    circuit_id: str
    purpose: CircuitPurpose
    t: float
    dir: Literal["+1", "-1"]
    cmd: RelayCommand
    pad: Literal[0, 1]

    model_config = ConfigDict(frozen=True)


class CircuitRecord(BaseModel):
    circuit_id: str
    purpose: CircuitPurpose
    created_at: float
    closed_at: float
    attached_at: Optional[float] = None
    added: bool = False


class SessionRecord(BaseModel):
    """Session metadata kept beside a trace file so it can be read back whole."""

    run_id: str
    session_id: str
    connection_type: ConnectionType
    think_time: float
    site_id: str
    circuits: list[CircuitRecord]
    strategy: Optional[str] = None
    dummy_triplet_count: int = 0
    delay_added: float = 0.0
    drained_cells: int = 0


@contextmanager
def _open(path: Path, mode: str = "w"):
    try:
        if "w" in mode:
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, mode, encoding="utf-8", newline="") as handle:
            yield handle
    except OSError as exc:
        raise ExportError(detail=f"cannot access {path}: {exc.strerror}", context=str(path))


def sidecar_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}.sessions.jsonl")


def _cell_record(run_id: str, session_id: str, circuit: CircuitTrace, cell: Cell) -> CellRecord:
    return CellRecord(
        run_id=run_id,
        session_id=session_id,
        circuit_id=circuit.circuit_id,
        purpose=circuit.purpose,
        t=cell.time,
        dir=str(cell.direction),
        cmd=cell.command,
        pad=int(cell.is_padding),
    )


def write_traces(
    path: Path, sessions: Sequence[Union[SessionTrace, PaddedSession]], run_id: str
) -> Path:
    """Write ground-truth cells as JSON lines plus the session sidecar."""
    with _open(path) as cells_out, _open(sidecar_path(path)) as meta_out:
        for item in sessions:
            padded = item if isinstance(item, PaddedSession) else None
            session = padded.as_session() if padded else item
            added = {c.circuit_id for c in padded.added_circuits} if padded else set()
            for circuit in session.circuits:
                for cell in circuit.cells:
                    record = _cell_record(run_id, session.session_id, circuit, cell)
                    cells_out.write(record.model_dump_json() + "\n")
            meta = SessionRecord(
                run_id=run_id,
                session_id=session.session_id,
                connection_type=session.connection_type,
                think_time=session.think_time,
                site_id=session.site_id,
                circuits=[
                    CircuitRecord(
                        circuit_id=c.circuit_id,
                        purpose=c.purpose,
                        created_at=c.created_at,
                        closed_at=c.closed_at,
                        attached_at=c.attached_at,
                        added=c.circuit_id in added,
                    )
                    for c in session.circuits
                ],
                strategy=padded.strategy.value if padded else None,
                dummy_triplet_count=padded.dummy_triplet_count if padded else 0,
                delay_added=padded.delay_added if padded else 0.0,
                drained_cells=padded.drained_cells if padded else 0,
            )
            meta_out.write(meta.model_dump_json() + "\n")
    logger.info(kv(event="write_traces", path=path, sessions=len(sessions)))
    return path


def _lines(path: Path) -> Iterable[str]:
    if not path.exists():
        raise ExportError(detail=f"{path} does not exist", context=str(path))
    with _open(path, "r") as handle:
        for line in handle:
            if line.strip():
                yield line


def read_session_records(path: Path) -> list[SessionRecord]:
    return [SessionRecord.model_validate_json(line) for line in _lines(sidecar_path(path))]


def read_traces(path: Path) -> list[SessionTrace]:
    """Rebuild the sessions written by write_traces, as seen on the wire."""
    cells: dict[str, list[Cell]] = {}
    for line in _lines(path):
        record = CellRecord.model_validate_json(line)
        cells.setdefault(record.circuit_id, []).append(
            Cell(record.t, CellDirection(int(record.dir)), record.cmd, bool(record.pad))
        )
    sessions = []
    for meta in read_session_records(path):
        circuits = tuple(
            CircuitTrace(
                circuit_id=c.circuit_id,
                purpose=c.purpose,
                cells=tuple(cells.get(c.circuit_id, ())),
                created_at=c.created_at,
                closed_at=c.closed_at,
                attached_at=c.attached_at,
            )
            for c in meta.circuits
        )
        sessions.append(
            SessionTrace(
                session_id=meta.session_id,
                connection_type=meta.connection_type,
                think_time=meta.think_time,
                circuits=circuits,
                site_id=meta.site_id,
            )
        )
    return sessions


def feature_header(max_len: int) -> list[str]:
    return ["label", "duration", *(f"s{i}" for i in range(1, max_len + 1))]


def write_features(path: Path, samples: Sequence[FeatureVector], max_len: int) -> Path:
    with _open(path) as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(feature_header(max_len))
        for s in samples:
            writer.writerow([s.label, repr(s.duration), *s.cell_seq])
    logger.info(kv(event="write_features", path=path, rows=len(samples)))
    return path


def write_results(path: Path, rows: Sequence[ResultRow]) -> Path:
    with _open(path) as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())
    return path


def write_curve(path: Path, rows: Sequence[dict]) -> Path:
    with _open(path) as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for row in rows:
            writer.writerow([f"{row[k]:.6f}" for k in CURVE_COLUMNS])
    return path


def write_manifest(path: Path, manifest: RunManifest) -> Path:
    with _open(path) as out:
        out.write(manifest.model_dump_json(indent=2) + "\n")
    return path


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    try:
        digest.update(path.read_bytes())
    except OSError as exc:
        raise ExportError(detail=f"cannot read {path}: {exc.strerror}", context=str(path))
    return digest.hexdigest()

"""Run registry: an index of finished runs and their result rows"""

import os
from datetime import datetime, timezone
from functools import lru_cache
from typing import Optional, Sequence
from uuid import uuid4

from dotenv import load_dotenv
from sqlalchemy import Engine
from sqlmodel import Field, Session, SQLModel, create_engine, select

from .reports import ResultRow, RunManifest

load_dotenv()
# load environment variables from .env file

DEFAULT_DATABASE_URL = "sqlite:///padlab.db"


@lru_cache(maxsize=None)
def get_engine(url: Optional[str] = None) -> Engine:
    """SQLAlchemy engine for PADLAB_DATABASE_URL (or an explicit url)."""
    url = url or os.environ.get("PADLAB_DATABASE_URL", DEFAULT_DATABASE_URL)
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


def create_db_and_tables(engine: Optional[Engine] = None):
    """Create registry tables (done on first use)."""
    SQLModel.metadata.create_all(engine or get_engine())


class RunRecord(SQLModel, table=True):
    """One finished experiment run."""

    __tablename__ = "runs"  # type: ignore

    run_id: str = Field(primary_key=True)
    experiment: str = Field(nullable=False)
    scenario: str = Field(nullable=False)
    seed: int = Field(nullable=False)
    config_hash: str = Field(nullable=False)
    output_dir: str = Field(nullable=False)
    n_rows: int = Field(default=0)
    finished_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    def __repr__(self) -> str:
        return f"RunRecord(run_id={self.run_id[:12]}, experiment={self.experiment}, rows={self.n_rows})"


class ResultRecord(SQLModel, table=True):
    """One results.csv row of a registered run."""

    __tablename__ = "results"  # type: ignore

    result_id: str = Field(default_factory=lambda: str(uuid4()), primary_key=True)
    run_id: str = Field(foreign_key="runs.run_id", index=True)
    scenario: str
    task: str
    classifier: str
    phi: Optional[float] = Field(default=None, nullable=True)
    c: Optional[float] = Field(default=None, nullable=True)
    accuracy: float
    tpr: float
    fpr: float
    precision: Optional[float] = Field(default=None, nullable=True)
    leakage: float
    n_train: int
    n_test: int


def record_run(
    manifest: RunManifest,
    rows: Sequence[ResultRow],
    output_dir: str,
    engine: Optional[Engine] = None,
) -> RunRecord:
    """Register a run, replacing an earlier registration of the same run_id."""
    engine = engine or get_engine()
    create_db_and_tables(engine)
    with Session(engine) as session:
        stale = session.exec(select(ResultRecord).where(ResultRecord.run_id == manifest.run_id))
        for record in stale.all():
            session.delete(record)
        previous = session.get(RunRecord, manifest.run_id)
        if previous:
            session.delete(previous)
        session.flush()
        run = RunRecord(
            run_id=manifest.run_id,
            experiment=manifest.experiment,
            scenario=",".join(sorted({r.scenario for r in rows})),
            seed=manifest.seed,
            config_hash=manifest.config_hash,
            output_dir=output_dir,
            n_rows=len(rows),
        )
        session.add(run)
        for row in rows:
            session.add(
                ResultRecord(
                    run_id=manifest.run_id,
                    **row.model_dump(
                        include={
                            "scenario", "task", "classifier", "phi", "c", "accuracy", "tpr",
                            "fpr", "precision", "leakage", "n_train", "n_test",
                        }
                    ),
                )
            )
        session.commit()
        session.refresh(run)
        return run


def list_runs(engine: Optional[Engine] = None) -> list[RunRecord]:
    engine = engine or get_engine()
    create_db_and_tables(engine)
    with Session(engine) as session:
        return list(session.exec(select(RunRecord).order_by(RunRecord.finished_at)).all())


def run_results(run_id: str, engine: Optional[Engine] = None) -> list[ResultRecord]:
    engine = engine or get_engine()
    create_db_and_tables(engine)
    with Session(engine) as session:
        query = select(ResultRecord).where(ResultRecord.run_id == run_id)
        return list(session.exec(query).all())

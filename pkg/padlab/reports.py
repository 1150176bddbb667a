"""Report records written by experiments and the security game"""

from typing import Annotated, Optional

from pydantic import BaseModel, ConfigDict, Field

RESULT_COLUMNS = [
    "experiment",
    "scenario",
    "task",
    "classifier",
    "phi",
    "c",
    "accuracy",
    "tpr",
    "fpr",
    "precision",
    "leakage",
    "n_train",
    "n_test",
    "seed",
    "run_id",
]

Rate = Annotated[float, Field(ge=0, le=1)]


class ClassifierReport(BaseModel):
    classifier: str
    accuracy: Rate
    tpr: Rate
    fpr: Rate
    precision: Optional[float] = Field(default=None, ge=0, le=1)
    leakage: float
    n_train: int = Field(ge=0)
    n_test: int = Field(ge=1)
    warning: bool = False

    model_config = ConfigDict(frozen=True)

    def __str__(self):
        precision = "-" if self.precision is None else f"{self.precision:.3f}"
        return (
            f"{self.classifier}: acc={self.accuracy:.3f} tpr={self.tpr:.3f} "
            f"fpr={self.fpr:.3f} precision={precision} leakage={self.leakage:+.3f}"
        )


class ResultRow(BaseModel):
    """One line of results.csv."""

    experiment: str
    scenario: str
    task: str
    classifier: str
    phi: Optional[float] = None
    c: Optional[float] = None
    accuracy: float
    tpr: float
    fpr: float
    precision: Optional[float] = None
    leakage: float
    n_train: int
    n_test: int
    seed: int
    run_id: str = ""

    @classmethod
    def from_report(cls, report: ClassifierReport, **context) -> "ResultRow":
        return cls(
            classifier=report.classifier,
            accuracy=report.accuracy,
            tpr=report.tpr,
            fpr=report.fpr,
            precision=report.precision,
            leakage=report.leakage,
            n_train=report.n_train,
            n_test=report.n_test,
            **context,
        )

    def csv_values(self) -> list[str]:
        def fmt(value) -> str:
            if value is None:
                return ""
            if isinstance(value, float):
                return f"{value:.6f}"
            return str(value)

        return [fmt(getattr(self, column)) for column in RESULT_COLUMNS]


class RunManifest(BaseModel):
    run_id: str
    experiment: str
    seed: int
    config_hash: str
    versions: dict[str, str]
    files: dict[str, str] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True)


class GameResult(BaseModel):
    trials: int = Field(ge=1)
    wins: int = Field(ge=0)
    win_rate: Rate
    ci_low: Rate
    ci_high: Rate
    k: int
    learner: str
    bound: Optional[float] = None

    model_config = ConfigDict(frozen=True)

    def __str__(self):
        return (
            f"win rate {self.win_rate:.3f} over {self.trials} trials "
            f"(CI {self.ci_low:.3f}..{self.ci_high:.3f}, learner={self.learner}, k={self.k})"
        )

"""What a relay-side adversary sees, the features it derives and the classifiers it trains."""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix
from sklearn.neighbors import KNeighborsClassifier
from sklearn.tree import DecisionTreeClassifier

from .errors import ValidationError
from .log import kv
from .models import (
    AttackConfig,
    CircuitTrace,
    ClassifierKind,
    ConnectionType,
    SessionTrace,
)
from .reports import ClassifierReport

logger = logging.getLogger(__name__)

PROLOGUE = "-+-+"
REND_BLOCK = "-++"
TRAIN_FRACTION = 0.75


class ViewEvent(NamedTuple):
    time: float
    direction: int


@dataclass(frozen=True, slots=True)
class AdversaryView:
    circuit_id: str
    events: tuple[ViewEvent, ...]

    def directions(self) -> str:
        return "".join("-" if e.direction < 0 else "+" for e in self.events)

    def to_dict(self) -> dict:
        return {"circuit_id": self.circuit_id, "events": [list(e) for e in self.events]}

    def __len__(self):
        return len(self.events)


class FeatureVector(NamedTuple):
    duration: float
    cell_seq: tuple[int, ...]
    label: Optional[int] = None

    def as_row(self) -> list[float]:
        return [self.duration, *self.cell_seq]


def to_adversary_view(trace: CircuitTrace) -> AdversaryView:
    return AdversaryView(
        circuit_id=trace.circuit_id,
        events=tuple(ViewEvent(c.time, int(c.direction)) for c in trace.cells),
    )


def session_views(session: SessionTrace) -> list[AdversaryView]:
    return [to_adversary_view(c) for c in session.circuits]


def extract_features(
    view: AdversaryView, max_len: int, label: Optional[int] = None
) -> FeatureVector:
    """Duration of activity plus the zero-padded direction sequence."""
    if max_len < 1:
        raise ValidationError(f"max_len must be at least 1, got {max_len}")
    duration = 0.0
    if len(view.events) > 1:
        duration = round(view.events[-1].time - view.events[0].time, 6)
    seq = np.zeros(max_len, dtype=int)
    head = [e.direction for e in view.events[:max_len]]
    seq[: len(head)] = head
    return FeatureVector(duration, tuple(int(x) for x in seq), label)


def count_triplets(views: Sequence[AdversaryView]) -> Optional[int]:
    """Count rendezvous-shaped request blocks on the Exit/Rend-role circuit.

    The role circuit is the last of a triplet of circuits that all open with
    the two-hop construction. Returns None when no such triplet exists.
    """
    if len(views) < 3:
        return None
    triplet = [v.directions() for v in views[-3:]]
    if not all(d.startswith(PROLOGUE) for d in triplet):
        return None
    directions = triplet[-1]
    count, i = 0, len(PROLOGUE)
    while directions.startswith(REND_BLOCK, i):
        count += 1
        i += len(REND_BLOCK)
    return count


def bayes_predict(n: Optional[int], phi: float, c: float) -> ConnectionType:
    """Maximum-posterior connection type given the observed request count."""
    if phi < 0 or not 0 <= c <= 1:
        raise ValidationError(f"need phi >= 0 and 0 <= c <= 1, got phi={phi} c={c}")
    if not n:
        return ConnectionType.CLEARNET
    p = 1.0 / (1.0 + phi)
    if c >= 1 - c * (1 - p):
        return ConnectionType.CLEARNET
    return ConnectionType.ONION


class BayesModel:
    """Bayes-on-N classifier; predicts 1 for onion."""

    kind = ClassifierKind.BAYES
    warning = False

    def __init__(self, phi: float, c: float):
        self.phi = phi
        self.c = c

    def predict(self, counts: Sequence[Optional[int]]) -> np.ndarray:
        return np.array(
            [int(bayes_predict(n, self.phi, self.c) == ConnectionType.ONION) for n in counts]
        )


class TrainedModel:
    """A fitted scikit-learn estimator, or a constant when training saw one class."""

    def __init__(self, kind: ClassifierKind, estimator=None, constant: Optional[int] = None):
        self.kind = kind
        self.estimator = estimator
        self.constant = constant

    @property
    def warning(self) -> bool:
        return self.constant is not None

    def predict(self, samples: Sequence[FeatureVector]) -> np.ndarray:
        if self.constant is not None:
            return np.full(len(samples), self.constant, dtype=int)
        return self.estimator.predict(feature_matrix(samples))


def feature_matrix(samples: Sequence[FeatureVector]) -> np.ndarray:
    return np.array([s.as_row() for s in samples], dtype=float)


def train_classifier(
    kind: ClassifierKind,
    train: Sequence[FeatureVector],
    params: AttackConfig,
    seed: int = 0,
) -> TrainedModel:
    if not train:
        raise ValidationError("cannot train on an empty set")
    labels = np.array([s.label for s in train], dtype=int)
    classes = np.unique(labels)
    if len(classes) < 2:
        logger.warning(kv(event="single_class_training", classifier=kind.value, label=int(classes[0])))
        return TrainedModel(kind, constant=int(classes[0]))

    if kind == ClassifierKind.DECISION_TREE:
        estimator = DecisionTreeClassifier(
            criterion="gini",
            max_depth=params.max_depth,
            min_samples_leaf=params.min_leaf,
            random_state=seed,
        )
    elif kind == ClassifierKind.NEAREST_NEIGHBOR:
        estimator = KNeighborsClassifier(n_neighbors=1, metric="euclidean")
    else:
        raise ValidationError(f"{kind.value} is not a trainable classifier")
    estimator.fit(feature_matrix(train), labels)
    return TrainedModel(kind, estimator=estimator)


def score(
    classifier: str,
    labels: Sequence[int],
    predictions: Sequence[int],
    positive: int = 1,
    n_train: int = 0,
    warning: bool = False,
) -> ClassifierReport:
    """Confusion-matrix metrics of predictions against ground truth."""
    truth = np.asarray(labels, dtype=int) == positive
    predicted = np.asarray(predictions, dtype=int) == positive
    if not len(truth):
        raise ValidationError("cannot evaluate on an empty test set")
    tn, fp, fn, tp = confusion_matrix(truth, predicted, labels=[False, True]).ravel()
    n = len(truth)
    accuracy = (tp + tn) / n
    share = truth.mean()
    return ClassifierReport(
        classifier=classifier,
        accuracy=float(accuracy),
        tpr=float(tp / (tp + fn)) if tp + fn else 0.0,
        fpr=float(fp / (fp + tn)) if fp + tn else 0.0,
        precision=float(tp / (tp + fp)) if tp + fp else None,
        leakage=float(accuracy - max(share, 1 - share)),
        n_train=n_train,
        n_test=n,
        warning=warning,
    )


def evaluate(
    model,
    samples: Sequence,
    labels: Sequence[int],
    positive: int = 1,
    n_train: int = 0,
) -> ClassifierReport:
    if not len(samples):
        raise ValidationError("cannot evaluate on an empty test set")
    return score(
        model.kind.value, labels, model.predict(samples), positive, n_train, model.warning
    )


def _take(group: list, rng: np.random.Generator) -> tuple[list, list]:
    order = rng.permutation(len(group))
    cut = len(group) * 3 // 4
    return [group[i] for i in order[:cut]], [group[i] for i in order[cut:]]


def split_closed_world(
    sessions: Sequence, rng: np.random.Generator, key=lambda s: s
) -> tuple[list, list]:
    """75/25 split inside each (site, connection type) group."""
    groups = defaultdict(list)
    for s in sessions:
        base = key(s)
        groups[(base.site_id, base.connection_type.value)].append(s)
    train, test = [], []
    for group_key in sorted(groups):
        a, b = _take(groups[group_key], rng)
        train += a
        test += b
    return train, test


def split_open_world(
    sessions: Sequence, rng: np.random.Generator, key=lambda s: s
) -> tuple[list, list]:
    """75/25 split of the site population; no site appears on both sides."""
    sites = sorted({key(s).site_id for s in sessions})
    if len(sites) < 2:
        raise ValidationError("open world needs at least two sites")
    order = rng.permutation(len(sites))
    cut = min(max(1, round(len(sites) * TRAIN_FRACTION)), len(sites) - 1)
    train_sites = {sites[i] for i in order[:cut]}
    train = [s for s in sessions if key(s).site_id in train_sites]
    test = [s for s in sessions if key(s).site_id not in train_sites]
    return train, test


def session_features(
    views: Sequence[AdversaryView], max_len: int, label: Optional[int] = None
) -> FeatureVector:
    """Session-level sample: circuit count, then the last circuit's features."""
    last = extract_features(views[-1], max_len)
    return FeatureVector(last.duration, (len(views), *last.cell_seq), label)

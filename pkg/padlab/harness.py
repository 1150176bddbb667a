"""Experiment orchestration: datasets, defenses, attacks, the security game and artifacts."""

import hashlib
import json
import logging
import math
from enum import Enum
from importlib import metadata
from multiprocessing import Pool
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.stats import binomtest
from sqlalchemy.exc import SQLAlchemyError

from .adversary import (
    BayesModel,
    FeatureVector,
    bayes_predict,
    count_triplets,
    evaluate,
    extract_features,
    score,
    session_features,
    session_views,
    split_closed_world,
    split_open_world,
    to_adversary_view,
    train_classifier,
)
from .analytics import curve_grid, optimal_accuracy
from .database import record_run
from .errors import AlreadyExistsError, NotFoundError, ValidationError
from .export import write_curve, write_features, write_manifest, write_results, write_traces, sha256_file
from .log import kv
from .models import (
    CircuitPurpose,
    ClassifierKind,
    ConnectionType,
    ExperimentId,
    ExperimentSpec,
    GridPoint,
    PackingMode,
    PaddedSession,
    Scenario,
    ScenarioKind,
    SessionTrace,
    SimConfig,
    StrategyConfig,
    StrategyKind,
)
from .reports import GameResult, ResultRow, RunManifest
from .strategies import apply_strategy, defend_dataset
from .traffic import STREAM_GAME, STREAM_SPLIT, simulate_dataset, simulate_session, substream

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1"
RESULTS_FILE = "results.csv"
MANIFEST_FILE = "manifest.json"
ANALYTIC_FILE = "analytic.csv"


class Task(NamedTuple):
    """Binary circuit classification task; `negative=None` means every other circuit."""

    name: str
    positive: frozenset
    negative: Optional[frozenset] = None

    def label(self, purpose: CircuitPurpose) -> Optional[int]:
        if purpose in self.positive:
            return 1
        if self.negative is None or purpose in self.negative:
            return 0
        return None


OTHER_VS_INTRO = Task("Other-vs-Intro", frozenset({CircuitPurpose.INTRO}))
OTHER_VS_REND = Task("Other-vs-Rend", frozenset({CircuitPurpose.REND}))
FAKE_HSDIR_VS_HSDIR = Task(
    "FakeHSDir-vs-HSDir", frozenset({CircuitPurpose.HSDIR}), frozenset({CircuitPurpose.FAKE_HSDIR})
)
FAKE_INTRO_VS_INTRO = Task(
    "FakeIntro-vs-Intro", frozenset({CircuitPurpose.INTRO}), frozenset({CircuitPurpose.FAKE_INTRO})
)
PADDED_EXIT_VS_REND = Task(
    "PaddedExit-vs-Rend", frozenset({CircuitPurpose.REND}), frozenset({CircuitPurpose.PADDED_EXIT})
)
PADDED_EXIT_VS_PADDED_REND = Task(
    "PaddedExit-vs-PaddedRend",
    frozenset({CircuitPurpose.REND}),
    frozenset({CircuitPurpose.PADDED_EXIT}),
)

EXPERIMENT_TASKS = {
    ExperimentId.EXP1: (OTHER_VS_INTRO, OTHER_VS_REND),
    ExperimentId.EXP2: (OTHER_VS_INTRO, OTHER_VS_REND),
    ExperimentId.EXP3: (FAKE_HSDIR_VS_HSDIR, FAKE_INTRO_VS_INTRO, PADDED_EXIT_VS_REND),
    ExperimentId.EXP4: (FAKE_HSDIR_VS_HSDIR, FAKE_INTRO_VS_INTRO, PADDED_EXIT_VS_REND),
    ExperimentId.EXP5: (PADDED_EXIT_VS_PADDED_REND,),
}

EXPERIMENT_STRATEGY = {
    ExperimentId.EXP2: StrategyKind.PROP999,
    ExperimentId.EXP3: StrategyKind.STRAWMAN,
    ExperimentId.EXP4: StrategyKind.STRAWMAN,
    ExperimentId.EXP5: StrategyKind.PCP,
}

TASKS = {t.name: t for tasks in EXPERIMENT_TASKS.values() for t in tasks}


class ExportFormat(str, Enum):
    TRACE_JSONL = "TraceJsonl"
    FEATURE_CSV = "FeatureCsv"


class ExperimentRun(NamedTuple):
    rows: list[ResultRow]
    manifest: RunManifest
    output_dir: Path


def wire(item: Union[SessionTrace, PaddedSession]) -> SessionTrace:
    return item.as_session() if isinstance(item, PaddedSession) else item


def experiment_sim(spec: ExperimentSpec) -> SimConfig:
    """Simulation config with the packing and balance an experiment prescribes."""
    if spec.id == ExperimentId.EXP3:
        return spec.sim.model_copy(update={"packing_mode": PackingMode.ASYMMETRIC, "balance": True})
    if spec.id == ExperimentId.EXP4:
        return spec.sim.model_copy(update={"packing_mode": PackingMode.IDENTICAL, "balance": True})
    return spec.sim


def experiment_strategy(spec: ExperimentSpec, **updates) -> StrategyConfig:
    """Strategy config on the simulation's clock and (unless set) its user rate."""
    changes = {"rtt": spec.sim.rtt}
    if spec.id in EXPERIMENT_STRATEGY:
        changes["kind"] = EXPERIMENT_STRATEGY[spec.id]
    if "lambda_u_estimate" not in spec.strategy.model_fields_set:
        changes["lambda_u_estimate"] = spec.sim.user.lambda_u
    changes.update(updates)
    return spec.strategy.model_copy(update=changes)


def circuit_samples(
    sessions: Sequence[SessionTrace], task: Task, max_len: int
) -> list[FeatureVector]:
    samples = []
    for session in sessions:
        for circuit in session.circuits:
            label = task.label(circuit.purpose)
            if label is not None:
                samples.append(extract_features(to_adversary_view(circuit), max_len, label))
    return samples


def scenario_split(
    sessions: Sequence[SessionTrace], scenario: Scenario, rng: np.random.Generator
) -> tuple[list[SessionTrace], list[SessionTrace]]:
    if scenario.kind == ScenarioKind.MULTI_OPEN:
        train, test = split_open_world(sessions, rng)
        shared = {s.site_id for s in train} & {s.site_id for s in test}
        if shared:
            raise ValidationError(f"open-world split shares sites {sorted(shared)}")
        return train, test
    if scenario.kind == ScenarioKind.SINGLE_SITE:
        sessions = [s for s in sessions if s.site_id == scenario.site]
        if not sessions:
            raise NotFoundError(detail=f"no sessions for site {scenario.site}")
    return split_closed_world(sessions, rng)


def attack_rows(
    spec: ExperimentSpec,
    sessions: Sequence[SessionTrace],
    tasks: Sequence[Task],
    scenario: Scenario,
    rng: np.random.Generator,
    phi: Optional[float] = None,
    c: Optional[float] = None,
) -> list[ResultRow]:
    """Train and score every learned classifier on every task of one scenario."""
    train, test = scenario_split(sessions, scenario, rng)
    rows = []
    for task in tasks:
        train_set = circuit_samples(train, task, spec.attack.max_len)
        test_set = circuit_samples(test, task, spec.attack.max_len)
        if not train_set or not test_set:
            logger.warning(kv(event="empty_split", task=task.name, scenario=scenario))
            continue
        for kind in spec.attack.classifiers:
            if kind == ClassifierKind.BAYES:
                continue
            model = train_classifier(kind, train_set, spec.attack, spec.sim.seed)
            report = evaluate(
                model, test_set, [s.label for s in test_set], n_train=len(train_set)
            )
            logger.info(
                kv(experiment=spec.id.value, scenario=scenario, task=task.name, result=report)
            )
            rows.append(
                ResultRow.from_report(
                    report,
                    experiment=spec.id.value,
                    scenario=str(scenario),
                    task=task.name,
                    phi=phi,
                    c=c,
                    seed=spec.sim.seed,
                )
            )
    return rows


def run_circuit_experiment(spec: ExperimentSpec, jobs: int = 1) -> list[ResultRow]:
    """Experiments 1 to 4: one dataset, optionally defended, attacked per scenario."""
    sim = experiment_sim(spec)
    sessions: Sequence = simulate_dataset(sim, jobs)
    if spec.id in EXPERIMENT_STRATEGY:
        sessions = defend_dataset(sessions, experiment_strategy(spec), sim.seed, jobs)
    observed = [wire(s) for s in sessions]
    rows = []
    for i, scenario in enumerate(spec.scenarios):
        rng = substream(sim.seed, STREAM_SPLIT, i)
        rows += attack_rows(spec, observed, EXPERIMENT_TASKS[spec.id], scenario, rng)
    return rows


def grid_sizes(point: GridPoint, n_sessions: int, per_class: int) -> tuple[int, int]:
    """(clearnet, onion) session counts with at least per_class of the rarer class."""
    rarer = min(point.c, 1 - point.c)
    n = max(n_sessions, math.ceil(round(per_class / rarer, 6)) if rarer > 0 else per_class)
    n_clear = round(n * point.c)
    return n_clear, n - n_clear


def grid_point_rows(spec: ExperimentSpec, index: int, point: GridPoint, jobs: int = 1) -> list[ResultRow]:
    n_clear, n_onion = grid_sizes(point, spec.sim.n_sessions, spec.circuits_per_class)
    ordered = [ConnectionType.CLEARNET] * n_clear + [ConnectionType.ONION] * n_onion
    order = substream(spec.sim.seed, STREAM_SPLIT, 1000 + index).permutation(len(ordered))
    types = [ordered[i] for i in order]
    sim = spec.sim.model_copy(
        update={
            "n_sessions": n_clear + n_onion,
            "user": spec.sim.user.model_copy(update={"c": point.c}),
        }
    )
    strategy = experiment_strategy(spec, phi=point.phi)
    padded = defend_dataset(simulate_dataset(sim, jobs, types), strategy, sim.seed, jobs)
    observed = [p.as_session() for p in padded]
    task = PADDED_EXIT_VS_PADDED_REND

    counts = [count_triplets(session_views(s)) for s in observed]
    labels = [int(s.connection_type == ConnectionType.ONION) for s in observed]
    bayes = evaluate(BayesModel(point.phi, point.c), counts, labels)
    logger.info(kv(experiment=spec.id.value, phi=point.phi, c=point.c, result=bayes))
    rows = [
        ResultRow.from_report(
            bayes,
            experiment=spec.id.value,
            scenario="All",
            task=task.name,
            phi=point.phi,
            c=point.c,
            seed=spec.sim.seed,
        )
    ]
    for i, scenario in enumerate(spec.scenarios):
        rng = substream(spec.sim.seed, STREAM_SPLIT, 1000 * (index + 2) + i)
        rows += attack_rows(spec, observed, (task,), scenario, rng, point.phi, point.c)
    return rows


def _grid_point(args) -> list[ResultRow]:
    return grid_point_rows(*args)


def run_grid_experiment(spec: ExperimentSpec, jobs: int = 1) -> list[ResultRow]:
    """Experiment 5: PCP over a (phi, c) grid, Bayes on N plus learned classifiers."""
    points = list(enumerate(spec.grid))
    if jobs > 1 and len(points) > 1:
        with Pool(jobs) as pool:
            parts = pool.map(_grid_point, [(spec, i, p, 1) for i, p in points])
    else:
        parts = [grid_point_rows(spec, i, p, jobs) for i, p in points]
    return [row for part in parts for row in part]


def _game_trial(args) -> tuple[int, int]:
    spec, strategy, k, trial = args
    sim = spec.sim
    rng = substream(sim.seed, STREAM_GAME, trial)
    site = sim.sites[int(rng.integers(len(sim.sites)))]

    def trace(name: str, conn: ConnectionType) -> SessionTrace:
        session = simulate_session(sim, site, rng, f"g{trial:05d}-{name}", conn)
        if spec.game.defended:
            session = apply_strategy(session, strategy, rng).as_session()
        return session

    model = None
    if spec.game.learner == "tree":
        learning = []
        for j in range(k):
            conn = ConnectionType.CLEARNET if j % 2 == 0 else ConnectionType.ONION
            views = session_views(trace(f"l{j}", conn))
            learning.append(session_features(views, spec.attack.max_len, int(j % 2 == 1)))
        model = train_classifier(ClassifierKind.DECISION_TREE, learning, spec.attack, trial)

    b = int(rng.random() < 0.5)
    views = session_views(trace("c", ConnectionType.ONION if b else ConnectionType.CLEARNET))
    if model is not None:
        guess = int(model.predict([session_features(views, spec.attack.max_len)])[0])
    else:
        guess = int(bayes_predict(count_triplets(views), strategy.phi, 0.5) == ConnectionType.ONION)
    return b, guess


def play_game(
    spec: ExperimentSpec, k: Optional[int] = None, jobs: int = 1
) -> tuple[GameResult, list[tuple[int, int]]]:
    """Learning, challenge and response, repeated over spec.game.trials trials.

    Returns the summary and the (challenge bit, guess) pair of every trial.
    """
    k = spec.game.k if k is None else k
    if k < 1:
        raise ValidationError(f"the game needs at least one learning trace, got k={k}")
    if spec.game.trials < 1:
        raise ValidationError("the game needs at least one trial")
    strategy = experiment_strategy(spec)
    tasks = [(spec, strategy, k, trial) for trial in range(spec.game.trials)]
    if jobs > 1:
        with Pool(jobs) as pool:
            outcomes = pool.map(_game_trial, tasks)
    else:
        outcomes = [_game_trial(t) for t in tasks]

    wins = sum(b == guess for b, guess in outcomes)
    ci = binomtest(wins, spec.game.trials).proportion_ci(confidence_level=spec.game.confidence)
    bound = None
    if spec.game.defended and strategy.kind == StrategyKind.PCP:
        bound = optimal_accuracy(strategy.phi, 0.5)
    result = GameResult(
        trials=spec.game.trials,
        wins=wins,
        win_rate=wins / spec.game.trials,
        ci_low=float(ci.low),
        ci_high=float(ci.high),
        k=k,
        learner=spec.game.learner,
        bound=bound,
    )
    logger.info(kv(event="game", result=result))
    return result, outcomes


def security_game(spec: ExperimentSpec, k: Optional[int] = None, jobs: int = 1) -> GameResult:
    return play_game(spec, k, jobs)[0]


def game_rows(spec: ExperimentSpec, jobs: int = 1) -> list[ResultRow]:
    result, outcomes = play_game(spec, jobs=jobs)
    truths = [b for b, _ in outcomes]
    guesses = [g for _, g in outcomes]
    name = ClassifierKind.DECISION_TREE.value if spec.game.learner == "tree" else ClassifierKind.BAYES.value
    report = score(name, truths, guesses, n_train=result.k)
    strategy = experiment_strategy(spec)
    return [
        ResultRow.from_report(
            report,
            experiment=spec.id.value,
            scenario="Game",
            task="Challenge",
            phi=strategy.phi if spec.game.defended and strategy.kind == StrategyKind.PCP else None,
            c=0.5,
            seed=spec.sim.seed,
        )
    ]


def artifact_versions() -> dict[str, str]:
    versions = {"padlab": ARTIFACT_VERSION}
    for package in ("numpy", "scipy", "scikit-learn"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def config_hash(spec: ExperimentSpec) -> str:
    payload = spec.model_dump_json(exclude={"output_dir"})
    return hashlib.sha256(payload.encode()).hexdigest()


def make_run_id(digest: str, seed: int, versions: dict[str, str]) -> str:
    payload = json.dumps({"config": digest, "seed": seed, "versions": versions}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def check_output_dir(output_dir: Path, force: bool):
    existing = [n for n in (RESULTS_FILE, MANIFEST_FILE) if (output_dir / n).exists()]
    if existing and not force:
        raise AlreadyExistsError(
            detail=f"{output_dir} already holds {', '.join(existing)}; pass --force to overwrite",
            context=str(output_dir),
        )


def run_experiment(
    spec: ExperimentSpec,
    force: bool = False,
    jobs: int = 1,
    register: bool = True,
    engine=None,
) -> ExperimentRun:
    """Run one experiment end to end and write results.csv and manifest.json."""
    output_dir = Path(spec.output_dir)
    check_output_dir(output_dir, force)
    logger.info(kv(event="experiment", id=spec.id.value, seed=spec.sim.seed, out=output_dir))

    if spec.id == ExperimentId.GAME:
        rows = game_rows(spec, jobs)
    elif spec.id == ExperimentId.EXP5:
        rows = run_grid_experiment(spec, jobs)
    else:
        rows = run_circuit_experiment(spec, jobs)

    digest = config_hash(spec)
    versions = artifact_versions()
    run_id = make_run_id(digest, spec.sim.seed, versions)
    rows = [r.model_copy(update={"run_id": run_id}) for r in rows]

    written = [write_results(output_dir / RESULTS_FILE, rows)]
    if spec.id == ExperimentId.EXP5:
        curve = [
            row
            for point in spec.grid
            for row in curve_grid([point.phi], [point.c])
        ]
        written.append(write_curve(output_dir / ANALYTIC_FILE, curve))
    manifest = RunManifest(
        run_id=run_id,
        experiment=spec.id.value,
        seed=spec.sim.seed,
        config_hash=digest,
        versions=versions,
        files={p.name: sha256_file(p) for p in written},
    )
    write_manifest(output_dir / MANIFEST_FILE, manifest)

    if register:
        try:
            record_run(manifest, rows, str(output_dir), engine)
        except SQLAlchemyError as exc:
            logger.warning(kv(event="registry_unavailable", error=exc.__class__.__name__))
    return ExperimentRun(rows=rows, manifest=manifest, output_dir=output_dir)


def export_dataset(
    items: Sequence[Union[SessionTrace, PaddedSession]],
    fmt: ExportFormat,
    path: Path,
    run_id: str = "",
    task: Optional[Task] = None,
    max_len: int = 120,
) -> Path:
    """Serialize a dataset as a cell trace file or a per-circuit feature CSV."""
    if not items:
        raise ValidationError("cannot export an empty dataset")
    if fmt == ExportFormat.TRACE_JSONL:
        return write_traces(path, items, run_id)
    samples = circuit_samples([wire(i) for i in items], task or OTHER_VS_REND, max_len)
    return write_features(path, samples, max_len)

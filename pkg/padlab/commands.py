"""CLI command groups, registered on the root typer app by main.py."""

import logging
from pathlib import Path
from typing import Annotated, NamedTuple, Optional, Sequence

import typer
from rich.console import Console
from rich.table import Table

from .analytics import curve_grid
from .config import config_schema, load_config
from .database import list_runs, run_results
from .errors import AlreadyExistsError, NotFoundError
from .export import read_traces, write_curve, write_features
from .harness import (
    ANALYTIC_FILE,
    TASKS,
    ExportFormat,
    attack_rows,
    circuit_samples,
    experiment_sim,
    experiment_strategy,
    export_dataset,
    run_experiment,
    security_game,
)
from .log import kv
from .models import ExperimentId, ExperimentSpec, GameConfig, Scenario, ScenarioKind, StrategyKind
from .reports import RESULT_COLUMNS, ResultRow
from .strategies import defend_dataset
from .traffic import STREAM_SPLIT, simulate_dataset, substream

logger = logging.getLogger(__name__)
console = Console()

EXPERIMENT_ALIASES = {
    "exp1": ExperimentId.EXP1,
    "exp2": ExperimentId.EXP2,
    "exp3": ExperimentId.EXP3,
    "exp4": ExperimentId.EXP4,
    "exp5": ExperimentId.EXP5,
    "game": ExperimentId.GAME,
}
DEFAULT_PHIS = [0.25, 0.5, 1.0, 2.0, 4.0]
DEFAULT_CS = [0.5, 0.7, 0.9]


class CliContext(NamedTuple):
    """Global options, shared with every command through ctx.obj."""

    config: Optional[Path] = None
    seed: Optional[int] = None
    out: Optional[Path] = None
    force: bool = False
    jobs: int = 1


def resolve_experiment(name: str) -> ExperimentId:
    if name.lower() in EXPERIMENT_ALIASES:
        return EXPERIMENT_ALIASES[name.lower()]
    try:
        return ExperimentId(name)
    except ValueError:
        raise NotFoundError(
            detail=f"unknown experiment {name}; choose one of {', '.join(EXPERIMENT_ALIASES)}"
        )


def load_spec(ctx: typer.Context, experiment: Optional[ExperimentId] = None) -> ExperimentSpec:
    options: CliContext = ctx.obj or CliContext()
    overrides = {
        "sim.seed": options.seed,
        "experiment.output_dir": str(options.out) if options.out else None,
        "experiment.id": experiment.value if experiment else None,
    }
    return load_config(options.config, overrides).to_spec()


def guard(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise AlreadyExistsError(
            detail=f"{path} already exists; pass --force to overwrite", context=str(path)
        )
    return path


def results_table(rows: Sequence[ResultRow], title: str) -> Table:
    table = Table(title=title)
    columns = [c for c in RESULT_COLUMNS if c not in ("seed", "run_id")]
    for column in columns:
        table.add_column(column)
    for row in rows:
        values = dict(zip(RESULT_COLUMNS, row.csv_values()))
        table.add_row(*(values[c] for c in columns))
    return table


class Datasets:
    """simulate, defend and attack: the pipeline one stage at a time."""

    def __init__(self, app: typer.Typer):
        self.app = app
        self._add_commands()

    def _add_commands(self):
        self.app.command("simulate")(self.simulate)
        self.app.command("defend")(self.defend)
        self.app.command("attack")(self.attack)

    @staticmethod
    def simulate(
        ctx: typer.Context,
        name: Annotated[str, typer.Option(help="Trace file name inside --out")] = "traces.jsonl",
        sessions: Annotated[Optional[int], typer.Option(help="Number of sessions")] = None,
    ):
        """Generate a vanilla dataset and write it as a trace file."""
        spec = load_spec(ctx)
        sim = experiment_sim(spec)
        if sessions is not None:
            sim = sim.model_copy(update={"n_sessions": sessions})
        path = guard(Path(spec.output_dir) / name, ctx.obj.force)
        dataset = simulate_dataset(sim, ctx.obj.jobs)
        export_dataset(dataset, ExportFormat.TRACE_JSONL, path)
        console.print(f"wrote {len(dataset)} sessions to {path}")

    @staticmethod
    def defend(
        ctx: typer.Context,
        traces: Annotated[Path, typer.Argument(help="Trace file written by simulate")],
        strategy: Annotated[Optional[StrategyKind], typer.Option(help="Defense to apply")] = None,
        phi: Annotated[Optional[float], typer.Option(min=0, help="PCP dummy rate ratio")] = None,
        name: Annotated[str, typer.Option(help="Output file name inside --out")] = "defended.jsonl",
    ):
        """Apply a defense to every session of a trace file."""
        spec = load_spec(ctx)
        updates = {k: v for k, v in {"kind": strategy, "phi": phi}.items() if v is not None}
        config = experiment_strategy(spec, **updates)
        path = guard(Path(spec.output_dir) / name, ctx.obj.force)
        padded = defend_dataset(read_traces(traces), config, spec.sim.seed, ctx.obj.jobs)
        export_dataset(padded, ExportFormat.TRACE_JSONL, path)
        console.print(f"wrote {len(padded)} {config.kind.value} sessions to {path}")

    @staticmethod
    def attack(
        ctx: typer.Context,
        traces: Annotated[Path, typer.Argument(help="Trace file to attack")],
        task: Annotated[str, typer.Option(help=f"One of {', '.join(TASKS)}")] = "Other-vs-Rend",
        scenario: Annotated[ScenarioKind, typer.Option()] = ScenarioKind.MULTI_CLOSED,
        site: Annotated[Optional[str], typer.Option(help="Site id for SingleSite")] = None,
        features: Annotated[Optional[str], typer.Option(help="Also write a feature CSV")] = None,
    ):
        """Train and score the configured classifiers on one task."""
        if task not in TASKS:
            raise NotFoundError(detail=f"unknown task {task}; choose one of {', '.join(TASKS)}")
        spec = load_spec(ctx)
        sessions = read_traces(traces)
        if features:
            path = guard(Path(spec.output_dir) / features, ctx.obj.force)
            write_features(path, circuit_samples(sessions, TASKS[task], spec.attack.max_len), spec.attack.max_len)
        rows = attack_rows(
            spec,
            sessions,
            (TASKS[task],),
            Scenario(kind=scenario, site=site),
            substream(spec.sim.seed, STREAM_SPLIT),
        )
        console.print(results_table(rows, f"{task} on {traces.name}"))


class Experiments:
    """End-to-end experiments, the security game and analytic curves."""

    def __init__(self, app: typer.Typer):
        self.app = app
        self._add_commands()

    def _add_commands(self):
        self.app.command("experiment")(self.experiment)
        self.app.command("game")(self.game)
        self.app.command("analytic")(self.analytic)

    @staticmethod
    def experiment(
        ctx: typer.Context,
        experiment_id: Annotated[str, typer.Argument(help="exp1..exp5 or game")],
        register: Annotated[bool, typer.Option(help="Record the run in the registry")] = True,
    ):
        """Run one experiment and write results.csv and manifest.json."""
        spec = load_spec(ctx, resolve_experiment(experiment_id))
        run = run_experiment(spec, force=ctx.obj.force, jobs=ctx.obj.jobs, register=register)
        console.print(results_table(run.rows, spec.id.value))
        console.print(f"run {run.manifest.run_id} written to {run.output_dir}")

    @staticmethod
    def game(
        ctx: typer.Context,
        k: Annotated[Optional[int], typer.Option(min=1, help="Learning traces per trial")] = None,
        trials: Annotated[Optional[int], typer.Option(min=1)] = None,
        learner: Annotated[Optional[str], typer.Option(help="tree or bayes")] = None,
        defended: Annotated[Optional[bool], typer.Option("--defended/--vanilla")] = None,
    ):
        """Play the indistinguishability game and print the win rate."""
        spec = load_spec(ctx, ExperimentId.GAME)
        updates = {
            key: value
            for key, value in {"trials": trials, "learner": learner, "defended": defended}.items()
            if value is not None
        }
        if updates:
            game = GameConfig.model_validate({**spec.game.model_dump(), **updates})
            spec = spec.model_copy(update={"game": game})
        result = security_game(spec, k, ctx.obj.jobs)
        console.print_json(result.model_dump_json())

    @staticmethod
    def analytic(
        ctx: typer.Context,
        phi: Annotated[Optional[list[float]], typer.Option(help="Repeat for several values")] = None,
        c: Annotated[Optional[list[float]], typer.Option(help="Repeat for several values")] = None,
    ):
        """Write the closed-form accuracy and leakage curve."""
        spec = load_spec(ctx)
        rows = curve_grid(phi or DEFAULT_PHIS, c or DEFAULT_CS)
        path = guard(Path(spec.output_dir) / ANALYTIC_FILE, ctx.obj.force)
        write_curve(path, rows)
        table = Table(title="optimal accuracy")
        for column in ("phi", "c", "accuracy", "leakage"):
            table.add_column(column)
        for row in rows:
            table.add_row(*(f"{row[k]:.4f}" for k in ("phi", "c", "accuracy", "leakage")))
        console.print(table)
        logger.info(kv(event="analytic", path=path, rows=len(rows)))


class Registry:
    """Config schema and the run registry."""

    def __init__(self, app: typer.Typer):
        self.app = app
        self._add_commands()

    def _add_commands(self):
        self.app.command("schema")(self.schema)
        self.app.command("runs")(self.runs)

    @staticmethod
    def schema():
        """Print the JSON schema of the config file."""
        console.print_json(data=config_schema())

    @staticmethod
    def runs(run_id: Annotated[Optional[str], typer.Argument()] = None):
        """List registered runs, or the results of one run."""
        if run_id is None:
            table = Table(title="runs")
            for column in ("run_id", "experiment", "scenario", "seed", "rows", "output_dir"):
                table.add_column(column)
            for run in list_runs():
                table.add_row(
                    run.run_id[:12], run.experiment, run.scenario, str(run.seed),
                    str(run.n_rows), run.output_dir,
                )
            console.print(table)
            return
        records = run_results(run_id)
        if not records:
            raise NotFoundError(detail=f"no results registered for run {run_id}")
        rows = [ResultRow(**r.model_dump(exclude={"result_id"}), experiment="", seed=0) for r in records]
        console.print(results_table(rows, run_id))

import os
from pathlib import Path
from typing import Annotated, Optional

import typer

from padlab.commands import CliContext, Datasets, Experiments, Registry
from padlab.errors import register_exceptions
from padlab.log import configure_logging

DEFAULT_JOBS = int(os.environ.get("PADLAB_JOBS", "1"))

app = typer.Typer(
    name="padlab",
    help="""
padlab simulates client circuits of an anonymity network, applies padding defenses
(a per-circuit padding machine, a straw-man fake-circuit defense and preemptive
circuit padding) and measures how well circuit fingerprinting classifiers tell
onion-service connections from clearnet ones.

Every command reads the same YAML config (see `padlab schema`); --seed, --out and
--jobs override the config file.
""",
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)
Datasets(app)
Experiments(app)
Registry(app)


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[Optional[Path], typer.Option(help="YAML config file")] = None,
    seed: Annotated[Optional[int], typer.Option(min=0, max=2**64 - 1, help="Master seed")] = None,
    out: Annotated[Optional[Path], typer.Option(help="Output directory")] = None,
    force: Annotated[bool, typer.Option(help="Overwrite earlier results")] = False,
    jobs: Annotated[int, typer.Option(min=1, help="Worker processes")] = DEFAULT_JOBS,
    verbose: Annotated[int, typer.Option("--verbose", "-v", count=True)] = 0,
):
    if verbose:
        configure_logging("DEBUG" if verbose > 1 else "INFO")
    else:
        configure_logging()
    ctx.obj = CliContext(config=config, seed=seed, out=out, force=force, jobs=jobs)


cli = register_exceptions(app)

if __name__ == "__main__":
    cli()

"""Command line entry point: ``dedupstore <stage> --store DIR ...``.

Exit codes: 0 success, 1 invalid input, 2 I/O failure or missing prerequisite.
"""

from __future__ import annotations

import functools
import logging
from enum import Enum
from pathlib import Path
from typing import Optional

import typer

from ..errors import DedupStoreError, StoreError
from ..packing import PackingScheme, validate_scheme
from ..tensor import MAGNITUDE_QUANTILES
from . import pipeline
from .simulate import POLICIES

app = typer.Typer(add_completion=False, no_args_is_help=True, help="Deduplicated model weight store.")

Algo = Enum("Algo", {name: name for name in ("baseline", "greedy1", "greedy2", "two-stage")}, type=str)
Policy = Enum("Policy", {name: name for name in POLICIES}, type=str)
Magnitude = Enum("Magnitude", {name: name for name in MAGNITUDE_QUANTILES}, type=str)


class Format(str, Enum):
    text = "text"
    json = "json"


EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

StoreOpt = typer.Option(..., "--store", help="Store directory.")


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (StoreError, OSError) as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(EXIT_IO)
        except (DedupStoreError, ValueError) as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(EXIT_INVALID)

    return wrapper


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log progress to stderr.")):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(name)s: %(message)s")


@app.command()
@_guard
def ingest(
    spec: Path = typer.Option(..., "--spec", help="Model family spec (key=value)."),
    store: Path = StoreOpt,
):
    """Generate the model family described by SPEC and write its tensors."""
    fam = pipeline.ingest(spec, store)
    typer.echo(f"ingested {fam.num_models} models, {fam.num_layers} layers each")


@app.command()
@_guard
def dedup(
    store: Path = StoreOpt,
    threshold: float = typer.Option(0.035, help="Largest tolerated accuracy drop."),
    batch: int = typer.Option(5, help="Blocks between accuracy checks."),
    strict_rollback: bool = typer.Option(False, "--strict-rollback", help="Undo the batch that broke the guard."),
    bucket_width: Optional[float] = typer.Option(None, help="LSH bucket width; estimated when omitted."),
    magnitude: Magnitude = typer.Option("quartile", help="Block magnitude score."),
):
    """Index every model and map similar blocks onto shared representatives."""
    rows = pipeline.dedup(store, threshold, batch, strict_rollback, bucket_width, magnitude.value)
    for r in rows:
        typer.echo(
            f"model {r.model}: accuracy {r.baseline:.4f} -> {r.final:.4f}, "
            f"{r.deduplicated} deduplicated, {r.merged} merged{' (stopped)' if r.stopped else ''}"
        )


@app.command()
@_guard
def pack(
    store: Path = StoreOpt,
    algo: Algo = typer.Option("two-stage", help="Packing algorithm."),
    capacity: int = typer.Option(8, help="Blocks per page."),
):
    """Group distinct blocks into pages."""
    scheme = pipeline.pack(store, algo.value, capacity)
    typer.echo(f"{algo.value}: {scheme.num_bins} pages of up to {capacity} blocks")


@app.command()
@_guard
def materialize(store: Path = StoreOpt):
    """Write the packed pages and the manifest."""
    pages = pipeline.materialize(store)
    typer.echo(f"{pages.num_pages} pages, {len(pages.shared)} shared")


@app.command()
@_guard
def simulate(
    store: Path = StoreOpt,
    workload: Path = typer.Option(..., "--workload", help="Workload spec (key=value)."),
    policy: Optional[Policy] = typer.Option(None, help="Replacement policy; defaults to the workload's."),
    capacity_pages: Optional[int] = typer.Option(None, "--capacity-pages", help="Buffer pool frames."),
):
    """Replay a request workload against a buffer pool over the store's pages."""
    result = pipeline.simulate_stage(store, workload, policy.value if policy else None, capacity_pages)
    typer.echo(result.stats.dump(), nl=False)


@app.command()
@_guard
def report(
    store: Path = StoreOpt,
    format: Format = typer.Option(Format.text, "--format", help="Output format."),
    timing: bool = typer.Option(False, "--timing", help="Include stage timings."),
):
    """Summarise storage, accuracy and cache results."""
    typer.echo(pipeline.report(store, format.value, timing), nl=False)


@app.command()
@_guard
def audit(store: Path = StoreOpt):
    """Check page store invariants and the stored scheme."""
    pages = pipeline.open_pages(store)
    problems = pages.audit()
    scheme_path = store / "scheme.txt"
    if scheme_path.exists():
        scheme = PackingScheme.loads(scheme_path.read_text())
        tensors = pipeline.read_mappings(store / "mappings.txt")
        problems += validate_scheme(scheme, pipeline.ownership_from_mappings(tensors)).violations
    for p in problems:
        typer.echo(p)
    if problems:
        raise typer.Exit(EXIT_INVALID)
    typer.echo("ok")


if __name__ == "__main__":
    app()

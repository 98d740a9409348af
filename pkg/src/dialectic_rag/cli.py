"""The ``drag`` command line: index building, runs, annotation, reports."""

from __future__ import annotations

import sys
from contextlib import contextmanager
from pathlib import Path

import click

from .annotation_factory import AnnotationError
from .corpus_index import CorpusIndexError, build_index, load_corpus_file, save_index
from .dataset_io import DatasetError
from .llm_gateway import GatewayError, load_backend_spec
from .metrics import LanguageIdentifier
from .runner import (
    RunConfig,
    RunnerError,
    agreement_report,
    report,
    run,
    run_annotation,
)


@contextmanager
def _clean_errors():
    """Known failures become exit messages instead of tracebacks."""
    try:
        yield
    except (RunnerError, DatasetError, CorpusIndexError, GatewayError, AnnotationError) as exc:
        raise click.ClickException(str(exc)) from exc

_MODE_ALIASES = {"drag-decomposed": "drag_decomposed"}


def _parse_lid(value: str) -> LanguageIdentifier:
    if value == "builtin":
        return LanguageIdentifier()
    if value.startswith("cmd:"):
        return LanguageIdentifier(kind="external_command", command=value[4:])
    raise click.BadParameter("expected 'builtin' or 'cmd:<command>'")


def _parse_steps(value: str) -> frozenset[int]:
    if not value:
        return frozenset()
    try:
        return frozenset(int(part) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise click.BadParameter("expected a comma list of step numbers, e.g. 2,3") from exc


@click.group()
def main():
    """Dialectic retrieval-augmented generation toolkit."""


@main.group()
def index():
    """Corpus index commands."""


@index.command("build")
@click.option("--corpus", required=True, type=click.Path(exists=True), help="corpus JSONL file")
@click.option("--out", "out_path", required=True, type=click.Path(), help="index output file")
@click.option("--dim", type=int, default=None, help="embedding dimension (default: inferred)")
def index_build(corpus: str, out_path: str, dim: int | None):
    """Build a binary index from embedded corpus records."""
    docs = load_corpus_file(corpus)
    if not docs:
        raise click.ClickException(f"no documents in {corpus}")
    if dim is None:
        dim = len(docs[0].embedding)
    idx = build_index(docs, dim)
    save_index(idx, out_path)
    click.echo(f"indexed {len(docs)} documents (dim {dim}) -> {out_path}")


@main.command("run")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option(
    "--mode",
    required=True,
    type=click.Choice(["baseline", "rag", "drag", "drag-decomposed", "drag_decomposed"]),
)
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", type=click.Path(exists=True), default=None)
@click.option("--top-k", "top_k", type=int, default=5, show_default=True)
@click.option("--candidates", type=int, default=10, show_default=True)
@click.option(
    "--perturb", type=click.Choice(["none", "shuffle", "noise"]), default="none", show_default=True
)
@click.option("--pool", type=click.Path(exists=True), default=None, help="distractor pool JSONL")
@click.option("--ablate-steps", default="", help="comma list of steps to drop, e.g. 2,3")
@click.option("--arg-lang", default="en", show_default=True, help="argumentation language code")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--concurrency", type=int, default=4, show_default=True)
@click.option("--cache", "cache_path", type=click.Path(), default=None)
@click.option("--lid", default="builtin", show_default=True, help="builtin or cmd:<command>")
@click.option("--out", "out_path", required=True, type=click.Path())
def run_cmd(
    dataset, mode, backend_path, index_path, top_k, candidates, perturb, pool,
    ablate_steps, arg_lang, seed, concurrency, cache_path, lid, out_path,
):
    """Run inference over a dataset and write one result record per query."""
    config = RunConfig(
        mode=_MODE_ALIASES.get(mode, mode),
        dataset=dataset,
        backend=load_backend_spec(backend_path),
        out=out_path,
        index=index_path,
        cache=cache_path,
        top_k_final=top_k,
        top_k_candidates=candidates,
        perturbation=perturb,
        pool=pool,
        ablated_steps=_parse_steps(ablate_steps),
        argumentation_language=arg_lang,
        seed=seed,
        concurrency=concurrency,
        lid=_parse_lid(lid),
    )
    with _clean_errors():
        summary = run(config)
    click.echo(
        f"{summary.total} records ({summary.executed} executed, {summary.resumed} resumed, "
        f"{summary.errors} errors, {summary.cache_hits} cache hits) -> {summary.out}"
    )
    if summary.accuracy is not None:
        click.echo(f"accuracy: {100.0 * summary.accuracy:.1f}%")


@main.command("annotate")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--teacher", "teacher_path", required=True, type=click.Path(exists=True))
@click.option("--judge", "judge_path", required=True, type=click.Path(exists=True))
@click.option("--fraction", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--variant",
    type=click.Choice(["drag", "sft-baseline", "sft_baseline"]),
    default="drag",
    show_default=True,
)
@click.option("--cache", "cache_path", type=click.Path(), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def annotate_cmd(dataset, index_path, teacher_path, judge_path, fraction, seed, variant, cache_path, out_path):
    """Generate teacher demonstrations, filter them, and export a training corpus."""
    with _clean_errors():
        stats = run_annotation(
            dataset_path=dataset,
            index_path=index_path,
            teacher=load_backend_spec(teacher_path),
            judge=load_backend_spec(judge_path),
            out_path=out_path,
            variant=variant.replace("-", "_"),
            fraction=fraction,
            seed=seed,
            cache_path=cache_path,
        )
    click.echo(
        f"{stats['candidates']} candidates, {stats['stage1_kept']} past strict match, "
        f"{stats['stage2_kept']} past judge ({stats['judge_violations']} judge protocol "
        f"violations), {stats['written']} written -> {stats['out']}"
    )


@main.command("eval")
@click.option(
    "--results", "results_paths", required=True, multiple=True, type=click.Path(exists=True)
)
@click.option("--lid", default=None, help="recompute language checks: builtin or cmd:<command>")
@click.option("--force", is_flag=True, help="compare results files with different modes")
@click.option("--no-figures", is_flag=True, help="skip figure rendering")
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(results_paths, lid, force, no_figures, out_path):
    """Aggregate one or more results files into a report (with delta for two)."""
    with _clean_errors():
        payload = report(
            list(results_paths),
            out_path,
            force=force,
            lid=_parse_lid(lid) if lid else None,
            render_figures=not no_figures,
        )
    click.echo(Path(out_path).with_suffix(".txt").read_text(encoding="utf-8"), nl=False)
    if "delta" in payload:
        click.echo(f"delta overall accuracy: {100.0 * payload['delta']['overall']['accuracy']:+.1f} points")


@main.command("agreement")
@click.option("--en", "en_path", required=True, type=click.Path(exists=True))
@click.option("--x", "x_path", required=True, type=click.Path(exists=True))
@click.option("--y", "y_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def agreement_cmd(en_path, x_path, y_path, dataset, out_path):
    """Controller-agreement rates over grouped disputed-territory results."""
    with _clean_errors():
        payload = agreement_report(en_path, x_path, y_path, dataset, out_path)
    click.echo(
        f"groups: {payload['groups']}  agreement en: {payload['display']['pct_en']}%  "
        f"agreement x,y,en: {payload['display']['pct_xyen']}%"
    )


if __name__ == "__main__":
    sys.exit(main())

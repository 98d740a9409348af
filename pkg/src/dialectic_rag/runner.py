"""Experiment orchestration: retrieve, perturb, prompt, generate, parse, score.

A run walks a dataset and appends one JSON-line result record per query. The
record carries everything needed to recompute metrics offline (gold answers,
controller, the raw output, parse outcome, match flags), so reports are
re-derivable from results files alone. Two fields, latency_ms and cache_hit,
are volatile runtime telemetry; the canonical portion of a results file
excludes them, and identical (dataset, index, config, scripted backend)
always reproduces it byte for byte.

Per-query failures are recorded in the record's status field and never abort
the run: multi-thousand-query runs against remote APIs must survive transient
faults. An interrupt, by contrast, stops the run; a rerun scans the existing
output and executes only the queries that are not there yet.

Generation runs on a bounded thread pool; records are buffered and the final
file is rewritten sorted by query id, so the concurrency level never changes
the output bytes.
"""

from __future__ import annotations

import json
import os
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import figures
from .corpus_index import CorpusIndex, load_corpus_file, load_index, retrieve
from .dataset_io import QueryRecord, group_borderlines, load_dataset
from .dialectic_parser import EmptyOutput, extract_final_answer, parse_trace_lenient
from .llm_gateway import (
    BackendSpec,
    ResponseCache,
    cached_generate,
    embed,
    request_fingerprint,
)
from .metrics import (
    LanguageIdentifier,
    ScoredRecord,
    UnidentifiableText,
    aggregate,
    borderlines_agreement,
    correct_language,
    flexible_em,
    round_pct,
    strict_em,
)
from .perturbation import inject_noise, seed_for_query, shuffle_docs
from .prompt_factory import (
    PromptVariation,
    TemplateSet,
    default_templates,
    render_baseline,
    render_drag,
    render_drag_step,
    render_rag,
)

MODES = ("baseline", "rag", "drag", "drag_decomposed")
PERTURBATIONS = ("none", "shuffle", "noise")
NOISE_DOCS = 2  # distractors injected per query in noise mode

# Runtime telemetry; excluded from the canonical portion of a results file.
VOLATILE_FIELDS = ("latency_ms", "cache_hit")


class RunnerError(Exception):
    pass


class ConfigInvalid(RunnerError):
    pass


class SchemaMismatch(RunnerError):
    pass


class GroupCoverageMismatch(RunnerError):
    def __init__(self, group_id: str, missing: str):
        super().__init__(f"group {group_id!r}: no result for its {missing} member")
        self.group_id = group_id


@dataclass
class RunConfig:
    mode: str
    dataset: str | Path
    backend: BackendSpec
    out: str | Path
    index: str | Path | None = None
    cache: str | Path | None = None  # defaults next to the output file
    top_k_final: int = 5
    top_k_candidates: int = 10
    perturbation: str = "none"
    pool: str | Path | None = None
    ablated_steps: frozenset[int] = frozenset()
    argumentation_language: str = "en"
    seed: int = 0
    concurrency: int = 4
    lid: LanguageIdentifier = field(default_factory=LanguageIdentifier)
    templates: TemplateSet | None = None


@dataclass
class RunSummary:
    out: Path
    total: int
    executed: int
    resumed: int
    errors: int
    cache_hits: int
    accuracy: float | None


def validate_config(config: RunConfig) -> None:
    if config.mode not in MODES:
        raise ConfigInvalid(f"unknown mode {config.mode!r}")
    if config.perturbation not in PERTURBATIONS:
        raise ConfigInvalid(f"unknown perturbation {config.perturbation!r}")
    if config.mode != "baseline" and config.index is None:
        raise ConfigInvalid(f"mode {config.mode!r} requires an index")
    if config.mode == "baseline" and config.perturbation != "none":
        raise ConfigInvalid("baseline mode retrieves nothing to perturb")
    if config.ablated_steps and config.mode != "drag":
        raise ConfigInvalid("step ablation applies to drag mode only")
    if config.argumentation_language != "en" and config.mode not in ("drag", "drag_decomposed"):
        raise ConfigInvalid("argumentation language applies to drag modes only")
    if not 1 <= config.top_k_final <= config.top_k_candidates:
        raise ConfigInvalid(
            f"need 1 <= top_k_final ({config.top_k_final}) <= top_k_candidates ({config.top_k_candidates})"
        )
    if config.concurrency < 1:
        raise ConfigInvalid("concurrency must be >= 1")


def _scan_existing(path: Path) -> dict[str, dict]:
    """Records already in the output file (a truncated final line is ignored)."""
    done: dict[str, dict] = {}
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                continue  # interrupted mid-write
            raise SchemaMismatch(f"{path}: line {i + 1} is not valid JSON")
        done[obj["query_id"]] = obj
    return done


def _auto_noise_pool(
    queries: list[QueryRecord], index: CorpusIndex, backend: BackendSpec
) -> dict[str, list]:
    """Default distractor pool: each query's top-1 document, keyed by query id.

    Built over the whole dataset (not just pending queries) so resumed and
    uninterrupted runs agree.
    """
    top1: dict[str, list] = {}
    for query in queries:
        vec = embed(backend, [query.question])[0]
        hits = retrieve(index, vec, k_candidates=1, k_final=1)
        top1[query.id] = [h.document for h in hits]
    return top1


@dataclass
class _RunContext:
    config: RunConfig
    index: CorpusIndex | None
    cache: ResponseCache
    templates: TemplateSet
    pool_docs: list | None  # explicit pool file contents
    top1_by_query: dict[str, list] | None  # auto pool


def _docs_for_query(ctx: _RunContext, query: QueryRecord) -> tuple[list, list]:
    """Returns (retrieved hits, docs after perturbation)."""
    config = ctx.config
    if config.mode == "baseline":
        return [], []
    assert ctx.index is not None
    vec = embed(config.backend, [query.question])[0]
    hits = retrieve(
        ctx.index, vec, k_candidates=config.top_k_candidates, k_final=config.top_k_final
    )
    docs = [h.document for h in hits]
    qseed = seed_for_query(config.seed, query.id)
    if config.perturbation == "shuffle":
        docs = shuffle_docs(docs, qseed)
    elif config.perturbation == "noise":
        if ctx.pool_docs is not None:
            pool = ctx.pool_docs
        else:
            assert ctx.top1_by_query is not None
            own = {d.doc_id for d in docs}
            pool, seen = [], set()
            for other in ctx.top1_by_query:
                if other == query.id:
                    continue
                for doc in ctx.top1_by_query[other]:
                    if doc.doc_id not in own and doc.doc_id not in seen:
                        pool.append(doc)
                        seen.add(doc.doc_id)
        docs = inject_noise(docs, pool, n=NOISE_DOCS, seed=qseed)
    return hits, docs


def _generate_single(ctx: _RunContext, query: QueryRecord, docs: list) -> tuple[str, str, bool]:
    """Returns (raw output, prompt fingerprint, cache_hit)."""
    config = ctx.config
    if config.mode == "baseline":
        bundle = render_baseline(query, templates=ctx.templates)
    elif config.mode == "rag":
        bundle = render_rag(query, docs, templates=ctx.templates)
    else:
        variation = PromptVariation(
            ablated_steps=config.ablated_steps,
            argumentation_language=config.argumentation_language,
        )
        bundle = render_drag(query, docs, variation=variation, templates=ctx.templates)
    fingerprint = request_fingerprint(
        config.backend.model_name, list(bundle.messages), config.backend.params
    )
    raw, hit = cached_generate(
        ctx.cache, config.backend, list(bundle.messages), config.backend.params, script_key=query.id
    )
    return raw, fingerprint, hit


def _generate_decomposed(
    ctx: _RunContext, query: QueryRecord, docs: list
) -> tuple[list[str], str, bool]:
    """Four chained step calls. Returns (step outputs, fingerprint of step 1, all_hits)."""
    config = ctx.config
    variation = PromptVariation(argumentation_language=config.argumentation_language)
    outputs: list[str] = []
    fingerprint = ""
    all_hits = True
    for step in (1, 2, 3, 4):
        bundle = render_drag_step(
            query, docs, step, outputs.copy(), variation=variation, templates=ctx.templates
        )
        if step == 1:
            fingerprint = request_fingerprint(
                config.backend.model_name, list(bundle.messages), config.backend.params
            )
        raw, hit = cached_generate(
            ctx.cache,
            config.backend,
            list(bundle.messages),
            config.backend.params,
            script_key=f"{query.id}:step{step}",
        )
        all_hits = all_hits and hit
        outputs.append(raw)
    return outputs, fingerprint, all_hits


def _score_answer(
    config: RunConfig, query: QueryRecord, answer: str
) -> tuple[bool | None, bool | None, bool | None]:
    flexible = strict = None
    if query.gold_answers:
        flexible = flexible_em(answer, query.gold_answers) if answer else False
        strict = strict_em(answer, query.gold_answers) if answer else False
    language_ok = None
    if answer:
        try:
            language_ok = correct_language(answer, query.lang, config.lid)
        except UnidentifiableText:
            language_ok = None
    return flexible, strict, language_ok


def _process_query(ctx: _RunContext, query: QueryRecord) -> dict:
    config = ctx.config
    started = time.perf_counter()
    record: dict = {
        "query_id": query.id,
        "lang": query.lang,
        "mode": config.mode,
        "group_id": query.group_id,
        "controller": query.controller,
        "gold_answers": list(query.gold_answers),
        "perturbation": {
            "kind": config.perturbation,
            "seed": seed_for_query(config.seed, query.id),
        },
        "ablated_steps": sorted(config.ablated_steps),
        "argumentation_language": config.argumentation_language,
        "status": "ok",
    }
    try:
        hits, docs = _docs_for_query(ctx, query)
        record["retrieved"] = [[h.document.doc_id, h.score] for h in hits]
        if config.mode == "drag_decomposed":
            step_outputs, fingerprint, cache_hit = _generate_decomposed(ctx, query, docs)
            raw = "\n".join(step_outputs)
            record["step_outputs"] = step_outputs
        else:
            raw, fingerprint, cache_hit = _generate_single(ctx, query, docs)
        record["prompt_fingerprint"] = fingerprint
        record["raw_output"] = raw
        record["cache_hit"] = cache_hit

        if config.mode in ("drag", "drag_decomposed"):
            trace, report = parse_trace_lenient(raw, n_docs=len(docs) or None)
            record["sections_found"] = sorted(report.sections_found)
            record["citations"] = list(report.citations)
            record["if_pass"] = report.if_pass
            record["verdicts"] = [[v.doc_index, v.relevance] for v in trace.verdicts]
        else:
            record["sections_found"] = []
            record["citations"] = []
            record["if_pass"] = None
            record["verdicts"] = []

        try:
            answer = extract_final_answer(raw)
        except EmptyOutput:
            answer = ""
        record["final_answer"] = answer
        flexible, strict, language_ok = _score_answer(config, query, answer)
        record["flexible_match"] = flexible
        record["strict_match"] = strict
        record["language_ok"] = language_ok
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        record["status"] = f"error:{type(exc).__name__}"
        record.setdefault("retrieved", [])
        record.setdefault("prompt_fingerprint", "")
        record.setdefault("raw_output", "")
        record.setdefault("cache_hit", False)
        record.setdefault("sections_found", [])
        record.setdefault("citations", [])
        record.setdefault("if_pass", None)
        record.setdefault("verdicts", [])
        record.setdefault("final_answer", "")
        record.setdefault("flexible_match", None)
        record.setdefault("strict_match", None)
        record.setdefault("language_ok", None)
    record["latency_ms"] = round((time.perf_counter() - started) * 1000.0, 3)
    return record


def _record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def run(config: RunConfig) -> RunSummary:
    """Execute (or resume) a run; the results file ends up sorted by query id."""
    validate_config(config)
    queries = load_dataset(config.dataset)
    # baseline mode ignores corpus settings entirely
    index = (
        load_index(config.index)
        if config.index is not None and config.mode != "baseline"
        else None
    )
    out_path = Path(config.out)
    cache_path = Path(config.cache) if config.cache else out_path.with_suffix(".cache.jsonl")
    cache = ResponseCache(cache_path)
    templates = config.templates or default_templates()

    pool_docs = None
    top1 = None
    if config.perturbation == "noise":
        if config.pool is not None:
            pool_docs = load_corpus_file(config.pool)
        else:
            assert index is not None
            top1 = _auto_noise_pool(queries, index, config.backend)

    ctx = _RunContext(
        config=config,
        index=index,
        cache=cache,
        templates=templates,
        pool_docs=pool_docs,
        top1_by_query=top1,
    )

    done = _scan_existing(out_path)
    pending = [q for q in queries if q.id not in done]
    write_lock = threading.Lock()

    def append(record: dict) -> None:
        with write_lock:
            with open(out_path, "a", encoding="utf-8") as f:
                f.write(_record_line(record) + "\n")
            done[record["query_id"]] = record

    executed = 0
    interrupted: BaseException | None = None
    if config.concurrency == 1:
        try:
            for query in pending:
                append(_process_query(ctx, query))
                executed += 1
        except KeyboardInterrupt as exc:
            interrupted = exc
    else:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = {pool.submit(_process_query, ctx, q): q for q in pending}
            remaining = set(futures)
            try:
                while remaining:
                    finished, remaining = wait(remaining, return_when=FIRST_COMPLETED)
                    for fut in finished:
                        append(fut.result())
                        executed += 1
            except KeyboardInterrupt as exc:
                interrupted = exc
                for fut in remaining:
                    fut.cancel()
    if interrupted is not None:
        raise interrupted

    # Finalize: full rewrite, sorted by query id, atomic swap.
    records = [done[q.id] for q in sorted(queries, key=lambda q: q.id) if q.id in done]
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for record in records:
            f.write(_record_line(record) + "\n")
    os.replace(tmp, out_path)

    scoreable = [r for r in records if r.get("flexible_match") is not None]
    accuracy = (
        sum(bool(r["flexible_match"]) for r in scoreable) / len(scoreable) if scoreable else None
    )
    return RunSummary(
        out=out_path,
        total=len(records),
        executed=executed,
        resumed=len(records) - executed,
        errors=sum(1 for r in records if r["status"] != "ok"),
        cache_hits=sum(1 for r in records if r.get("cache_hit")),
        accuracy=accuracy,
    )


def run_decomposed(config: RunConfig) -> RunSummary:
    """Step-at-a-time variant of :func:`run`."""
    if config.mode != "drag_decomposed":
        config = replace(config, mode="drag_decomposed")
    return run(config)


def load_results(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaMismatch(f"{path}: line {line_no}: {exc.msg}") from exc
    return records


def canonical_results_bytes(path: str | Path) -> bytes:
    """The results file minus volatile telemetry, for byte-level comparison."""
    lines = []
    for record in load_results(path):
        for key in VOLATILE_FIELDS:
            record.pop(key, None)
        lines.append(_record_line(record))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _scored_records(records: list[dict], lid: LanguageIdentifier | None = None) -> list[ScoredRecord]:
    scored = []
    for r in records:
        if r.get("flexible_match") is None:
            continue
        language_ok = r.get("language_ok")
        if lid is not None and r.get("final_answer"):
            try:
                language_ok = correct_language(r["final_answer"], r["lang"], lid)
            except UnidentifiableText:
                language_ok = None
        scored.append(
            ScoredRecord(
                query_id=r["query_id"],
                lang=r["lang"],
                answer_text=r.get("final_answer", ""),
                gold_answers=tuple(r.get("gold_answers", [])),
                flexible_match=bool(r["flexible_match"]),
                strict_match=bool(r.get("strict_match")),
                controller=r.get("controller"),
                language_ok=language_ok,
                if_pass=r.get("if_pass"),
            )
        )
    return scored


def report(
    results_paths: list[str | Path],
    out_path: str | Path,
    force: bool = False,
    lid: LanguageIdentifier | None = None,
    render_figures: bool = True,
    templates: TemplateSet | None = None,
) -> dict:
    """Per-language metric tables; with two runs, a delta table (run2 - run1).

    Writes the machine-readable report to ``out_path`` plus, alongside it, an
    aligned text table (.txt), the per-language rows as tab-separated values
    (.tsv), and accuracy/delta figures (.png).
    """
    if not results_paths:
        raise RunnerError("no results files given")
    out_path = Path(out_path)
    loaded = [(Path(p), load_results(p)) for p in results_paths]
    for path, records in loaded:
        if not records:
            raise SchemaMismatch(f"{path}: empty results file")
    modes = [{r["mode"] for r in records} for _, records in loaded]
    flat = {m for ms in modes for m in ms}
    if len(flat) > 1 and not force:
        raise SchemaMismatch(f"mixed run modes {sorted(flat)}; pass force to compare anyway")

    entries = []
    tables = []
    for path, records in loaded:
        table = aggregate(_scored_records(records, lid))
        tables.append(table)
        entries.append(
            {
                "file": str(path),
                "records": len(records),
                "unscored": sum(1 for r in records if r.get("flexible_match") is None),
                "errors": sum(1 for r in records if r.get("status") != "ok"),
                "mode": sorted({r["mode"] for r in records}),
                # effective run settings, recovered from the records themselves
                "config": {
                    "perturbation": sorted({r["perturbation"]["kind"] for r in records if "perturbation" in r}),
                    "ablated_steps": sorted({tuple(r.get("ablated_steps", [])) for r in records}),
                    "argumentation_language": sorted({r.get("argumentation_language", "en") for r in records}),
                },
                "metrics": table.to_json_obj(),
            }
        )

    payload: dict = {
        "files": entries,
        "template_checksums": (templates or default_templates()).checksums(),
    }

    text_blocks = []
    for entry, table in zip(entries, tables):
        text_blocks.append(f"== {entry['file']} ==\n{table.format_text()}")

    if len(tables) == 2:
        first, second = tables
        delta: dict[str, dict[str, float | None]] = {}
        langs = sorted(set(first.per_lang) | set(second.per_lang))
        for lang in langs:
            a, b = first.per_lang.get(lang), second.per_lang.get(lang)
            if a is None or b is None:
                delta[lang] = {"accuracy": None, "if_rate": None, "cl_rate": None}
                continue
            delta[lang] = {
                "accuracy": b.accuracy - a.accuracy,
                "if_rate": (b.if_rate - a.if_rate)
                if a.if_rate is not None and b.if_rate is not None
                else None,
                "cl_rate": (b.cl_rate - a.cl_rate)
                if a.cl_rate is not None and b.cl_rate is not None
                else None,
            }
        delta["overall"] = {
            "accuracy": second.overall.accuracy - first.overall.accuracy,
            "if_rate": (second.overall.if_rate - first.overall.if_rate)
            if first.overall.if_rate is not None and second.overall.if_rate is not None
            else None,
            "cl_rate": (second.overall.cl_rate - first.overall.cl_rate)
            if first.overall.cl_rate is not None and second.overall.cl_rate is not None
            else None,
        }
        payload["delta"] = delta
        rows = [f"{'lang':<8}{'Δacc%':>10}"]
        for lang, d in delta.items():
            acc = d["accuracy"]
            rows.append(f"{lang:<8}{round_pct(acc) if acc is not None else '-':>10}")
        text_blocks.append("== delta (run2 - run1) ==\n" + "\n".join(rows))

    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")

    text = "\n\n".join(text_blocks) + "\n"
    out_path.with_suffix(".txt").write_text(text, encoding="utf-8")

    tsv_rows = ["file\tlang\tcount\taccuracy\tif_rate\tcl_rate"]
    for entry, table in zip(entries, tables):
        for lang in sorted(table.per_lang):
            m = table.per_lang[lang]
            tsv_rows.append(
                f"{entry['file']}\t{lang}\t{m.count}\t{m.accuracy!r}\t{m.if_rate!r}\t{m.cl_rate!r}"
            )
        m = table.overall
        tsv_rows.append(
            f"{entry['file']}\tall\t{m.count}\t{m.accuracy!r}\t{m.if_rate!r}\t{m.cl_rate!r}"
        )
    out_path.with_suffix(".tsv").write_text("\n".join(tsv_rows) + "\n", encoding="utf-8")

    if render_figures:
        labels = [Path(e["file"]).stem for e in entries]
        figures.accuracy_by_language(
            labels, tables, out_path.with_name(out_path.stem + "_accuracy.png")
        )
        if "delta" in payload:
            figures.delta_by_language(
                payload["delta"], out_path.with_name(out_path.stem + "_delta.png")
            )
    return payload


def run_annotation(
    dataset_path: str | Path,
    index_path: str | Path,
    teacher: BackendSpec,
    judge: BackendSpec,
    out_path: str | Path,
    variant: str = "drag",
    fraction: float = 1.0,
    seed: int = 0,
    top_k_final: int = 5,
    top_k_candidates: int = 10,
    cache_path: str | Path | None = None,
    templates: TemplateSet | None = None,
) -> dict:
    """Retrieve, generate with the teacher, filter twice, export the corpus."""
    from .annotation_factory import annotate_queries, export_corpus

    queries = load_dataset(dataset_path)
    index = load_index(index_path)
    out_path = Path(out_path)
    cache = ResponseCache(
        Path(cache_path) if cache_path else out_path.with_suffix(".cache.jsonl")
    )

    docs_cache: dict[str, list] = {}

    def docs_for(query: QueryRecord) -> list:
        if query.id not in docs_cache:
            vec = embed(teacher, [query.question])[0]
            hits = retrieve(index, vec, k_candidates=top_k_candidates, k_final=top_k_final)
            docs_cache[query.id] = [h.document for h in hits]
        return docs_cache[query.id]

    demos, stats = annotate_queries(queries, docs_for, teacher, judge, cache, templates=templates)
    written = export_corpus(
        demos, variant, out_path, fraction=fraction, seed=seed, templates=templates
    )
    return {
        "candidates": stats.candidates,
        "stage1_kept": stats.stage1_kept,
        "stage2_kept": stats.stage2_kept,
        "judge_violations": stats.judge_violations,
        "written": written,
        "out": str(out_path),
    }


def agreement_report(
    results_en: str | Path,
    results_x: str | Path,
    results_y: str | Path,
    dataset_path: str | Path,
    out_path: str | Path,
) -> dict:
    """Controller-agreement rates over grouped disputed-territory questions."""
    groups = group_borderlines(load_dataset(dataset_path))
    if not groups:
        raise RunnerError("dataset has no grouped records")
    answer_maps = []
    for path in (results_en, results_x, results_y):
        answer_maps.append({r["query_id"]: r.get("final_answer", "") for r in load_results(path)})
    with_answers = []
    for group in groups:
        members = (group.english, group.lang_x, group.lang_y)
        names = ("english", "lang_x", "lang_y")
        answers = []
        for member, name, amap in zip(members, names, answer_maps):
            if member.id not in amap:
                raise GroupCoverageMismatch(group.group_id, name)
            answers.append(amap[member.id])
        with_answers.append((group, tuple(answers)))
    pct_en, pct_xyen = borderlines_agreement(with_answers)
    payload = {
        "groups": len(groups),
        "pct_en": pct_en,
        "pct_xyen": pct_xyen,
        "display": {"pct_en": round_pct(pct_en / 100.0), "pct_xyen": round_pct(pct_xyen / 100.0)},
    }
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    out_path.with_suffix(".txt").write_text(
        f"groups: {len(groups)}\n"
        f"agreement (English): {payload['display']['pct_en']}%\n"
        f"agreement (X, Y, En): {payload['display']['pct_xyen']}%\n",
        encoding="utf-8",
    )
    return payload

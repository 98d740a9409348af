"""Generate, filter, and export dialectic training demonstrations.

A teacher backend answers each annotation query with the four-stage prompt;
candidates then pass two gates. Stage 1 is deterministic and free: the final
answer must strictly match a gold answer *and* the output must be structurally
valid (all four sections, ordered, cited), so no judge tokens are spent on
candidates that already fail the format. Stage 2 asks a judge backend for a
binary verdict; only a bare "1" keeps the candidate, a bare "0" drops it, and
anything else is a protocol violation (dropped and counted, never retried).

Surviving demonstrations export as JSON lines of prompt/target pairs, the
handoff artifact for an external fine-tuning stack. The ``drag`` variant
trains on the full reasoning trace; ``sft_baseline`` pairs the plain
retrieval prompt with the gold answer alone, for like-for-like comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus_index import DocumentRecord
from .dataset_io import QueryRecord
from .dialectic_parser import DialecticTrace, ParseReport, parse_trace_lenient
from .llm_gateway import BackendSpec, ResponseCache, cached_generate
from .metrics import normalize_answer, strict_em
from .perturbation import shuffle_docs
from .prompt_factory import PromptVariation, TemplateSet, render_drag, render_judge, render_rag

VARIANTS = ("drag", "sft_baseline")


class AnnotationError(Exception):
    pass


class JudgeProtocolViolation(AnnotationError):
    def __init__(self, query_id: str, response: str):
        super().__init__(f"judge for {query_id!r} answered {response!r}, expected '0' or '1'")
        self.query_id = query_id
        self.response = response


class EmptyAfterSampling(AnnotationError):
    pass


@dataclass
class Candidate:
    query: QueryRecord
    documents: list[DocumentRecord]
    raw: str
    trace: DialecticTrace
    report: ParseReport
    prompt_text: str


@dataclass
class Demonstration:
    query: QueryRecord
    documents: list[DocumentRecord]
    trace: DialecticTrace
    target: str
    training_text: str
    provenance: dict = field(default_factory=dict)


@dataclass
class SftCorpus:
    entries: list[Demonstration]
    variant: str
    language_histogram: dict[str, int]


def generate_candidate(
    teacher: BackendSpec,
    query: QueryRecord,
    docs: list[DocumentRecord],
    cache: ResponseCache,
    variation: PromptVariation | None = None,
    templates: TemplateSet | None = None,
) -> Candidate:
    """One cached teacher call; output parsed leniently (failures kept for filtering)."""
    bundle = render_drag(query, docs, variation=variation, templates=templates)
    raw, _ = cached_generate(
        cache, teacher, list(bundle.messages), teacher.params, script_key=query.id
    )
    trace, report = parse_trace_lenient(raw, n_docs=len(docs))
    return Candidate(
        query=query,
        documents=list(docs),
        raw=raw,
        trace=trace,
        report=report,
        prompt_text=bundle.text,
    )


def matched_gold(candidate: Candidate) -> str | None:
    """The gold answer the candidate's final answer strictly matches, if any."""
    norm = normalize_answer(candidate.trace.answer)
    for gold in candidate.query.gold_answers:
        if normalize_answer(gold) == norm:
            return gold
    return None


def filter_stage1(candidate: Candidate) -> bool:
    """Strict exact match on the final answer, plus structural validity."""
    if not candidate.query.gold_answers:
        return False
    return candidate.report.if_pass and strict_em(
        candidate.trace.answer, candidate.query.gold_answers
    )


def filter_stage2(
    candidate: Candidate,
    judge: BackendSpec,
    cache: ResponseCache,
    templates: TemplateSet | None = None,
) -> bool:
    """Binary judge verdict: keep on "1", drop on "0", anything else violates protocol."""
    target = matched_gold(candidate) or (
        candidate.query.gold_answers[0] if candidate.query.gold_answers else ""
    )
    bundle = render_judge(
        response=candidate.raw,
        target=target,
        instructions_text=candidate.prompt_text,
        templates=templates,
    )
    verdict, _ = cached_generate(
        cache, judge, list(bundle.messages), judge.params, script_key=f"{candidate.query.id}:judge"
    )
    verdict = verdict.strip()
    if verdict == "1":
        return True
    if verdict == "0":
        return False
    raise JudgeProtocolViolation(candidate.query.id, verdict)


def build_demonstration(candidate: Candidate, teacher: str, judge: str) -> Demonstration:
    target = matched_gold(candidate)
    if target is None:
        raise AnnotationError(f"candidate {candidate.query.id!r} does not match any gold answer")
    return Demonstration(
        query=candidate.query,
        documents=candidate.documents,
        trace=candidate.trace,
        target=target,
        training_text=candidate.raw,
        provenance={"teacher": teacher, "judge": judge, "stage1": True, "stage2": True},
    )


def build_corpus(entries: list[Demonstration], variant: str) -> SftCorpus:
    if variant not in VARIANTS:
        raise ValueError(f"unknown corpus variant {variant!r}")
    histogram: dict[str, int] = {}
    for demo in entries:
        histogram[demo.query.lang] = histogram.get(demo.query.lang, 0) + 1
    return SftCorpus(entries=list(entries), variant=variant, language_histogram=histogram)


def export_corpus(
    demos: list[Demonstration],
    variant: str,
    path: str | Path,
    fraction: float = 1.0,
    seed: int = 0,
    templates: TemplateSet | None = None,
) -> int:
    """Write the (sub)sampled corpus as JSON lines; returns the count written.

    fraction < 1 keeps floor(fraction * n) demonstrations, picked by a seeded
    shuffle without replacement, so the same (demos, fraction, seed) always
    writes the same file. Output is sorted by query id.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown corpus variant {variant!r}")
    if not demos:
        raise EmptyAfterSampling("no demonstrations to export")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    selected = list(demos)
    if fraction < 1.0:
        keep = int(fraction * len(demos))
        if keep == 0:
            raise EmptyAfterSampling(f"fraction {fraction} of {len(demos)} demos keeps none")
        selected = shuffle_docs(selected, seed)[:keep]
    selected.sort(key=lambda d: d.query.id)

    with open(path, "w", encoding="utf-8") as f:
        for demo in selected:
            if variant == "drag":
                prompt_text = render_drag(demo.query, demo.documents, templates=templates).text
                training_text = demo.training_text
            else:
                prompt_text = render_rag(demo.query, demo.documents, templates=templates).text
                training_text = demo.target
            f.write(
                json.dumps(
                    {
                        "prompt_text": prompt_text,
                        "training_text": training_text,
                        "query_id": demo.query.id,
                        "lang": demo.query.lang,
                        "teacher": demo.provenance.get("teacher", ""),
                        "judge": demo.provenance.get("judge", ""),
                        "variant": variant,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return len(selected)


@dataclass
class AnnotationStats:
    candidates: int = 0
    stage1_kept: int = 0
    stage2_kept: int = 0
    judge_violations: int = 0


def annotate_queries(
    queries: list[QueryRecord],
    docs_for_query,
    teacher: BackendSpec,
    judge: BackendSpec,
    cache: ResponseCache,
    templates: TemplateSet | None = None,
) -> tuple[list[Demonstration], AnnotationStats]:
    """Full annotation pass: generate, stage-1 filter, stage-2 judge.

    ``docs_for_query`` maps a QueryRecord to its retrieved documents. Judge
    protocol violations drop the candidate and are counted, not retried.
    """
    stats = AnnotationStats()
    demos: list[Demonstration] = []
    for query in queries:
        candidate = generate_candidate(teacher, query, docs_for_query(query), cache, templates=templates)
        stats.candidates += 1
        if not filter_stage1(candidate):
            continue
        stats.stage1_kept += 1
        try:
            kept = filter_stage2(candidate, judge, cache, templates=templates)
        except JudgeProtocolViolation:
            stats.judge_violations += 1
            continue
        if not kept:
            continue
        stats.stage2_kept += 1
        demos.append(build_demonstration(candidate, teacher.model_name, judge.model_name))
    return demos, stats

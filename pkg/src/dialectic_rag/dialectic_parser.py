"""Parse raw model output into the four-stage dialectic structure.

Output sections are delimited by the header markers ``#Extraction``,
``#Explanation`` (the template's ``#Explaination`` spelling is accepted too),
``#Dialectic Argumentation`` and ``#Answer``: case-sensitive, with an
optional trailing colon and optional markdown emphasis around the marker,
anchored at line starts.

Parsing is deliberately lenient: smaller models often ignore the structure,
and the instruction-following metric must still be computable on their
output. Missing or disordered sections are recorded in the ParseReport
instead of failing; only a text with no recognizable header at all raises.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

RELEVANT = "Relevant"
IRRELEVANT = "Irrelevant"
PARTIALLY_RELEVANT = "PartiallyRelevant"
UNSTATED = "Unstated"

SECTION_ORDER = ("extraction", "explanation", "argumentation", "answer")

_EMPH = r"[*_~`]{0,3}"
_HEADER_RE = re.compile(
    rf"^[ \t]*{_EMPH}#(?P<name>Extraction|Explanation|Explaination|Dialectic Argumentation|Answer)"
    rf"(?![A-Za-z]):?{_EMPH}:?[ \t]*",
    re.MULTILINE,
)
_CITATION_RE = re.compile(r"\[(\d+)\]")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?。！？؟]+|\n{2,}")


class ParserError(Exception):
    pass


class NoSectionsFound(ParserError):
    pass


class EmptyOutput(ParserError):
    pass


@dataclass(frozen=True)
class DocVerdict:
    doc_index: int
    relevance: str  # Relevant | Irrelevant | PartiallyRelevant | Unstated
    evidence: tuple[str, ...] = ()


@dataclass(frozen=True)
class DialecticTrace:
    extraction: str
    explanation: str
    argumentation: str
    answer: str
    verdicts: tuple[DocVerdict, ...]
    raw: str


@dataclass(frozen=True)
class ParseReport:
    sections_found: frozenset[str]
    citations: tuple[int, ...]
    if_pass: bool
    failure_reasons: tuple[str, ...]


def _canonical_kind(header_name: str) -> str:
    if header_name in ("Explanation", "Explaination"):
        return "explanation"
    if header_name == "Dialectic Argumentation":
        return "argumentation"
    return header_name.lower()


def _find_headers(raw: str) -> list[tuple[str, int, int]]:
    """(kind, header_start, content_start) for every header marker in raw."""
    return [
        (_canonical_kind(m.group("name")), m.start(), m.end())
        for m in _HEADER_RE.finditer(raw)
    ]


def extract_citations(text: str) -> list[int]:
    """All bracketed positive integers, in order, duplicates preserved."""
    return [int(m.group(1)) for m in _CITATION_RE.finditer(text) if int(m.group(1)) > 0]


def parse_trace(raw: str, n_docs: int | None = None) -> tuple[DialecticTrace, ParseReport]:
    """Split raw output at the section markers.

    Missing sections leave the corresponding trace field empty and are listed
    in the report; a raw with no marker at all raises NoSectionsFound. When
    ``n_docs`` is given, per-document relevance verdicts are classified from
    the explanation section.
    """
    if not raw.strip():
        raise EmptyOutput("raw model output is empty")
    headers = _find_headers(raw)
    if not headers:
        raise NoSectionsFound("no section markers in model output")

    sequence = [kind for kind, _, _ in headers]
    contents: dict[str, str] = {}
    for i, (kind, _, content_start) in enumerate(headers):
        content_end = headers[i + 1][1] if i + 1 < len(headers) else len(raw)
        if kind not in contents:  # first occurrence wins
            contents[kind] = raw[content_start:content_end].strip()

    reasons: list[str] = []
    for kind in SECTION_ORDER:
        if kind not in contents:
            reasons.append(f"MissingSection:{kind}")
    for kind in SECTION_ORDER:
        if sequence.count(kind) > 1:
            reasons.append(f"DuplicateHeader:{kind}")
    present_in_order = [k for k in sequence if k in SECTION_ORDER]
    deduped = list(dict.fromkeys(present_in_order))
    expected = [k for k in SECTION_ORDER if k in deduped]
    if deduped != expected:
        reasons.append("OutOfOrder")

    explanation = contents.get("explanation", "")
    citations = tuple(extract_citations(explanation))
    answer = contents.get("answer", "")
    if not any(r.startswith("MissingSection") or r == "OutOfOrder" for r in reasons):
        if not citations:
            reasons.append("NoCitations")
        if not answer:
            reasons.append("EmptyAnswer")

    if n_docs is None:
        n_docs = max(citations, default=0)
    verdicts = classify_verdicts(explanation, n_docs) if n_docs >= 1 else []

    trace = DialecticTrace(
        extraction=contents.get("extraction", ""),
        explanation=explanation,
        argumentation=contents.get("argumentation", ""),
        answer=answer,
        verdicts=tuple(verdicts),
        raw=raw,
    )
    report = ParseReport(
        sections_found=frozenset(contents),
        citations=citations,
        if_pass=not reasons,
        failure_reasons=tuple(reasons),
    )
    return trace, report


def parse_trace_lenient(raw: str, n_docs: int | None = None) -> tuple[DialecticTrace, ParseReport]:
    """Like parse_trace, but a markerless output becomes an empty trace."""
    try:
        return parse_trace(raw, n_docs)
    except (NoSectionsFound, EmptyOutput) as exc:
        trace = DialecticTrace("", "", "", "", (), raw)
        report = ParseReport(
            sections_found=frozenset(),
            citations=(),
            if_pass=False,
            failure_reasons=(type(exc).__name__,),
        )
        return trace, report


def extract_final_answer(raw: str) -> str:
    """Text after the last answer marker; last non-empty line as a fallback.

    The fallback covers models prompted without the structured format (and
    ones that ignore it), which tend to end with the answer.
    """
    if not raw.strip():
        raise EmptyOutput("raw model output is empty")
    headers = _find_headers(raw)
    answers = [(start, content_start) for kind, start, content_start in headers if kind == "answer"]
    if answers:
        _, content_start = answers[-1]
        following = [start for _, start, _ in headers if start >= content_start]
        content_end = min(following) if following else len(raw)
        return raw[content_start:content_end].strip()
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    return lines[-1]


def _keyword_verdict(sentence: str) -> str | None:
    lowered = sentence.casefold()
    if "partially relevant" in lowered:
        return PARTIALLY_RELEVANT
    if "irrelevant" in lowered:
        return IRRELEVANT
    if "relevant" in lowered:
        return RELEVANT
    return None


def classify_verdicts(explanation: str, n_docs: int) -> list[DocVerdict]:
    """One relevance verdict per document index 1..n_docs.

    A sentence's verdict keyword applies to the documents cited in it, or,
    when it cites none, to the documents of the most recent citing sentence,
    so trailing verdict statements like "Partially relevant information."
    attach to the document under discussion. Later statements overwrite
    earlier ones.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    verdicts: dict[int, str] = {}
    evidence: dict[int, list[str]] = {}
    current_docs: list[int] = []
    for raw_sentence in _SENTENCE_SPLIT_RE.split(explanation):
        sentence = raw_sentence.strip()
        if not sentence:
            continue
        cited = [c for c in extract_citations(sentence) if 1 <= c <= n_docs]
        if cited:
            current_docs = cited
        verdict = _keyword_verdict(sentence)
        if verdict and current_docs:
            for doc in current_docs:
                verdicts[doc] = verdict
                evidence.setdefault(doc, []).append(sentence)
    return [
        DocVerdict(
            doc_index=i,
            relevance=verdicts.get(i, UNSTATED),
            evidence=tuple(evidence.get(i, [])),
        )
        for i in range(1, n_docs + 1)
    ]

"""Evaluation quantities: exact match, accuracy, language and format checks.

Answer matching is flexible by default (a generation counts as correct when
any normalized gold answer occurs inside the normalized generation), with a
strict (normalized equality) variant used as the annotation filter's first
gate. Normalization is centralized in :func:`normalize_answer` so the policy
can be swapped in one place.

Language identification is pluggable. The builtin heuristic needs no model:
non-Latin scripts are recognized by character ranges (each CJK/Cyrillic/...
letter is one vote), Latin text is voted per word against small stopword
tables. Latin words are counted per token rather than per letter so short
native-script answers with Latin glosses (common in bilingual answers) still
classify as the native script. An external identifier can be swapped in as a
shell command reading text on stdin and printing one ISO-639-1 code.
"""

from __future__ import annotations

import string
import subprocess
import threading
import unicodedata
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal


class MetricsError(Exception):
    pass


class NoGolds(MetricsError):
    pass


class EmptyInput(MetricsError):
    pass


class UnidentifiableText(MetricsError):
    pass


_PUNCT_STRIP = string.punctuation + string.whitespace


def normalize_answer(text: str) -> str:
    """NFKC, casefold, collapse whitespace, strip surrounding ASCII punctuation."""
    text = unicodedata.normalize("NFKC", text).casefold()
    text = " ".join(text.split())
    return text.strip(_PUNCT_STRIP)


def flexible_em(generated: str, golds: list[str] | tuple[str, ...]) -> bool:
    """True iff some normalized gold answer is a substring of the generation."""
    if not golds:
        raise NoGolds("flexible_em needs at least one gold answer")
    norm_gen = normalize_answer(generated)
    return any(normalize_answer(g) in norm_gen for g in golds)


def strict_em(answer: str, golds: list[str] | tuple[str, ...]) -> bool:
    """True iff the normalized answer equals some normalized gold answer."""
    if not golds:
        raise NoGolds("strict_em needs at least one gold answer")
    norm = normalize_answer(answer)
    return any(normalize_answer(g) == norm for g in golds)


# --- language identification -------------------------------------------------

_SCRIPT_RANGES = {
    "cyrillic": ((0x0400, 0x052F),),
    "han": ((0x3400, 0x4DBF), (0x4E00, 0x9FFF), (0xF900, 0xFAFF)),
    "kana": ((0x3040, 0x30FF),),
    "hangul": ((0x1100, 0x11FF), (0x3130, 0x318F), (0xAC00, 0xD7AF)),
    "arabic": ((0x0600, 0x06FF), (0x0750, 0x077F), (0x08A0, 0x08FF)),
    "thai": ((0x0E00, 0x0E7F),),
    "bengali": ((0x0980, 0x09FF),),
    "telugu": ((0x0C00, 0x0C7F),),
    "devanagari": ((0x0900, 0x097F),),
}

_SCRIPT_TO_LANG = {
    "cyrillic": "ru",
    "hangul": "ko",
    "arabic": "ar",
    "thai": "th",
    "bengali": "bn",
    "telugu": "te",
    "devanagari": "hi",
}

_LATIN_LANGS = ("de", "en", "es", "fi", "fr", "it", "pt")

_STOPWORDS: dict[str, frozenset[str]] = {
    "en": frozenset(
        "the is of and to in that it was for with are this be as answer".split()
    ),
    "es": frozenset(
        "el la los las es de que y en un una por con para del respuesta está son".split()
    ),
    "de": frozenset(
        "der die das ist und zu den von mit für auf ein eine nicht als antwort im".split()
    ),
    "fr": frozenset(
        "le les est et des du une que pour dans avec je vous ne pas réponse c'est".split()
    ),
    "it": frozenset(
        "il lo gli è di che per con della delle questo risposta sono nel".split()
    ),
    "pt": frozenset(
        "o os as é e do da dos das um uma não com você resposta em".split()
    ),
    "fi": frozenset(
        "on ja ei se että oli hän mutta myös kuin vastaus tämä ovat".split()
    ),
}

_BUILTIN_LANGS = frozenset(_LATIN_LANGS) | frozenset(
    ["zh", "ja", "ko", "ar", "ru", "th", "bn", "te", "hi"]
)

_EXTERNAL_SLOTS = threading.Semaphore(4)


def _script_of(ch: str) -> str | None:
    cp = ord(ch)
    for script, ranges in _SCRIPT_RANGES.items():
        for lo, hi in ranges:
            if lo <= cp <= hi:
                return script
    if ch.isalpha():
        return "latin"
    return None


def _script_counts(text: str) -> dict[str, int]:
    """Non-Latin letters count one each; Latin counts per word token."""
    counts: dict[str, int] = {}
    latin_run = False
    for ch in text:
        script = _script_of(ch)
        if script == "latin":
            if not latin_run:
                counts["latin"] = counts.get("latin", 0) + 1
                latin_run = True
            continue
        latin_run = False
        if script is not None:
            counts[script] = counts.get(script, 0) + 1
    return counts


def _latin_tokens(text: str) -> list[str]:
    tokens: list[str] = []
    current: list[str] = []
    for ch in text:
        if _script_of(ch) == "latin" or (current and ch == "'"):
            current.append(ch)
        elif current:
            tokens.append("".join(current).casefold().rstrip("'"))
            current = []
    if current:
        tokens.append("".join(current).casefold().rstrip("'"))
    return tokens


def _vote_latin(text: str) -> str:
    votes = {lang: 0 for lang in _LATIN_LANGS}
    for token in _latin_tokens(text):
        for lang in _LATIN_LANGS:
            if token in _STOPWORDS[lang]:
                votes[lang] += 1
    best = max(votes.values())
    if best == 0:
        return "und"
    return min(lang for lang, v in votes.items() if v == best)


def _majority_script(counts: dict[str, int]) -> str | None:
    """Dominant script bucket; han and kana pool together as cjk."""
    pooled: dict[str, int] = {}
    for script, n in counts.items():
        bucket = "cjk" if script in ("han", "kana") else script
        pooled[bucket] = pooled.get(bucket, 0) + n
    if not pooled:
        return None
    best = max(pooled.values())
    return min(b for b, n in pooled.items() if n == best)


def _builtin_classify(text: str) -> str:
    counts = _script_counts(text)
    majority = _majority_script(counts)
    if majority is None:
        return "und"
    if majority == "latin":
        return _vote_latin(text)
    if majority == "cjk":
        return "ja" if counts.get("kana", 0) > 0 else "zh"
    return _SCRIPT_TO_LANG.get(majority, "und")


def _expected_bucket(lang: str) -> str | None:
    if lang in _LATIN_LANGS:
        return "latin"
    if lang in ("zh", "ja"):
        return "cjk"
    for script, mapped in _SCRIPT_TO_LANG.items():
        if mapped == lang:
            return script
    return None


@dataclass(frozen=True)
class LanguageIdentifier:
    kind: str = "builtin_heuristic"  # or "external_command"
    supported_langs: frozenset[str] = _BUILTIN_LANGS
    command: str = ""

    def __post_init__(self):
        if self.kind not in ("builtin_heuristic", "external_command"):
            raise ValueError(f"unknown identifier kind {self.kind!r}")
        if self.kind == "external_command" and not self.command:
            raise ValueError("external_command identifier needs a command")

    def classify(self, text: str) -> str:
        if self.kind == "external_command":
            with _EXTERNAL_SLOTS:
                proc = subprocess.run(
                    self.command,
                    shell=True,
                    input=text.encode("utf-8"),
                    capture_output=True,
                    check=False,
                )
            code = proc.stdout.decode("utf-8", "replace").strip().lower()
            return code if code in self.supported_langs else "und"
        code = _builtin_classify(text)
        return code if code in self.supported_langs else "und"


def correct_language(answer: str, expected: str, lid: LanguageIdentifier | None = None) -> bool:
    """Whether the answer is written in the expected language.

    Raises UnidentifiableText when there is nothing to go on (no letters, or
    Latin text with no stopword evidence and a Latin expectation).
    """
    if not answer:
        raise ValueError("answer must be non-empty")
    lid = lid or LanguageIdentifier()
    if lid.kind == "external_command":
        code = lid.classify(answer)
        if code == "und":
            raise UnidentifiableText(answer[:80])
        return code == expected

    counts = _script_counts(answer)
    majority = _majority_script(counts)
    if majority is None:
        raise UnidentifiableText(answer[:80])
    expected_bucket = _expected_bucket(expected)
    if expected_bucket is None:
        raise UnidentifiableText(f"no heuristic for language {expected!r}")
    if majority != expected_bucket:
        return False
    if majority == "cjk":
        return ("ja" if counts.get("kana", 0) > 0 else "zh") == expected
    if majority == "latin":
        winner = _vote_latin(answer)
        if winner == "und":
            raise UnidentifiableText(answer[:80])
        return winner == expected
    return _SCRIPT_TO_LANG.get(majority) == expected


# --- aggregation --------------------------------------------------------------


@dataclass(frozen=True)
class ScoredRecord:
    query_id: str
    lang: str
    answer_text: str
    gold_answers: tuple[str, ...]
    flexible_match: bool
    strict_match: bool
    controller: str | None = None
    language_ok: bool | None = None
    if_pass: bool | None = None

    def __post_init__(self):
        if self.strict_match and not self.flexible_match:
            raise ValueError("strict match implies flexible match")


def round_pct(fraction: float) -> str:
    """Percentage display: one decimal, ties rounded up (80.0 from 0.8)."""
    return str(
        (Decimal(repr(fraction)) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    )


def _rate(values: list[bool]) -> float | None:
    if not values:
        return None
    return sum(values) / len(values)


@dataclass(frozen=True)
class LangMetrics:
    count: int
    accuracy: float
    if_rate: float | None
    cl_rate: float | None

    def display(self) -> dict[str, str]:
        row = {"accuracy": round_pct(self.accuracy)}
        if self.if_rate is not None:
            row["if_rate"] = round_pct(self.if_rate)
        if self.cl_rate is not None:
            row["cl_rate"] = round_pct(self.cl_rate)
        return row


@dataclass(frozen=True)
class MetricsTable:
    per_lang: dict[str, LangMetrics]
    overall: LangMetrics

    def to_json_obj(self) -> dict:
        def entry(m: LangMetrics) -> dict:
            return {
                "count": m.count,
                "accuracy": m.accuracy,
                "if_rate": m.if_rate,
                "cl_rate": m.cl_rate,
                "display": m.display(),
            }

        return {
            "per_lang": {lang: entry(m) for lang, m in sorted(self.per_lang.items())},
            "overall": entry(self.overall),
        }

    def format_text(self) -> str:
        header = f"{'lang':<8}{'n':>6}{'acc%':>8}{'IF%':>8}{'CL%':>8}"
        lines = [header, "-" * len(header)]

        def fmt(name: str, m: LangMetrics) -> str:
            if_s = round_pct(m.if_rate) if m.if_rate is not None else "-"
            cl_s = round_pct(m.cl_rate) if m.cl_rate is not None else "-"
            return f"{name:<8}{m.count:>6}{round_pct(m.accuracy):>8}{if_s:>8}{cl_s:>8}"

        for lang in sorted(self.per_lang):
            lines.append(fmt(lang, self.per_lang[lang]))
        lines.append(fmt("all", self.overall))
        return "\n".join(lines)


def _metrics_for(records: list[ScoredRecord]) -> LangMetrics:
    return LangMetrics(
        count=len(records),
        accuracy=sum(r.flexible_match for r in records) / len(records),
        if_rate=_rate([r.if_pass for r in records if r.if_pass is not None]),
        cl_rate=_rate([r.language_ok for r in records if r.language_ok is not None]),
    )


def aggregate(records: list[ScoredRecord]) -> MetricsTable:
    """Per-language and overall accuracy / instruction-following / language rates."""
    if not records:
        raise EmptyInput("no records to aggregate")
    by_lang: dict[str, list[ScoredRecord]] = {}
    for record in records:
        by_lang.setdefault(record.lang, []).append(record)
    return MetricsTable(
        per_lang={lang: _metrics_for(rs) for lang, rs in by_lang.items()},
        overall=_metrics_for(records),
    )


# --- disputed-territory agreement ----------------------------------------------


def names_controller(answer: str, controller: str, aliases: tuple[str, ...] = ()) -> bool:
    norm = normalize_answer(answer)
    return any(normalize_answer(c) and normalize_answer(c) in norm for c in (controller, *aliases))


def borderlines_agreement(
    groups,
    aliases: dict[str, tuple[str, ...]] | None = None,
) -> tuple[float, float]:
    """Agreement rates with the controlling country, as percentages.

    ``groups`` is a list of (BorderlinesGroup, (answer_en, answer_x, answer_y)).
    The first value is the share of groups whose English answer names the
    controller; the second counts every individual answer, so its granularity
    is one third as coarse. ``aliases`` optionally maps a group_id to extra
    strings accepted for its controller.
    """
    if not groups:
        raise EmptyInput("no groups to score")
    aliases = aliases or {}
    en_hits = 0
    all_hits = 0
    total = 0
    for group, answers in groups:
        if len(answers) != 3:
            raise ValueError(f"group {group.group_id!r} needs exactly three answers")
        extra = aliases.get(group.group_id, ())
        hits = [names_controller(a, group.controller, extra) for a in answers]
        en_hits += hits[0]
        all_hits += sum(hits)
        total += 3
    return 100.0 * en_hits / len(groups), 100.0 * all_hits / total

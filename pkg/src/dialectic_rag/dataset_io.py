"""Load, validate, and group line-delimited QA datasets.

A dataset file is UTF-8 JSON lines, one record per line:

    {"id": "q1", "lang": "es", "question": "...", "answers": ["..."],
     "group_id": "...", "controller": "...", "metadata": {...}}

``answers`` may be empty only when ``controller`` is present: every record
must be scoreable either against gold answers or against a controller.
Territorial-dispute records come in triples (English plus the two disputant
languages) linked by ``group_id``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

# Languages covered by the shipped datasets, plus English. Unknown codes are
# accepted with a warning so the tool stays usable on new benchmarks.
KNOWN_LANGS = frozenset(
    [
        "en", "es", "de", "ru", "zh", "fi", "ar", "it", "ko",
        "hi", "te", "fr", "ja", "pt", "bn", "th", "vi",
    ]
)


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MalformedRecord(DatasetError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateId(DatasetError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record id: {record_id!r}")
        self.record_id = record_id


class EmptyDataset(DatasetError):
    pass


class IncompleteGroup(DatasetError):
    def __init__(self, group_id: str, count: int, reason: str = ""):
        detail = f" ({reason})" if reason else ""
        super().__init__(f"group {group_id!r} has {count} usable member(s){detail}")
        self.group_id = group_id
        self.count = count


@dataclass(frozen=True)
class QueryRecord:
    """One evaluation or annotation question."""

    id: str
    lang: str
    question: str
    gold_answers: tuple[str, ...] = ()
    group_id: str | None = None
    controller: str | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        obj: dict = {
            "id": self.id,
            "lang": self.lang,
            "question": self.question,
            "answers": list(self.gold_answers),
        }
        if self.group_id is not None:
            obj["group_id"] = self.group_id
        if self.controller is not None:
            obj["controller"] = self.controller
        if self.metadata:
            obj["metadata"] = dict(self.metadata)
        return obj


@dataclass(frozen=True)
class BorderlinesGroup:
    """The three language variants of one disputed-territory question."""

    group_id: str
    english: QueryRecord
    lang_x: QueryRecord
    lang_y: QueryRecord
    controller: str

    @property
    def members(self) -> tuple[QueryRecord, QueryRecord, QueryRecord]:
        return (self.english, self.lang_x, self.lang_y)


def _parse_record(obj: dict, line_no: int) -> QueryRecord:
    for key in ("id", "lang", "question"):
        if key not in obj:
            raise MalformedRecord(line_no, f"missing field {key!r}")
        if not isinstance(obj[key], str):
            raise MalformedRecord(line_no, f"field {key!r} must be a string")
    answers = obj.get("answers", [])
    if not isinstance(answers, list) or any(not isinstance(a, str) for a in answers):
        raise MalformedRecord(line_no, "field 'answers' must be an array of strings")
    group_id = obj.get("group_id")
    controller = obj.get("controller")
    if group_id is not None and not isinstance(group_id, str):
        raise MalformedRecord(line_no, "field 'group_id' must be a string")
    if controller is not None and not isinstance(controller, str):
        raise MalformedRecord(line_no, "field 'controller' must be a string")
    metadata = obj.get("metadata", {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedRecord(line_no, "field 'metadata' must map strings to strings")

    if not obj["question"]:
        raise MalformedRecord(line_no, "question is empty")
    # Scoreability: gold answers XOR controller.
    if bool(answers) == (controller is not None):
        if answers:
            raise MalformedRecord(
                line_no, "record has both gold answers and a controller; exactly one is allowed"
            )
        raise MalformedRecord(
            line_no, "record has neither gold answers nor a controller; one is required"
        )
    if group_id is not None and controller is None:
        raise MalformedRecord(line_no, "record with group_id must carry a controller")

    lang = obj["lang"]
    if lang not in KNOWN_LANGS:
        warnings.warn(f"line {line_no}: unknown language code {lang!r}", stacklevel=3)

    return QueryRecord(
        id=obj["id"],
        lang=lang,
        question=obj["question"],
        gold_answers=tuple(answers),
        group_id=group_id,
        controller=controller,
        metadata=dict(metadata),
    )


def load_dataset(path: str | Path) -> list[QueryRecord]:
    """Read a dataset file, validating every record. Order is preserved."""
    records: list[QueryRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise MalformedRecord(line_no, "record must be a JSON object")
            record = _parse_record(obj, line_no)
            if record.id in seen:
                raise DuplicateId(record.id)
            seen.add(record.id)
            records.append(record)
    if not records:
        raise EmptyDataset(f"no records in {path}")
    return records


def serialize(records: list[QueryRecord], path: str | Path) -> None:
    """Write records back out in the dataset line format (round-trips load_dataset)."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_json_obj(), ensure_ascii=False) + "\n")


def group_borderlines(records: list[QueryRecord]) -> list[BorderlinesGroup]:
    """Collect grouped records into (english, x, y) triples.

    Records without a group_id are excluded. The two non-English variants are
    ordered x/y by language code so grouping is deterministic.
    """
    by_group: dict[str, list[QueryRecord]] = {}
    order: list[str] = []
    for record in records:
        if record.group_id is None:
            continue
        if record.group_id not in by_group:
            order.append(record.group_id)
        by_group.setdefault(record.group_id, []).append(record)

    groups: list[BorderlinesGroup] = []
    for group_id in order:
        members = by_group[group_id]
        if len(members) != 3:
            raise IncompleteGroup(group_id, len(members))
        english = [m for m in members if m.lang == "en"]
        others = [m for m in members if m.lang != "en"]
        if len(english) != 1:
            raise IncompleteGroup(group_id, len(members), "needs exactly one English member")
        if others[0].lang == others[1].lang:
            raise IncompleteGroup(group_id, len(members), "non-English members share a language")
        controllers = {m.controller for m in members}
        if len(controllers) != 1:
            raise IncompleteGroup(group_id, len(members), "members disagree on controller")
        lang_x, lang_y = sorted(others, key=lambda m: m.lang)
        groups.append(
            BorderlinesGroup(
                group_id=group_id,
                english=english[0],
                lang_x=lang_x,
                lang_y=lang_y,
                controller=english[0].controller or "",
            )
        )
    return groups

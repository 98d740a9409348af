from __future__ import annotations

import json

import pytest

from dialectic_rag.dataset_io import (
    DuplicateId,
    EmptyDataset,
    IncompleteGroup,
    MalformedRecord,
    QueryRecord,
    group_borderlines,
    load_dataset,
    serialize,
)

from conftest import write_dataset


def _record(i: int, lang: str = "es", **extra) -> dict:
    base = {
        "id": f"mlqa-{lang}-{i:04d}",
        "lang": lang,
        "question": f"Pregunta número {i}?",
        "answers": [f"respuesta {i}"],
    }
    base.update(extra)
    return base


def _borderlines_triple(g: int, lang_x: str = "ru", lang_y: str = "zh") -> list[dict]:
    rows = []
    for lang in ("en", lang_x, lang_y):
        rows.append(
            {
                "id": f"bl-{g:02d}-{lang}",
                "lang": lang,
                "question": f"Is place {g} a territory of A) X or B) Y?",
                "answers": [],
                "group_id": f"g{g:02d}",
                "controller": "Country X",
            }
        )
    return rows


def test_load_800_records_per_language(tmp_path):
    path = write_dataset(tmp_path / "mlqa.jsonl", [_record(i) for i in range(800)])
    records = load_dataset(path)
    assert len(records) == 800
    assert [r.id for r in records] == [f"mlqa-es-{i:04d}" for i in range(800)]


def test_empty_file_is_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(EmptyDataset):
        load_dataset(path)


def test_record_without_answers_or_controller_is_malformed(tmp_path):
    path = write_dataset(tmp_path / "bad.jsonl", [_record(0, answers=[])])
    with pytest.raises(MalformedRecord):
        load_dataset(path)


def test_record_with_both_answers_and_controller_is_malformed(tmp_path):
    path = write_dataset(tmp_path / "bad.jsonl", [_record(0, controller="X")])
    with pytest.raises(MalformedRecord):
        load_dataset(path)


def test_group_id_requires_controller(tmp_path):
    path = write_dataset(tmp_path / "bad.jsonl", [_record(0, group_id="g1")])
    with pytest.raises(MalformedRecord):
        load_dataset(path)


def test_duplicate_id_is_rejected(tmp_path):
    path = write_dataset(tmp_path / "dup.jsonl", [_record(1), _record(1)])
    with pytest.raises(DuplicateId):
        load_dataset(path)


def test_invalid_json_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(_record(0)) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(MalformedRecord) as err:
        load_dataset(path)
    assert err.value.line_no == 2


def test_unknown_language_warns_but_loads(tmp_path):
    path = write_dataset(tmp_path / "odd.jsonl", [_record(0, lang="xx")])
    with pytest.warns(UserWarning, match="unknown language"):
        records = load_dataset(path)
    assert records[0].lang == "xx"


def test_round_trip_is_identity(tmp_path):
    rows = [_record(i) for i in range(5)]
    rows.append(_record(99, answers=[], group_id="g01", controller="Country X"))
    rows[2]["metadata"] = {"source": "mlqa", "aligned_id": "x-2"}
    path = write_dataset(tmp_path / "in.jsonl", rows)
    records = load_dataset(path)
    out = tmp_path / "out.jsonl"
    serialize(records, out)
    assert load_dataset(out) == records


def test_group_borderlines_twenty_triples(tmp_path):
    rows = []
    for g in range(20):
        rows.extend(_borderlines_triple(g))
    path = write_dataset(tmp_path / "bl.jsonl", rows)
    records = load_dataset(path)
    groups = group_borderlines(records)
    assert len(groups) == 20
    # three members per group, exactly the grouped records
    assert len(groups) * 3 == sum(1 for r in records if r.group_id is not None)
    for group in groups:
        assert group.english.lang == "en"
        assert group.lang_x.lang != group.lang_y.lang
        assert {m.group_id for m in group.members} == {group.group_id}


def test_group_borderlines_ignores_ungrouped():
    records = [
        QueryRecord(id="a", lang="en", question="Q?", gold_answers=("x",)),
    ]
    assert group_borderlines(records) == []


def test_group_borderlines_missing_english_member(tmp_path):
    rows = _borderlines_triple(1)
    rows[0]["lang"] = "fr"  # replace the English member
    path = write_dataset(tmp_path / "bl.jsonl", rows)
    with pytest.raises(IncompleteGroup):
        group_borderlines(load_dataset(path))


def test_group_borderlines_wrong_size(tmp_path):
    rows = _borderlines_triple(1)[:2]
    path = write_dataset(tmp_path / "bl.jsonl", rows)
    with pytest.raises(IncompleteGroup) as err:
        group_borderlines(load_dataset(path))
    assert err.value.count == 2


def test_group_borderlines_orders_x_y_by_lang():
    rows = _borderlines_triple(3, lang_x="zh", lang_y="ru")
    records = [
        QueryRecord(
            id=r["id"], lang=r["lang"], question=r["question"],
            gold_answers=(), group_id=r["group_id"], controller=r["controller"],
        )
        for r in rows
    ]
    group = group_borderlines(records)[0]
    assert (group.lang_x.lang, group.lang_y.lang) == ("ru", "zh")

from __future__ import annotations

import re

import pytest

from dialectic_rag.dataset_io import QueryRecord
from dialectic_rag.prompt_factory import (
    AllStepsAblated,
    MissingPriorOutput,
    NoDocuments,
    PromptVariation,
    TemplateSet,
    render_baseline,
    render_drag,
    render_drag_step,
    render_judge,
    render_rag,
)

from conftest import golden_text, make_doc

MOZART_Q = QueryRecord(
    id="mkqa-es-0001",
    lang="es",
    question="¿quién escribió variaciones de Campanita del lugar?",
    gold_answers=("Wolfgang Amadeus Mozart",),
)

FIVE_DOCS = [
    make_doc(i, embedding=[1.0, 0.0], text=text)
    for i, text in enumerate(
        [
            "First document text.",
            "Second document text.",
            "Third document text.",
            "Fourth document text.",
            "Fifth document text.",
        ],
        start=1,
    )
]


def q(text: str) -> QueryRecord:
    return QueryRecord(id="q", lang="en", question=text, gold_answers=("x",))


# --- golden byte-stability ----------------------------------------------------


def test_baseline_matches_golden():
    bundle = render_baseline(q("Q?"))
    assert bundle.text == golden_text("baseline_Q.txt")


def test_rag_matches_golden():
    bundle = render_rag(MOZART_Q, FIVE_DOCS)
    assert bundle.text == golden_text("rag_5docs.txt")


def test_drag_matches_golden():
    bundle = render_drag(MOZART_Q, FIVE_DOCS)
    assert bundle.text == golden_text("drag_5docs.txt")


def test_judge_matches_golden():
    bundle = render_judge(
        response="#Answer: Wolfgang Amadeus Mozart",
        target="Wolfgang Amadeus Mozart",
        instructions_text="Answer following the four steps",
    )
    assert bundle.text == golden_text("judge_filled.txt")


def test_drag_keeps_template_misspelling():
    bundle = render_drag(MOZART_Q, FIVE_DOCS)
    assert '"#Explaination:"' in bundle.text
    assert "#Explanation" not in bundle.text


# --- message structure ----------------------------------------------------------


def test_role_block_becomes_system_message():
    bundle = render_drag(MOZART_Q, FIVE_DOCS)
    system, user = bundle.messages
    assert system.role == "system"
    assert system.content.startswith("#Role\n")
    assert user.role == "user"
    assert bundle.text == system.content + "\n\n" + user.content


def test_newlines_in_question_preserved():
    question = "line one\nline two\n\nline four?"
    bundle = render_baseline(q(question))
    assert question in bundle.text


def test_two_questions_differ_only_in_question_span():
    a = render_baseline(q("First question?")).text
    b = render_baseline(q("Second question?")).text
    assert a.replace("First question?", "Second question?") == b


# --- document numbering ---------------------------------------------------------


def test_rag_numbers_documents_in_order():
    bundle = render_rag(MOZART_Q, FIVE_DOCS)
    assert "#Reference Evidence:\n[1] First document text.\n[2] Second document text." in bundle.text
    assert "[5] Fifth document text." in bundle.text


def test_rag_rejects_empty_docs():
    with pytest.raises(NoDocuments):
        render_rag(MOZART_Q, [])


def test_seven_docs_render_through_seven():
    docs = [make_doc(i, embedding=[1.0, 0.0]) for i in range(1, 8)]
    bundle = render_rag(MOZART_Q, docs)
    for i in range(1, 8):
        assert f"[{i}] Document {i} text." in bundle.text
    assert "[8]" not in bundle.text


# --- ablation -------------------------------------------------------------------


def test_ablating_step_two_renumbers_and_drops_block():
    bundle = render_drag(MOZART_Q, FIVE_DOCS, variation=PromptVariation(ablated_steps=frozenset({2})))
    text = bundle.text
    assert '"#Explaination:"' not in text
    markers = re.findall(r"^(\d)\) ", text, re.MULTILINE)
    assert markers == ["1", "2", "3"]
    assert 'Name this passage "#Extraction:"' in text
    assert "#Dialectic Argumentation" in text


def test_ablating_step_one_remaps_internal_reference():
    bundle = render_drag(MOZART_Q, FIVE_DOCS, variation=PromptVariation(ablated_steps=frozenset({1})))
    # old step 3 ("consider the step 2)...") becomes block 2 referring to step 1)
    assert "2) Please consider the step 1) in detail" in bundle.text


def test_cannot_ablate_all_steps():
    with pytest.raises(AllStepsAblated):
        render_drag(MOZART_Q, FIVE_DOCS, variation=PromptVariation(ablated_steps=frozenset({1, 2, 3, 4})))


def test_argumentation_language_clause():
    bundle = render_drag(
        MOZART_Q, FIVE_DOCS, variation=PromptVariation(argumentation_language="de")
    )
    assert "using German as the shared language" in bundle.text
    assert "using English as the shared language" not in bundle.text


def test_unablated_drag_is_preamble_plus_all_blocks():
    templates = TemplateSet()
    blocks = "\n\n".join(
        templates.text(f"drag_step_{i}").replace("{shared_language}", "English")
        for i in (1, 2, 3, 4)
    )
    expected = (
        templates.text("drag")
        .replace("{documents}", "\n".join(f"[{i}] {d.text}" for i, d in enumerate(FIVE_DOCS, 1)))
        .replace("{instructions}", blocks)
        .replace("{question}", MOZART_Q.question)
    )
    assert render_drag(MOZART_Q, FIVE_DOCS).text == expected


# --- step-at-a-time --------------------------------------------------------------


def test_step_one_has_no_assistant_messages():
    bundle = render_drag_step(MOZART_Q, FIVE_DOCS, 1, [])
    assert [m.role for m in bundle.messages] == ["system", "user"]
    assert '1) Consider the provided documents labelled "#Reference Evidence"' in bundle.text
    assert "2) For each document" not in bundle.text


def test_step_three_replays_two_priors():
    priors = ["#Extraction:\nstuff [1]", "#Explaination:\nDocument [1] is relevant."]
    bundle = render_drag_step(MOZART_Q, FIVE_DOCS, 3, priors)
    roles = [m.role for m in bundle.messages]
    assert roles == ["system", "assistant", "assistant", "user"]
    assert bundle.messages[1].content == priors[0]
    assert bundle.messages[2].content == priors[1]
    assert "3) Please consider the step 2) in detail" in bundle.messages[3].content


def test_step_two_without_priors_fails():
    with pytest.raises(MissingPriorOutput):
        render_drag_step(MOZART_Q, FIVE_DOCS, 2, [])


# --- judge ------------------------------------------------------------------------


def test_judge_renders_braces_literally():
    bundle = render_judge("answer {with} braces {question}", "target", "instr")
    assert "answer {with} braces {question}" in bundle.text


def test_judge_prompts_differ_only_in_target():
    a = render_judge("resp", "Alpha", "instr").text
    b = render_judge("resp", "Beta", "instr").text
    assert a.replace("#Target: Alpha.", "#Target: Beta.") == b


# --- injection safety ---------------------------------------------------------------


def test_substitution_does_not_alter_template_structure():
    tricky = "What about {documents} and {instructions}\nand even {question}?"
    bundle = render_baseline(q(tricky))
    assert tricky in bundle.text
    header_lines = [line for line in golden_text("baseline_Q.txt").splitlines() if line.startswith("#")]
    for header in header_lines:
        assert bundle.text.count(header) == 1

"""Render the prompt families from external template files.

Templates live in ``templates/`` (packaged copies by default, overridable
with a directory of the same layout) and use ``{placeholder}`` slots:
{question}, {documents}, {instructions}, {shared_language}, {response},
{target}. Substitution is a single literal pass, so braces or header-like
lines inside user content can never be re-expanded into template structure.

The first template block (the role statement) becomes the system message;
everything after the first blank line is the user message.

Variation points, all off by default:

* ``ablated_steps`` drops instruction blocks from the four-step prompt and
  renumbers the survivors consecutively from 1 (internal "step k)" mentions
  are remapped when step k survives, left alone when it was dropped).
* ``argumentation_language`` swaps which language the shared-language clause
  names (the reasoning language; the answer stays in the query language).
* step-at-a-time rendering emits one instruction block per call, with the
  earlier steps' outputs replayed as assistant messages.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .corpus_index import DocumentRecord
from .dataset_io import QueryRecord
from .llm_gateway import ChatMessage

ALL_STEPS = frozenset([1, 2, 3, 4])

LANGUAGE_NAMES = {
    "en": "English", "es": "Spanish", "de": "German", "fr": "French",
    "it": "Italian", "pt": "Portuguese", "fi": "Finnish", "ru": "Russian",
    "zh": "Chinese", "ja": "Japanese", "ko": "Korean", "ar": "Arabic",
    "hi": "Hindi", "te": "Telugu", "bn": "Bengali", "th": "Thai",
    "vi": "Vietnamese",
}

TEMPLATE_FILES = (
    "baseline", "rag", "drag",
    "drag_step_1", "drag_step_2", "drag_step_3", "drag_step_4",
    "judge",
)

_PLACEHOLDER_RE = re.compile(r"\{(question|documents|instructions|shared_language|response|target)\}")


class PromptError(Exception):
    pass


class NoDocuments(PromptError):
    pass


class AllStepsAblated(PromptError):
    pass


class MissingPriorOutput(PromptError):
    def __init__(self, step_index: int, got: int):
        super().__init__(f"step {step_index} needs {step_index - 1} prior outputs, got {got}")


@dataclass(frozen=True)
class PromptVariation:
    ablated_steps: frozenset[int] = frozenset()
    argumentation_language: str = "en"
    decomposed: bool = False


@dataclass(frozen=True)
class PromptBundle:
    messages: tuple[ChatMessage, ...]
    mode: str
    variation: PromptVariation = field(default_factory=PromptVariation)
    text: str = ""  # the full rendered prompt (system + user blocks)


def _substitute(template: str, mapping: dict[str, str]) -> str:
    return _PLACEHOLDER_RE.sub(
        lambda m: mapping.get(m.group(1), m.group(0)), template
    )


def _split_role(text: str) -> tuple[ChatMessage, ChatMessage]:
    """First block (the role statement) is the system message, rest is user."""
    head, sep, tail = text.partition("\n\n")
    if not sep:
        return ChatMessage("system", ""), ChatMessage("user", text)
    return ChatMessage("system", head), ChatMessage("user", tail)


def format_documents(docs: list[DocumentRecord]) -> str:
    return "\n".join(f"[{i}] {doc.text}" for i, doc in enumerate(docs, start=1))


def language_name(code: str) -> str:
    return LANGUAGE_NAMES.get(code, code)


class TemplateSet:
    """The eight prompt templates, loaded once from a directory."""

    def __init__(self, directory: str | Path | None = None):
        self._texts: dict[str, str] = {}
        if directory is None:
            root = resources.files("dialectic_rag").joinpath("templates")
            for name in TEMPLATE_FILES:
                raw = root.joinpath(f"{name}.txt").read_text(encoding="utf-8")
                self._texts[name] = raw.rstrip("\n")
        else:
            directory = Path(directory)
            for name in TEMPLATE_FILES:
                raw = (directory / f"{name}.txt").read_text(encoding="utf-8")
                self._texts[name] = raw.rstrip("\n")

    def text(self, name: str) -> str:
        return self._texts[name]

    def checksums(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in sorted(self._texts.items())
        }


_DEFAULT: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TemplateSet()
    return _DEFAULT


def _bundle(text: str, mode: str, variation: PromptVariation | None = None) -> PromptBundle:
    system, user = _split_role(text)
    return PromptBundle(
        messages=(system, user),
        mode=mode,
        variation=variation or PromptVariation(),
        text=text,
    )


def render_baseline(query: QueryRecord, templates: TemplateSet | None = None) -> PromptBundle:
    if not query.question:
        raise PromptError("question is empty")
    templates = templates or default_templates()
    text = _substitute(templates.text("baseline"), {"question": query.question})
    return _bundle(text, "baseline")


def render_rag(
    query: QueryRecord,
    docs: list[DocumentRecord],
    templates: TemplateSet | None = None,
) -> PromptBundle:
    if not docs:
        raise NoDocuments("rag prompt needs at least one document")
    templates = templates or default_templates()
    text = _substitute(
        templates.text("rag"),
        {"question": query.question, "documents": format_documents(docs)},
    )
    return _bundle(text, "rag")


_STEP_MARKER_RE = re.compile(r"^(\d)\)", re.MULTILINE)
_STEP_REF_RE = re.compile(r"\bstep (\d)\)")


def _instruction_blocks(
    templates: TemplateSet,
    steps: list[int],
    shared_language: str,
    renumber: bool,
) -> str:
    mapping = {old: new for new, old in enumerate(steps, start=1)}
    blocks: list[str] = []
    for old in steps:
        block = _substitute(
            templates.text(f"drag_step_{old}"), {"shared_language": shared_language}
        )
        if renumber:
            block = _STEP_MARKER_RE.sub(
                lambda m: f"{mapping[int(m.group(1))]})" if int(m.group(1)) in mapping else m.group(0),
                block,
                count=1,
            )
            block = _STEP_REF_RE.sub(
                lambda m: f"step {mapping[int(m.group(1))]})" if int(m.group(1)) in mapping else m.group(0),
                block,
            )
        blocks.append(block)
    return "\n\n".join(blocks)


def render_drag(
    query: QueryRecord,
    docs: list[DocumentRecord],
    variation: PromptVariation | None = None,
    templates: TemplateSet | None = None,
) -> PromptBundle:
    if not docs:
        raise NoDocuments("dialectic prompt needs at least one document")
    variation = variation or PromptVariation()
    bad = variation.ablated_steps - ALL_STEPS
    if bad:
        raise PromptError(f"unknown step indices: {sorted(bad)}")
    if variation.ablated_steps >= ALL_STEPS:
        raise AllStepsAblated("cannot ablate all four steps")
    templates = templates or default_templates()
    steps = [s for s in (1, 2, 3, 4) if s not in variation.ablated_steps]
    instructions = _instruction_blocks(
        templates,
        steps,
        language_name(variation.argumentation_language),
        renumber=bool(variation.ablated_steps),
    )
    text = _substitute(
        templates.text("drag"),
        {
            "question": query.question,
            "documents": format_documents(docs),
            "instructions": instructions,
        },
    )
    return _bundle(text, "drag", variation)


def render_drag_step(
    query: QueryRecord,
    docs: list[DocumentRecord],
    step_index: int,
    prior_outputs: list[str],
    variation: PromptVariation | None = None,
    templates: TemplateSet | None = None,
) -> PromptBundle:
    """One instruction block at a time; earlier outputs replayed as assistant turns."""
    if step_index not in ALL_STEPS:
        raise PromptError(f"step_index must be 1..4, got {step_index}")
    if len(prior_outputs) != step_index - 1:
        raise MissingPriorOutput(step_index, len(prior_outputs))
    if not docs:
        raise NoDocuments("dialectic prompt needs at least one document")
    variation = variation or PromptVariation()
    templates = templates or default_templates()
    instructions = _instruction_blocks(
        templates,
        [step_index],
        language_name(variation.argumentation_language),
        renumber=False,
    )
    text = _substitute(
        templates.text("drag"),
        {
            "question": query.question,
            "documents": format_documents(docs),
            "instructions": instructions,
        },
    )
    system, user = _split_role(text)
    messages = (
        (system,)
        + tuple(ChatMessage("assistant", out) for out in prior_outputs)
        + (user,)
    )
    step_variation = PromptVariation(
        ablated_steps=variation.ablated_steps,
        argumentation_language=variation.argumentation_language,
        decomposed=True,
    )
    return PromptBundle(
        messages=messages, mode=f"drag_step_{step_index}", variation=step_variation, text=text
    )


def render_judge(
    response: str,
    target: str,
    instructions_text: str,
    templates: TemplateSet | None = None,
) -> PromptBundle:
    if not response or not target or not instructions_text:
        raise PromptError("judge prompt needs non-empty response, target, and instructions")
    templates = templates or default_templates()
    text = _substitute(
        templates.text("judge"),
        {"response": response, "target": target, "instructions": instructions_text},
    )
    return _bundle(text, "judge")

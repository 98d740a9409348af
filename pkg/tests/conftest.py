from __future__ import annotations

import json
from pathlib import Path

import pytest

from dialectic_rag.corpus_index import DocumentRecord
from dialectic_rag.dataset_io import QueryRecord
from dialectic_rag.llm_gateway import BackendSpec, ScriptTable

GOLDEN = Path(__file__).parent / "golden"


def golden_text(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


def make_doc(i: int, dim: int = 2, embedding=None, lang: str = "en", text: str | None = None) -> DocumentRecord:
    return DocumentRecord(
        doc_id=f"d{i:04d}",
        title=f"Title {i}",
        text=text if text is not None else f"Document {i} text.",
        lang=lang,
        embedding=tuple(embedding) if embedding is not None else (0.0,) * dim,
    )


def make_query(
    i: int,
    lang: str = "en",
    question: str | None = None,
    golds: tuple[str, ...] | None = None,
    **kwargs,
) -> QueryRecord:
    return QueryRecord(
        id=f"q{i:03d}",
        lang=lang,
        question=question if question is not None else f"Question number {i}?",
        gold_answers=golds if golds is not None else (f"answer-{i}",),
        **kwargs,
    )


def valid_trace_text(answer: str, n_docs: int = 2) -> str:
    """A minimal structurally valid four-section output ending in `answer`."""
    cited = " and ".join(f"[{i}]" for i in range(1, n_docs + 1))
    return (
        "#Extraction:\n"
        f"The documents {cited} discuss the topic of the question.\n\n"
        "#Explaination:\n"
        f"Document [1] claims the key fact, whereas passage [{n_docs}] adds context. "
        "Document [1] is relevant to the question.\n\n"
        "#Dialectic Argumentation:\n"
        "Weighing the passages from a neutral perspective, the evidence points one way.\n\n"
        "#Answer:\n"
        f"{answer}"
    )


def scripted_backend(
    entries: dict[str, str] | None = None,
    default: str | None = None,
    embeddings: dict[str, list[float]] | None = None,
    embedding_dim: int | None = 8,
    model_name: str = "scripted-test",
    fail_after: int | None = None,
) -> BackendSpec:
    return BackendSpec(
        kind="scripted",
        model_name=model_name,
        script=ScriptTable(
            entries=entries or {},
            default_response=default,
            embeddings=embeddings or {},
            embedding_dim=embedding_dim,
            fail_after=fail_after,
        ),
    )


def write_dataset(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def write_corpus(path: Path, docs: list[DocumentRecord]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(
                json.dumps(
                    {
                        "doc_id": doc.doc_id,
                        "title": doc.title,
                        "text": doc.text,
                        "lang": doc.lang,
                        "embedding": list(doc.embedding),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return path


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN

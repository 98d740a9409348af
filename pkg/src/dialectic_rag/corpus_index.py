"""Embedded document store with exact top-k retrieval by dot score.

The index is an exhaustive scan: every query is scored against every stored
embedding (no approximate structure). Scores are accumulated in float64 over
the float32 embeddings, hits are ordered by score descending with ties broken
by doc_id ascending, so results are reproducible across runs and platforms.

A corpus input file is JSON lines:

    {"doc_id": "...", "title": "...", "text": "...", "lang": "en",
     "embedding": [0.1, ...]}

The binary on-disk index starts with magic ``DRIX`` and a version byte 0x01,
then little-endian: u32 dim, u64 count, and per document four length-prefixed
UTF-8 strings (doc_id, title, text, lang) followed by dim float32 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DRIX"
VERSION = 0x01


class CorpusIndexError(Exception):
    """Base class for index failures."""


class DimensionMismatch(CorpusIndexError):
    def __init__(self, doc_id: str, expected: int, got: int):
        super().__init__(f"doc {doc_id!r}: embedding length {got} != index dim {expected}")
        self.doc_id = doc_id


class DuplicateDocId(CorpusIndexError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id: {doc_id!r}")
        self.doc_id = doc_id


class EmptyCorpusForFilter(CorpusIndexError):
    def __init__(self, langs):
        super().__init__(f"no documents match language filter {sorted(langs)}")
        self.langs = frozenset(langs)


class CorruptIndex(CorpusIndexError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    title: str
    text: str
    lang: str
    embedding: tuple[float, ...]

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"doc {self.doc_id!r}: text is empty")
        # Embeddings are 32-bit on disk and in the scan matrix; canonicalize
        # now so save/load round-trips compare equal.
        as_f32 = tuple(float(x) for x in np.asarray(self.embedding, dtype=np.float32))
        object.__setattr__(self, "embedding", as_f32)


@dataclass(frozen=True)
class RetrievalHit:
    document: DocumentRecord
    score: float


class CorpusIndex:
    """Immutable after build; concurrent retrieve calls need no locking."""

    def __init__(self, dim: int, documents: list[DocumentRecord]):
        self.dim = dim
        self.documents = list(documents)
        self._matrix = np.zeros((len(documents), dim), dtype=np.float32)
        for i, doc in enumerate(documents):
            self._matrix[i] = np.asarray(doc.embedding, dtype=np.float32)
        self.language_partitions: dict[str, list[int]] = {}
        for i, doc in enumerate(documents):
            self.language_partitions.setdefault(doc.lang, []).append(i)

    def __len__(self) -> int:
        return len(self.documents)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.documents == other.documents
            and np.array_equal(self._matrix, other._matrix)
        )


def build_index(documents: list[DocumentRecord], dim: int) -> CorpusIndex:
    seen: set[str] = set()
    for doc in documents:
        if doc.doc_id in seen:
            raise DuplicateDocId(doc.doc_id)
        seen.add(doc.doc_id)
        if len(doc.embedding) != dim:
            raise DimensionMismatch(doc.doc_id, dim, len(doc.embedding))
    return CorpusIndex(dim, documents)


def retrieve(
    index: CorpusIndex,
    query_embedding,
    k_candidates: int = 10,
    k_final: int = 5,
    langs: set[str] | None = None,
) -> list[RetrievalHit]:
    """Exact top-k by dot score over the (optionally language-filtered) corpus.

    Scores the full candidate pool, keeps the best k_candidates, returns the
    first k_final of those. If the pool is smaller than k_final, all documents
    come back. Hits are sorted (score desc, doc_id asc).
    """
    query = np.asarray(query_embedding, dtype=np.float64)
    if query.shape != (index.dim,):
        raise DimensionMismatch("<query>", index.dim, int(np.prod(query.shape)))
    if not 1 <= k_final <= k_candidates:
        raise ValueError(f"need 1 <= k_final ({k_final}) <= k_candidates ({k_candidates})")

    if langs is None:
        offsets = list(range(len(index.documents)))
    else:
        offsets = sorted(
            i for lang in langs for i in index.language_partitions.get(lang, [])
        )
        if not offsets:
            raise EmptyCorpusForFilter(langs)
    if not offsets:
        return []

    # float64 accumulation over float32 inputs; elementwise multiply + pairwise
    # sum avoids BLAS so results are bit-stable for a given numpy build.
    sub = index._matrix[offsets].astype(np.float64)
    scores = (sub * query).sum(axis=1)

    ranked = sorted(
        range(len(offsets)),
        key=lambda j: (-scores[j], index.documents[offsets[j]].doc_id),
    )
    top = ranked[: min(k_candidates, len(ranked))][:k_final]
    return [
        RetrievalHit(document=index.documents[offsets[j]], score=float(scores[j]))
        for j in top
    ]


def load_corpus_file(path: str | Path) -> list[DocumentRecord]:
    """Read corpus records from a JSON-lines file."""
    docs: list[DocumentRecord] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptIndex(f"corpus line {line_no}: invalid JSON: {exc.msg}") from exc
            try:
                docs.append(
                    DocumentRecord(
                        doc_id=obj["doc_id"],
                        title=obj.get("title", ""),
                        text=obj["text"],
                        lang=obj["lang"],
                        embedding=tuple(float(x) for x in obj["embedding"]),
                    )
                )
            except KeyError as exc:
                raise CorruptIndex(f"corpus line {line_no}: missing field {exc}") from exc
    return docs


def _write_str(f, s: str) -> None:
    data = s.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptIndex(f"truncated index file (wanted {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def read_str(self) -> str:
        (length,) = struct.unpack("<I", self.take(4))
        return self.take(length).decode("utf-8")


def save_index(index: CorpusIndex, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", index.dim))
        f.write(struct.pack("<Q", len(index.documents)))
        for i, doc in enumerate(index.documents):
            _write_str(f, doc.doc_id)
            _write_str(f, doc.title)
            _write_str(f, doc.text)
            _write_str(f, doc.lang)
            f.write(index._matrix[i].astype("<f4").tobytes())


def load_index(path: str | Path) -> CorpusIndex:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptIndex("bad magic bytes (not an index file)")
    version = r.take(1)[0]
    if version != VERSION:
        raise CorruptIndex(f"unsupported index version {version}")
    (dim,) = struct.unpack("<I", r.take(4))
    (count,) = struct.unpack("<Q", r.take(8))
    documents: list[DocumentRecord] = []
    for _ in range(count):
        doc_id = r.read_str()
        title = r.read_str()
        text = r.read_str()
        lang = r.read_str()
        vec = np.frombuffer(r.take(4 * dim), dtype="<f4")
        documents.append(
            DocumentRecord(
                doc_id=doc_id,
                title=title,
                text=text,
                lang=lang,
                embedding=tuple(float(x) for x in vec),
            )
        )
    if r.pos != len(data):
        raise CorruptIndex(f"{len(data) - r.pos} trailing bytes after last document")
    return build_index(documents, dim)

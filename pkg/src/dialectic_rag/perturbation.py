"""Deterministic robustness perturbations for retrieved document lists.

Two perturbations stress a retrieval-augmented pipeline: reshuffling the
retrieved documents (rank order carries no information afterwards) and
injecting two misleading distractor documents drawn from a pool. Both are
pure functions of (input, seed).

The generator is SplitMix64 rather than a platform default so the same seed
reproduces the same permutation in any implementation, and fixtures stay
portable. Shuffling is Fisher-Yates from the top index down; noise insertion
first draws the distinct pool picks (rejecting repeats), then a position
uniform in [0, current length] for each, in draw order.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


class PerturbationError(Exception):
    pass


class PoolTooSmall(PerturbationError):
    def __init__(self, pool_size: int, wanted: int):
        super().__init__(f"distractor pool has {pool_size} docs, need {wanted}")


class PoolOverlap(PerturbationError):
    def __init__(self, doc_id: str):
        super().__init__(f"pool document {doc_id!r} already among the retrieved docs")
        self.doc_id = doc_id


class Prng:
    """SplitMix64: 64-bit state, identical sequence on every platform."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        return self.next_u64() % bound


def stable_id_hash(text: str) -> int:
    """First 8 bytes (little-endian) of SHA-256; used to derive per-query seeds."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_for_query(run_seed: int, query_id: str) -> int:
    return (run_seed ^ stable_id_hash(query_id)) & _MASK64


def shuffle_docs(docs: list, seed: int) -> list:
    """Seeded Fisher-Yates permutation of the list (input left untouched)."""
    out = list(docs)
    rng = Prng(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def inject_noise(docs: list, pool: list, n: int = 2, seed: int = 0) -> list:
    """Insert n distinct pool documents at seeded random positions.

    Pool doc_ids must be disjoint from the retrieved docs'. The original
    documents keep their relative order (they remain a subsequence).
    """
    if n == 0:
        return list(docs)
    if len(pool) < n:
        raise PoolTooSmall(len(pool), n)
    doc_ids = {d.doc_id for d in docs}
    for pool_doc in pool:
        if pool_doc.doc_id in doc_ids:
            raise PoolOverlap(pool_doc.doc_id)

    rng = Prng(seed)
    picks: list[int] = []
    while len(picks) < n:
        idx = rng.below(len(pool))
        if idx not in picks:
            picks.append(idx)
    out = list(docs)
    for idx in picks:
        pos = rng.below(len(out) + 1)
        out.insert(pos, pool[idx])
    return out

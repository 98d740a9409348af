"""Uniform access to generation and embedding backends.

Two backend kinds share one interface: ``openai_compatible`` speaks the
chat-completions / embeddings wire protocol over HTTP, and ``scripted`` is a
deterministic table-driven double for tests and offline runs. A scripted
backend resolves a request to a canned response by explicit key (a caller
hint such as the dataset query id), by request fingerprint, or by a default;
its call counter makes backend traffic observable in tests.

``cached_generate`` wraps any backend with an append-only response cache
keyed by SHA-256 of the canonical (model, messages, params) serialization,
so repeated runs never pay for the same generation twice.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

DEFAULT_TIMEOUT_SECONDS = 60.0
DEFAULT_MAX_RETRIES = 5


class GatewayError(Exception):
    """Base class for backend failures."""


class AuthMissing(GatewayError):
    def __init__(self, env_var: str):
        super().__init__(f"environment variable {env_var!r} is not set")
        self.env_var = env_var


class HttpError(GatewayError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"HTTP {status}: {detail}" if detail else f"HTTP {status}")
        self.status = status


class ScriptMiss(GatewayError):
    def __init__(self, fingerprint: str):
        super().__init__(f"scripted backend has no entry for {fingerprint!r} and no default")
        self.fingerprint = fingerprint


class EmptyBatch(GatewayError):
    pass


class DimensionInconsistent(GatewayError):
    pass


class CacheCorrupt(GatewayError):
    def __init__(self, line_no: int, reason: str = ""):
        detail = f": {reason}" if reason else ""
        super().__init__(f"cache line {line_no} is corrupt{detail}")
        self.line_no = line_no


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "user" and not self.content:
            raise ValueError("user message content must be non-empty")


@dataclass(frozen=True)
class GenerationParams:
    # Greedy decoding with a 2048-token budget is the default inference setting.
    temperature: float = 0.0
    max_tokens: int = 2048
    stop_sequences: tuple[str, ...] | None = None


class ScriptTable:
    """Canned responses for the scripted backend.

    ``entries`` maps a key (request fingerprint or a caller-supplied key such
    as the query id) to a response. Lookups are deterministic; the counter
    increments on every generate call and is thread-safe.
    """

    def __init__(
        self,
        entries: dict[str, str] | None = None,
        default_response: str | None = None,
        embeddings: dict[str, list[float]] | None = None,
        embedding_dim: int | None = None,
        fail_after: int | None = None,
    ):
        self.entries = dict(entries or {})
        self.default_response = default_response
        self.embeddings = dict(embeddings or {})
        self.embedding_dim = embedding_dim
        self.fail_after = fail_after  # raise KeyboardInterrupt past this many calls
        self.call_counter = 0
        self.embed_counter = 0
        self._lock = threading.Lock()

    def lookup(self, fingerprint: str, script_key: str | None) -> str:
        with self._lock:
            self.call_counter += 1
            if self.fail_after is not None and self.call_counter > self.fail_after:
                raise KeyboardInterrupt(f"scripted interrupt after {self.fail_after} calls")
        if script_key is not None and script_key in self.entries:
            return self.entries[script_key]
        if fingerprint in self.entries:
            return self.entries[fingerprint]
        if self.default_response is not None:
            return self.default_response
        raise ScriptMiss(script_key if script_key is not None else fingerprint)

    def embed_one(self, text: str) -> list[float]:
        with self._lock:
            self.embed_counter += 1
        if text in self.embeddings:
            return list(self.embeddings[text])
        if self.embedding_dim is not None:
            return _hash_embedding(text, self.embedding_dim)
        raise ScriptMiss(text)


def _hash_embedding(text: str, dim: int) -> list[float]:
    """Deterministic unit-norm pseudo-embedding derived from SHA-256 of the text."""
    raw: list[float] = []
    counter = 0
    while len(raw) < dim:
        digest = hashlib.sha256(f"{counter}\x00{text}".encode("utf-8")).digest()
        for i in range(0, len(digest) - 3, 4):
            word = int.from_bytes(digest[i : i + 4], "little")
            raw.append(word / 2**31 - 1.0)  # spread into [-1, 1)
            if len(raw) == dim:
                break
        counter += 1
    norm = sum(x * x for x in raw) ** 0.5 or 1.0
    return [x / norm for x in raw]


@dataclass
class BackendSpec:
    kind: str  # openai_compatible | scripted
    model_name: str
    base_url: str = ""
    auth_env_var: str = ""
    timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS
    max_retries: int = DEFAULT_MAX_RETRIES
    retry_backoff_seconds: float = 0.5
    script: ScriptTable | None = None
    params: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self):
        if self.kind not in ("openai_compatible", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "scripted" and self.script is None:
            raise ValueError("scripted backend requires a script table")


def load_backend_spec(path: str | Path) -> BackendSpec:
    """Read a backend config (TOML). Secrets stay in environment variables."""
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:  # pragma: no cover - py310 path
        import tomli as tomllib
    with open(path, "rb") as f:
        cfg = tomllib.load(f)
    script = None
    if "script" in cfg:
        s = cfg["script"]
        script = ScriptTable(
            entries={str(k): str(v) for k, v in s.get("entries", {}).items()},
            default_response=s.get("default_response"),
            embeddings={str(k): [float(x) for x in v] for k, v in s.get("embeddings", {}).items()},
            embedding_dim=s.get("embedding_dim"),
        )
    params_cfg = cfg.get("params", {})
    params = GenerationParams(
        temperature=float(params_cfg.get("temperature", 0.0)),
        max_tokens=int(params_cfg.get("max_tokens", 2048)),
        stop_sequences=tuple(params_cfg["stop_sequences"]) if "stop_sequences" in params_cfg else None,
    )
    return BackendSpec(
        kind=cfg["kind"],
        model_name=cfg.get("model_name", ""),
        base_url=cfg.get("base_url", ""),
        auth_env_var=cfg.get("auth_env_var", ""),
        timeout_seconds=float(cfg.get("timeout_seconds", DEFAULT_TIMEOUT_SECONDS)),
        max_retries=int(cfg.get("max_retries", DEFAULT_MAX_RETRIES)),
        retry_backoff_seconds=float(cfg.get("retry_backoff_seconds", 0.5)),
        script=script,
        params=params,
    )


def canonical_request(model_name: str, messages: list[ChatMessage], params: GenerationParams) -> str:
    """Field-ordered, whitespace-free rendering; stable across runs and platforms."""
    obj = {
        "messages": [{"content": m.content, "role": m.role} for m in messages],
        "model": model_name,
        "params": {
            "max_tokens": params.max_tokens,
            "stop_sequences": list(params.stop_sequences) if params.stop_sequences else None,
            "temperature": params.temperature,
        },
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def request_fingerprint(model_name: str, messages: list[ChatMessage], params: GenerationParams) -> str:
    payload = canonical_request(model_name, messages, params).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def _auth_headers(backend: BackendSpec) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if backend.auth_env_var:
        key = os.environ.get(backend.auth_env_var)
        if not key:
            raise AuthMissing(backend.auth_env_var)
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _post_with_retries(backend: BackendSpec, url: str, body: dict) -> dict:
    headers = _auth_headers(backend)
    attempts = max(1, backend.max_retries)
    last_status = None
    for attempt in range(attempts):
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=backend.timeout_seconds)
        except requests.RequestException as exc:
            last_status = None
            if attempt + 1 == attempts:
                raise HttpError(0, f"connection failed: {exc}") from exc
            time.sleep(backend.retry_backoff_seconds * 2**attempt)
            continue
        if resp.status_code == 200:
            return resp.json()
        last_status = resp.status_code
        retryable = resp.status_code == 429 or resp.status_code >= 500
        if not retryable:
            raise HttpError(resp.status_code, resp.text[:200])
        if attempt + 1 < attempts:
            time.sleep(backend.retry_backoff_seconds * 2**attempt)
    raise HttpError(last_status or 0, f"retries exhausted after {attempts} attempts")


def generate(
    backend: BackendSpec,
    messages: list[ChatMessage],
    params: GenerationParams | None = None,
    script_key: str | None = None,
) -> str:
    """Return the first choice's message content.

    ``script_key`` is a lookup hint for scripted backends (typically the
    dataset query id); HTTP backends ignore it.
    """
    params = params or backend.params
    if backend.kind == "scripted":
        assert backend.script is not None
        fp = request_fingerprint(backend.model_name, messages, params)
        return backend.script.lookup(fp, script_key)

    body: dict = {
        "model": backend.model_name,
        "messages": [{"role": m.role, "content": m.content} for m in messages],
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    }
    if params.stop_sequences:
        body["stop"] = list(params.stop_sequences)
    data = _post_with_retries(backend, backend.base_url.rstrip("/") + "/chat/completions", body)
    try:
        return data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise HttpError(200, f"malformed chat completion response: {exc}") from exc


def embed(backend: BackendSpec, texts: list[str]) -> list[list[float]]:
    """One vector per input text, all the same dimension."""
    if not texts:
        raise EmptyBatch("embed requires at least one text")
    if backend.kind == "scripted":
        assert backend.script is not None
        vectors = [backend.script.embed_one(t) for t in texts]
    else:
        body = {"model": backend.model_name, "input": texts}
        data = _post_with_retries(backend, backend.base_url.rstrip("/") + "/embeddings", body)
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError) as exc:
            raise HttpError(200, f"malformed embeddings response: {exc}") from exc
        if len(vectors) != len(texts):
            raise DimensionInconsistent(f"asked for {len(texts)} embeddings, got {len(vectors)}")
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise DimensionInconsistent(f"mixed embedding dimensions: {sorted(dims)}")
    return vectors


class ResponseCache:
    """Append-only generation cache: one JSON line per (key, model, response).

    Appends are serialized through a lock; reads hit an in-memory map, so
    concurrent lookups are safe.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._map: dict[str, str] = {}
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            with open(self.path, encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        obj = json.loads(line)
                        key, response = obj["key"], obj["response"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise CacheCorrupt(line_no, str(exc)) from exc
                    self._map[key] = response

    def get(self, key: str) -> str | None:
        return self._map.get(key)

    def put(self, key: str, model: str, response: str) -> None:
        line = json.dumps(
            {"key": key, "model": model, "response": response, "timestamp": time.time()},
            ensure_ascii=False,
        )
        with self._lock:
            self._map[key] = response
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


def cached_generate(
    cache: ResponseCache,
    backend: BackendSpec,
    messages: list[ChatMessage],
    params: GenerationParams | None = None,
    script_key: str | None = None,
) -> tuple[str, bool]:
    """Generate through the cache. Returns (response, cache_hit)."""
    params = params or backend.params
    key = request_fingerprint(backend.model_name, messages, params)
    hit = cache.get(key)
    if hit is not None:
        cache.hits += 1
        return hit, True
    cache.misses += 1
    response = generate(backend, messages, params, script_key=script_key)
    cache.put(key, backend.model_name, response)
    return response, False

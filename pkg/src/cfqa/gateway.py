"""Text-completion backends behind one contract, with caching, retries and rate limiting.

A :class:`Backend` adapter knows how to talk to one model service and
classifies its failures as transient or permanent. The :class:`Gateway` wraps
an adapter with the on-disk cache, the retry loop and the concurrency budget.
"""

from __future__ import annotations

import abc
import json
import os
import random
import re
import threading
import time
import urllib.error
import urllib.request
from collections import Counter, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from hashlib import sha256
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .corpus import iter_jsonl, prompt_hash
from .errors import (
    BackendError,
    CapabilityError,
    ConfigError,
    ContentRefusalError,
    FixtureError,
    MalformedRecordError,
    TransientBackendError,
    TransportError,
    UnknownPromptError,
)

COMPLETION = "completion"
NEXT_TOKEN = "next_token"

MOCK_EPOCH = "1970-01-01T00:00:00+00:00"


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = 0.7
    max_output_units: int = 512
    stop_sequences: tuple[str, ...] = ()
    sample_index: int = 0
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.stop_sequences, tuple):
            object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_units < 1:
            raise ValueError("max_output_units must be positive")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    backend_id: str
    truncated: bool = False
    created_at: str | None = None


@dataclass(frozen=True)
class TokenDistribution:
    entries: Mapping[str, float]

    def __post_init__(self):
        for token, p in self.entries.items():
            if not (0.0 <= p <= 1.0):
                raise BackendError(f"probability for {token!r} outside [0, 1]: {p}")

    def get(self, token: str) -> float:
        return self.entries.get(token, 0.0)


@dataclass(frozen=True)
class CacheKey:
    backend_id: str
    prompt_hash: str
    temperature: float
    seed: int
    sample_index: int
    request_kind: str
    # Requested tokens for next_token lookups; the same prompt may be asked about different tokens.
    tokens: tuple[str, ...] = ()

    def digest(self) -> str:
        payload = json.dumps(
            [self.backend_id, self.prompt_hash, repr(float(self.temperature)), self.seed,
             self.sample_index, self.request_kind, list(self.tokens)],
            ensure_ascii=False,
        )
        return sha256(payload.encode("utf-8")).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def apply_stop_sequences(text: str, stops: Iterable[str]) -> str:
    cut = len(text)
    for s in stops:
        if s:
            i = text.find(s)
            if i != -1:
                cut = min(cut, i)
    return text[:cut]


class Backend(abc.ABC):
    backend_id: str
    supports_token_probs: bool = True

    @abc.abstractmethod
    def complete(self, request: CompletionRequest) -> CompletionResponse: ...

    def next_token_probabilities(self, prompt: str, tokens: Sequence[str]) -> Mapping[str, float]:
        raise CapabilityError(self.backend_id, "next-token probabilities")

    def timestamp(self) -> str:
        return utc_now()


# -- mock -------------------------------------------------------------------


@dataclass
class _FixtureEntry:
    completion: str | None = None
    error: str | None = None
    fail_times: int | None = None


class MockBackend(Backend):
    """Deterministic backend driven by a fixture keyed on prompt hash.

    Lookups go (prompt_hash, sample_index), then (prompt_hash, any sample).
    Unknown prompts raise :class:`UnknownPromptError` in strict mode; otherwise
    a synthetic completion / Yes-No split is drawn from an RNG seeded with
    (seed, prompt_hash, sample_index), so results never depend on call order.
    At temperature 0 every sample resolves to sample 0.

    Fixture entries may carry ``"error": "transient" | "refusal"`` (and
    ``"fail_times": n`` for transient errors that clear after n calls) to
    exercise failure handling.
    """

    FALLBACK_ANSWERS = ("Alpha", "Bravo", "Charlie", "Delta", "Echo")

    def __init__(
        self,
        completions: Mapping[tuple[str, int | None], _FixtureEntry] | None = None,
        token_probs: Mapping[str, Mapping[str, float]] | None = None,
        *,
        seed: int = 0,
        strict: bool = True,
        backend_id: str = "mock",
        fallback_template: str = "Synthetic document {n} about {answer}.\n\nAnswer: {answer}",
        timestamp: str = MOCK_EPOCH,
    ):
        self.backend_id = backend_id
        self.seed = seed
        self.strict = strict
        self.fallback_template = fallback_template
        self._completions = dict(completions or {})
        self._token_probs = {k: dict(v) for k, v in (token_probs or {}).items()}
        self._timestamp = timestamp
        self._failures: Counter = Counter()
        self._lock = threading.Lock()
        self.calls: Counter = Counter()
        # (kind, prompt_hash, sample_index) per answered or failed call, in call order.
        self.call_log: list[tuple[str, str, int | None]] = []

    def timestamp(self) -> str:
        return self._timestamp

    def _rng(self, *parts) -> random.Random:
        return random.Random(":".join(str(p) for p in (self.seed, *parts)))

    def _record_call(self, kind: str, h: str, index: int | None = None) -> None:
        with self._lock:
            self.calls[kind] += 1
            self.call_log.append((kind, h, index))

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        h = prompt_hash(request.prompt)
        index = 0 if request.temperature == 0 else request.sample_index
        entry = self._completions.get((h, index)) or self._completions.get((h, None))
        if entry is not None and entry.error:
            with self._lock:
                self._failures[(h, index)] += 1
                failed = self._failures[(h, index)]
            if entry.fail_times is None or failed <= entry.fail_times:
                self._record_call(COMPLETION, h, index)
                if entry.error == "refusal":
                    raise ContentRefusalError(f"mock refusal for {h} sample {index}")
                raise TransientBackendError(f"mock transient failure for {h} sample {index}")
        if entry is not None and entry.completion is not None:
            text = entry.completion
        elif self.strict:
            raise UnknownPromptError(h, index)
        else:
            rng = self._rng(COMPLETION, h, index)
            answer = rng.choice(self.FALLBACK_ANSWERS)
            text = self.fallback_template.format(n=rng.randrange(10_000), answer=answer)
        self._record_call(COMPLETION, h, index)
        text = apply_stop_sequences(text, request.stop_sequences)
        words = list(re.finditer(r"\S+", text))
        truncated = len(words) > request.max_output_units
        if truncated:
            text = text[: words[request.max_output_units - 1].end()]
        return CompletionResponse(text=text, backend_id=self.backend_id, truncated=truncated)

    def next_token_probabilities(self, prompt: str, tokens: Sequence[str]) -> Mapping[str, float]:
        h = prompt_hash(prompt)
        dist = self._token_probs.get(h)
        if dist is None:
            if self.strict:
                raise UnknownPromptError(h)
            # Fallback: split mass between the Yes-like and No-like tokens.
            p = self._rng(NEXT_TOKEN, h).random()
            dist = {}
            for t in tokens:
                word = t.strip().lower()
                if word == "yes":
                    dist[t] = p / 2
                elif word == "no":
                    dist[t] = (1 - p) / 2
        self._record_call(NEXT_TOKEN, h)
        return {t: float(dist.get(t, 0.0)) for t in tokens}


def load_mock_fixture(path: str | os.PathLike):
    """Parse the JSONL fixture into (completion entries, token distributions)."""
    completions: dict[tuple[str, int | None], _FixtureEntry] = {}
    token_probs: dict[str, dict[str, float]] = {}
    path = Path(path)
    if not path.exists():
        raise FixtureError(f"mock fixture not found: {path}")
    try:
        for lineno, offset, obj in iter_jsonl(path):
            def bad(reason):
                return FixtureError(f"{path}:{lineno} (byte {offset}): {reason}")

            if not isinstance(obj, dict) or not isinstance(obj.get("prompt_hash"), str):
                raise bad("entry needs a string prompt_hash")
            h = obj["prompt_hash"]
            idx = obj.get("sample_index")
            if idx is not None and (not isinstance(idx, int) or idx < 0):
                raise bad("sample_index must be a non-negative int or null")
            completion, probs, error = obj.get("completion"), obj.get("token_probs"), obj.get("error")
            if completion is None and probs is None and error is None:
                raise bad("entry has neither completion, token_probs nor error")
            if completion is not None or error is not None:
                if completion is not None and not isinstance(completion, str):
                    raise bad("completion must be a string")
                if error not in (None, "transient", "refusal"):
                    raise bad(f"unknown error kind {error!r}")
                if (h, idx) in completions:
                    raise bad(f"duplicate completion entry for ({h}, {idx})")
                completions[(h, idx)] = _FixtureEntry(completion, error, obj.get("fail_times"))
            if probs is not None:
                if not isinstance(probs, dict) or not all(
                    isinstance(v, (int, float)) and 0.0 <= v <= 1.0 for v in probs.values()
                ):
                    raise bad("token_probs must map tokens to probabilities in [0, 1]")
                if h in token_probs and token_probs[h] != probs:
                    raise bad(f"conflicting token_probs for {h}")
                token_probs[h] = {k: float(v) for k, v in probs.items()}
    except MalformedRecordError as e:
        raise FixtureError(str(e)) from None
    return completions, token_probs


def mock_backend(fixture_path: str | os.PathLike | None, seed: int = 0, *, strict: bool = True,
                 backend_id: str = "mock", **kwargs) -> MockBackend:
    if fixture_path is None:
        completions, probs = {}, {}
    else:
        completions, probs = load_mock_fixture(fixture_path)
    return MockBackend(completions, probs, seed=seed, strict=strict, backend_id=backend_id, **kwargs)


class FixtureBuilder:
    """Accumulates mock fixture entries keyed on the exact prompts the pipeline renders."""

    def __init__(self):
        self.rows: list[dict[str, Any]] = []
        self._probs: dict[str, dict[str, float]] = {}
        self._by_key: dict[tuple[str, int | None], dict[str, Any]] = {}

    def _row(self, prompt: str, sample_index: int | None) -> dict[str, Any]:
        # Completion and error for one (prompt, sample) share a single entry, so
        # "fail n times, then answer" is expressible.
        key = (prompt_hash(prompt), sample_index)
        if key not in self._by_key:
            row = {"prompt_hash": key[0], "sample_index": sample_index, "completion": None, "token_probs": None}
            self._by_key[key] = row
            self.rows.append(row)
        return self._by_key[key]

    def add_completion(self, prompt: str, completion: str, sample_index: int | None = None) -> None:
        row = self._row(prompt, sample_index)
        if row["completion"] is not None and row["completion"] != completion:
            raise FixtureError(f"conflicting completions for ({row['prompt_hash']}, {sample_index})")
        row["completion"] = completion

    def add_error(self, prompt: str, sample_index: int | None, kind: str = "transient",
                  fail_times: int | None = None) -> None:
        row = self._row(prompt, sample_index)
        row["error"] = kind
        if fail_times is not None:
            row["fail_times"] = fail_times

    def add_token_probs(self, prompt: str, probs: Mapping[str, float]) -> None:
        h = prompt_hash(prompt)
        if h in self._probs:
            if self._probs[h] != dict(probs):
                raise FixtureError(f"conflicting token_probs for the same prompt ({h})")
            return
        self._probs[h] = dict(probs)
        self.rows.append({"prompt_hash": h, "sample_index": None, "completion": None,
                          "token_probs": dict(probs)})

    def write(self, path: str | os.PathLike) -> None:
        from .corpus import write_jsonl

        write_jsonl(path, self.rows)

    def build(self, seed: int = 0, **kwargs) -> MockBackend:
        completions, probs = {}, {}
        for row in self.rows:
            if row["completion"] is not None or row.get("error"):
                completions[(row["prompt_hash"], row["sample_index"])] = _FixtureEntry(
                    row["completion"], row.get("error"), row.get("fail_times"))
            if row["token_probs"] is not None:
                probs[row["prompt_hash"]] = row["token_probs"]
        return MockBackend(completions, probs, seed=seed, **kwargs)


# -- http -------------------------------------------------------------------


def post_json(url: str, payload: Mapping[str, Any], headers: Mapping[str, str], timeout: float) -> Any:
    """POST JSON; 429/5xx/network failures are transient, other HTTP errors permanent."""
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body, method="POST",
                                 headers={"Content-Type": "application/json", **headers})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as e:
        if e.code == 429 or e.code >= 500:
            raise TransientBackendError(f"{url}: HTTP {e.code}") from None
        raise ContentRefusalError(f"{url}: HTTP {e.code}") from None
    except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
        raise TransientBackendError(f"{url}: {e}") from None
    except json.JSONDecodeError as e:
        raise TransientBackendError(f"{url}: invalid JSON response: {e}") from None


class HttpBackend(Backend):
    """JSON-over-HTTP adapter.

    ``POST {base_url}/complete`` takes ``{prompt, temperature, max_output_units,
    stop_sequences, seed, sample_index}`` and returns ``{text, truncated}``;
    ``POST {base_url}/next_token`` takes ``{prompt, tokens}`` and returns
    ``{probs: {token: p}}``.
    """

    def __init__(self, base_url: str, backend_id: str, api_key_env: str | None = None,
                 timeout: float = 60.0, supports_token_probs: bool = True):
        if not base_url:
            raise ConfigError(f"backend {backend_id!r}: base_url is required")
        self.base_url = base_url.rstrip("/")
        self.backend_id = backend_id
        self.timeout = timeout
        self.supports_token_probs = supports_token_probs
        self._headers = {}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if key is None:
                raise ConfigError(f"environment variable {api_key_env} is not set")
            self._headers["Authorization"] = f"Bearer {key}"

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        out = post_json(f"{self.base_url}/complete", {
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_output_units": request.max_output_units,
            "stop_sequences": list(request.stop_sequences),
            "seed": request.seed,
            "sample_index": request.sample_index,
        }, self._headers, self.timeout)
        if not isinstance(out, dict) or not isinstance(out.get("text"), str):
            raise TransientBackendError(f"{self.base_url}: malformed completion response")
        text = apply_stop_sequences(out["text"], request.stop_sequences)
        return CompletionResponse(text, self.backend_id, bool(out.get("truncated", False)))

    def next_token_probabilities(self, prompt: str, tokens: Sequence[str]) -> Mapping[str, float]:
        if not self.supports_token_probs:
            raise CapabilityError(self.backend_id, "next-token probabilities")
        out = post_json(f"{self.base_url}/next_token", {"prompt": prompt, "tokens": list(tokens)},
                        self._headers, self.timeout)
        if not isinstance(out, dict) or not isinstance(out.get("probs"), dict):
            raise TransientBackendError(f"{self.base_url}: malformed next_token response")
        return {t: float(out["probs"].get(t, 0.0)) for t in tokens}


# -- cache, limiter, gateway -----------------------------------------------


class DiskCache:
    """Content-addressed store: one immutable JSON file per cache-key digest."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, key: CacheKey) -> Path:
        d = key.digest()
        return self.root / d[:2] / f"{d}.json"

    def get(self, key: CacheKey) -> dict | None:
        p = self.path_for(key)
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            # Cannot happen via put(); treat a damaged entry as a miss.
            return None

    def put(self, key: CacheKey, payload: Mapping[str, Any]) -> None:
        p = self.path_for(key)
        if p.exists():
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(f".{p.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        try:
            os.link(tmp, p)  # first writer wins; entries are never overwritten
        except FileExistsError:
            pass
        finally:
            tmp.unlink()

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json"))


class RateLimiter:
    """Bounds concurrent requests and request starts per rolling second."""

    def __init__(self, max_inflight: int | None = None, per_second: float | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if max_inflight is not None and max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        if per_second is not None and per_second <= 0:
            raise ConfigError("per_second must be > 0")
        self._sem = threading.BoundedSemaphore(max_inflight) if max_inflight else None
        self.per_second = per_second
        self._starts: deque[float] = deque()
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def _wait_for_rate(self) -> None:
        if self.per_second is None:
            return
        budget = max(1, int(self.per_second))
        while True:
            with self._lock:
                now = self._clock()
                while self._starts and self._starts[0] <= now - 1.0:
                    self._starts.popleft()
                if len(self._starts) < budget:
                    self._starts.append(now)
                    return
                wait = self._starts[0] + 1.0 - now
            self._sleep(max(wait, 0.001))

    @contextmanager
    def slot(self):
        if self._sem is not None:
            self._sem.acquire()
        try:
            self._wait_for_rate()
            yield
        finally:
            if self._sem is not None:
                self._sem.release()


@dataclass
class Gateway:
    """A backend plus cache, retry policy and rate limiting.

    ``max_retries`` counts retries after the first attempt; the delay before
    retry ``n`` (0-based) is ``backoff_base * 2**n`` seconds.
    """

    backend: Backend
    cache: DiskCache | None = None
    max_retries: int = 2
    backoff_base: float = 0.5
    limiter: RateLimiter | None = None
    sleep: Callable[[float], None] = time.sleep
    _key_locks: dict = field(default_factory=dict, repr=False)
    _locks_guard: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def _lock_for(self, digest: str) -> threading.Lock:
        with self._locks_guard:
            return self._key_locks.setdefault(digest, threading.Lock())

    def _call(self, fn: Callable[[], Any]) -> Any:
        attempt = 0
        while True:
            try:
                if self.limiter is not None:
                    with self.limiter.slot():
                        return fn()
                return fn()
            except TransientBackendError as e:
                if attempt >= self.max_retries:
                    raise TransportError(
                        f"backend {self.backend_id!r}: gave up after {attempt + 1} attempts: {e}"
                    ) from e
                self.sleep(self.backoff_base * (2 ** attempt))
                attempt += 1

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        key = CacheKey(self.backend_id, prompt_hash(request.prompt), float(request.temperature),
                       request.seed, request.sample_index, COMPLETION)
        with self._lock_for(key.digest()):
            if self.cache is not None:
                hit = self.cache.get(key)
                if hit is not None:
                    return CompletionResponse(hit["text"], hit["backend_id"], hit["truncated"], hit["created_at"])
            resp = self._call(lambda: self.backend.complete(request))
            if resp.backend_id != self.backend_id:
                raise BackendError(f"response from {resp.backend_id!r} via handle {self.backend_id!r}")
            if resp.created_at is None:
                resp = CompletionResponse(resp.text, resp.backend_id, resp.truncated, self.backend.timestamp())
            if self.cache is not None:
                self.cache.put(key, {"text": resp.text, "backend_id": resp.backend_id,
                                     "truncated": resp.truncated, "created_at": resp.created_at})
            return resp

    def next_token_probabilities(self, prompt: str, candidate_tokens: Sequence[str]) -> TokenDistribution:
        tokens = tuple(candidate_tokens)
        if not tokens:
            raise ValueError("candidate_tokens must be non-empty")
        if len(set(tokens)) != len(tokens):
            raise ValueError(f"candidate_tokens must be distinct: {list(tokens)}")
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if not self.backend.supports_token_probs:
            raise CapabilityError(self.backend_id, "next-token probabilities")
        key = CacheKey(self.backend_id, prompt_hash(prompt), 0.0, 0, 0, NEXT_TOKEN, tokens)
        with self._lock_for(key.digest()):
            if self.cache is not None:
                hit = self.cache.get(key)
                if hit is not None:
                    return TokenDistribution(hit["entries"])
            raw = self._call(lambda: self.backend.next_token_probabilities(prompt, tokens))
            dist = TokenDistribution({t: float(raw.get(t, 0.0)) for t in tokens})
            if self.cache is not None:
                self.cache.put(key, {"entries": dict(dist.entries), "backend_id": self.backend_id,
                                     "created_at": self.backend.timestamp()})
            return dist

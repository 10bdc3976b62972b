"""Chat-completion client with retries, bounded concurrency and prefix grouping."""

from __future__ import annotations

import asyncio
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import httpx

from ..core import DPError

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class EndpointError(DPError):
    def __init__(self, status: int | None, message: str = ""):
        super().__init__(f"endpoint error {status}: {message}" if status else f"endpoint error: {message}")
        self.status = status


class RetriesExhausted(EndpointError):
    def __init__(self, attempts: int, last: Exception):
        status = getattr(last, "status", None)
        super().__init__(status, f"gave up after {attempts} attempts ({last})")
        self.attempts = attempts
        self.last = last


class Timeout(RetriesExhausted):
    """Every attempt timed out."""


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.35
    top_p: float = 0.9
    top_k: int = 20
    max_tokens: int = 1024

    def to_json(self) -> dict:
        return {"temperature": self.temperature, "top_p": self.top_p, "top_k": self.top_k,
                "max_tokens": self.max_tokens}


@dataclass(frozen=True)
class EndpointProfile:
    base_url: str
    model_name: str = "default"
    sampling: Sampling = field(default_factory=Sampling)
    prompt_wrapper: str | None = None  # e.g. "[INST] {prompt} [/INST]"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 8
    api_key: str | None = None
    backoff_base: float = 0.25
    backoff_factor: float = 2.0
    backoff_jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, prefix: str = "DPINSTRUCT", **kwargs) -> "EndpointProfile":
        """Profile whose URL and token come from ``<PREFIX>_ENDPOINT_URL`` / ``<PREFIX>_API_KEY``."""
        url = os.environ.get(f"{prefix}_ENDPOINT_URL", kwargs.pop("base_url", "http://127.0.0.1:8000"))
        key = os.environ.get(f"{prefix}_API_KEY", kwargs.pop("api_key", None))
        return cls(base_url=url, api_key=key, **kwargs)

    def with_env(self, prefix: str) -> "EndpointProfile":
        return replace(
            self,
            base_url=os.environ.get(f"{prefix}_ENDPOINT_URL", self.base_url),
            api_key=os.environ.get(f"{prefix}_API_KEY", self.api_key),
        )


@dataclass(frozen=True)
class CompletionRequest:
    system: str
    user_text: str
    overrides: dict = field(default_factory=dict, compare=False, hash=False)
    prefix: str | None = None  # instruction prefix shared by a batch
    key: str = ""

    def __post_init__(self) -> None:
        if self.prefix is not None and not self.prompt.startswith(self.prefix):
            raise ValueError("request prefix is not a prefix of its prompt")

    @property
    def prompt(self) -> str:
        return f"{self.system}\n{self.user_text}"

    @property
    def group_key(self) -> str:
        return self.prefix if self.prefix is not None else self.system


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: str = "stop"
    latency_ms: float = 0.0
    attempts: int = 1


@dataclass(frozen=True)
class RequestGroup:
    prefix: str
    indices: tuple[int, ...]
    requests: tuple[CompletionRequest, ...]


def batch_by_prefix(requests: Sequence[CompletionRequest]) -> list[RequestGroup]:
    """Partition requests by byte-equal instruction prefix.

    Groups appear in order of first occurrence and keep input order inside;
    ``indices`` map members back to their input positions.
    """
    order: dict[str, list[int]] = {}
    for i, req in enumerate(requests):
        order.setdefault(req.group_key, []).append(i)
    return [
        RequestGroup(prefix, tuple(idx), tuple(requests[i] for i in idx))
        for prefix, idx in order.items()
    ]


def flatten_groups(groups: Sequence[RequestGroup]) -> list[int]:
    return [i for g in groups for i in g.indices]


def ungroup(groups: Sequence[RequestGroup], results: Sequence) -> list:
    """Put per-request ``results`` (in flattened group order) back into input order."""
    positions = flatten_groups(groups)
    if len(positions) != len(results):
        raise ValueError("result count does not match the grouping")
    out: list = [None] * len(positions)
    for pos, res in zip(positions, results):
        out[pos] = res
    return out


# One limiter per (url, model, limit): the in-flight cap holds across
# threads and event loops that share a profile.
_LIMITERS: dict[tuple, threading.BoundedSemaphore] = {}
_LIMITERS_LOCK = threading.Lock()


def _limiter(profile: EndpointProfile) -> threading.BoundedSemaphore:
    key = (profile.base_url, profile.model_name, profile.max_in_flight)
    with _LIMITERS_LOCK:
        if key not in _LIMITERS:
            _LIMITERS[key] = threading.BoundedSemaphore(profile.max_in_flight)
        return _LIMITERS[key]


async def _acquire(sem: threading.BoundedSemaphore) -> None:
    if sem.acquire(blocking=False):
        return
    fut = asyncio.ensure_future(asyncio.to_thread(sem.acquire))
    try:
        await asyncio.shield(fut)
    except asyncio.CancelledError:
        fut.add_done_callback(lambda _: sem.release())
        raise


class ChatClient:
    """Sends chat-completion requests for one endpoint profile.

    ``transport`` lets tests route requests to an in-process ASGI app.
    Responses always come back in request order.
    """

    def __init__(self, profile: EndpointProfile, transport: httpx.AsyncBaseTransport | None = None,
                 rng: random.Random | None = None):
        self.profile = profile
        self.transport = transport
        self._sem = _limiter(profile)
        self._rng = rng or random.Random()

    def _body(self, request: CompletionRequest) -> dict:
        p = self.profile
        user = request.user_text
        if p.prompt_wrapper:
            user = p.prompt_wrapper.replace("{prompt}", user)
        body = {
            "model": p.model_name,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": user},
            ],
            **p.sampling.to_json(),
        }
        body.update(request.overrides)
        return body

    def _headers(self) -> dict:
        if self.profile.api_key:
            return {"Authorization": f"Bearer {self.profile.api_key}"}
        return {}

    def _backoff(self, attempt: int) -> float:
        p = self.profile
        delay = p.backoff_base * p.backoff_factor ** attempt
        return delay * (1 + p.backoff_jitter * self._rng.random())

    async def _send(self, http: httpx.AsyncClient, request: CompletionRequest) -> CompletionResponse:
        body = self._body(request)
        last: Exception | None = None
        timeouts = 0
        attempts = self.profile.max_retries + 1
        for attempt in range(attempts):
            if attempt:
                await asyncio.sleep(self._backoff(attempt - 1))
            start = time.perf_counter()
            await _acquire(self._sem)
            try:
                resp = await http.post("/v1/chat/completions", json=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                last, timeouts = exc, timeouts + 1
                continue
            except httpx.TransportError as exc:
                last = EndpointError(None, f"transport failure: {exc}")
                continue
            finally:
                self._sem.release()
            latency = (time.perf_counter() - start) * 1000
            if resp.status_code == 200:
                return _decode(resp, latency, attempt + 1)
            err = EndpointError(resp.status_code, resp.text[:200])
            if resp.status_code not in RETRYABLE_STATUS:
                raise err
            last = err
            log.debug("retryable status %s (attempt %d)", resp.status_code, attempt + 1)
        if timeouts == attempts:
            raise Timeout(attempts, last)
        raise RetriesExhausted(attempts, last)

    def _http(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(
            base_url=self.profile.base_url,
            transport=self.transport,
            timeout=self.profile.timeout,
            limits=httpx.Limits(max_connections=self.profile.max_in_flight),
        )

    async def acomplete_many(self, requests: Sequence[CompletionRequest]) -> list:
        """Completions in request order; failures are returned as exception objects."""
        async with self._http() as http:
            return await asyncio.gather(*(self._send(http, r) for r in requests), return_exceptions=True)

    async def acomplete(self, request: CompletionRequest) -> CompletionResponse:
        async with self._http() as http:
            return await self._send(http, request)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        return asyncio.run(self.acomplete(request))

    def complete_many(self, requests: Sequence[CompletionRequest]) -> list:
        if not requests:
            return []
        results = asyncio.run(self.acomplete_many(requests))
        for r in results:
            if isinstance(r, BaseException) and not isinstance(r, Exception):
                raise r
        return results

    def complete_grouped(self, requests: Sequence[CompletionRequest]) -> list:
        """Send requests group by group (shared prefix first), return them in input order."""
        groups = batch_by_prefix(requests)
        flat = [r for g in groups for r in g.requests]
        return ungroup(groups, self.complete_many(flat))


def complete(profile: EndpointProfile, request: CompletionRequest, transport=None) -> CompletionResponse:
    return ChatClient(profile, transport).complete(request)


def _decode(resp: httpx.Response, latency: float, attempts: int) -> CompletionResponse:
    try:
        choice = resp.json()["choices"][0]
        text = choice["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise EndpointError(resp.status_code, "malformed completion body") from None
    return CompletionResponse(text or "", choice.get("finish_reason") or "stop", latency, attempts)

"""Deterministic chat-completion backend for tests and offline runs.

Modes:
  echo   -- reply with the user message
  replay -- reply with a recorded text keyed by the prompt hash
  rule   -- answer like a perfect model: follow a "Hint:" line if present,
            otherwise look the gold label up by prompt hash or by the
            instance text the prompt contains

The prompt hash is sha256 over ``system + "\\n" + user``.
"""

from __future__ import annotations

import asyncio
import re
import socket
import threading
from dataclasses import dataclass, field

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..core import DPError
from ..serializer import FINAL_LINE_INSTRUCTION, prompt_hash

_HINT = re.compile(r'^Hint: the final answer is "(?P<answer>.*)"$', re.MULTILINE)


class BindError(DPError):
    pass


def teacher_reasoning(user_text: str, answer: str) -> str:
    """A canned explanation that ends with the answer line, used for simulated teachers."""
    return (
        "To decide, I weigh each clue given in the question against the others, checking "
        "whether the evidence agrees or conflicts and which details carry the most weight.\n"
        "Taken together, that comparison supports one conclusion over the alternative.\n"
        f"Final answer: {answer}"
    )


@dataclass
class RuleOracle:
    """Gold answers for rule mode."""

    by_hash: dict[str, str] = field(default_factory=dict)
    # (text found in the prompt, answer); the match nearest the end wins
    by_text: list[tuple[str, str]] = field(default_factory=list)

    def lookup(self, prompt: str) -> str | None:
        if (h := prompt_hash(prompt)) in self.by_hash:
            return self.by_hash[h]
        best = None
        for needle, answer in self.by_text:
            pos = prompt.rfind(needle)
            if pos >= 0 and (best is None or pos + len(needle) > best[0]):
                best = (pos + len(needle), answer)
        return best[1] if best else None


@dataclass
class MockConfig:
    mode: str = "echo"
    replay: dict[str, str] = field(default_factory=dict)
    replay_fallback: str | None = None  # None -> 404 for unknown prompts
    oracle: RuleOracle = field(default_factory=RuleOracle)
    rule_fallback: str = "No"
    fail_first: int = 0  # answer this many requests with fail_status first
    fail_status: int = 500
    delay: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("echo", "replay", "rule"):
            raise ValueError(f"unknown mock mode {self.mode!r}")


class MockState:
    """Request counters shared by all handlers of one app."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.requests = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.prompts: list[str] = []

    def enter(self, prompt: str) -> int:
        with self.lock:
            self.requests += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.prompts.append(prompt)
            return self.requests

    def leave(self) -> None:
        with self.lock:
            self.in_flight -= 1

    def snapshot(self) -> dict:
        with self.lock:
            return {"requests": self.requests, "in_flight": self.in_flight,
                    "max_in_flight": self.max_in_flight}


def answer_for(config: MockConfig, system: str, user: str) -> str | None:
    prompt = f"{system}\n{user}"
    if config.mode == "echo":
        return user
    if config.mode == "replay":
        return config.replay.get(prompt_hash(prompt), config.replay_fallback)
    hint = _HINT.search(user)
    if hint:
        return teacher_reasoning(user, hint.group("answer"))
    label = config.oracle.lookup(prompt)
    if label is None:
        label = config.rule_fallback
    if FINAL_LINE_INSTRUCTION in user:
        return teacher_reasoning(user, label)
    return label


def create_app(config: MockConfig, state: MockState | None = None) -> FastAPI:
    app = FastAPI(title="chat-completion mock")
    app.state.mock = state or MockState()
    app.state.config = config

    @app.get("/health")
    async def health():
        return {"status": "ok", "mode": config.mode}

    @app.get("/stats")
    async def stats():
        return app.state.mock.snapshot()

    @app.post("/v1/chat/completions")
    async def completions(request: Request):
        body = await request.json()
        messages = body.get("messages") or []
        system = next((m["content"] for m in messages if m.get("role") == "system"), "")
        user = next((m["content"] for m in reversed(messages) if m.get("role") == "user"), "")
        st: MockState = app.state.mock
        n = st.enter(f"{system}\n{user}")
        try:
            if config.delay:
                await asyncio.sleep(config.delay)
            if n <= config.fail_first:
                return JSONResponse({"error": "injected failure"}, status_code=config.fail_status)
            text = answer_for(config, system, user)
            if text is None:
                return JSONResponse({"error": "unknown prompt"}, status_code=404)
            return {
                "model": body.get("model", "mock"),
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                             "finish_reason": "stop"}],
            }
        finally:
            st.leave()

    return app


class MockHandle:
    """A mock server running on a background thread."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, host: str, port: int, state: MockState):
        self.server = server
        self.thread = thread
        self.host = host
        self.port = port
        self.state = state

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self, timeout: float = 5.0) -> None:
        self.server.should_exit = True
        self.thread.join(timeout)

    def __enter__(self) -> "MockHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def bind_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise BindError(f"cannot bind {host}:{port}: {exc.strerror}") from None
    return sock


def mock_serve(config: MockConfig, host: str = "127.0.0.1", port: int = 0) -> MockHandle:
    """Start the mock on a thread; ``port=0`` picks a free port."""
    sock = bind_socket(host, port)
    state = MockState()
    server = uvicorn.Server(uvicorn.Config(create_app(config, state), log_level="warning"))
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True)
    thread.start()
    while not server.started and thread.is_alive():
        threading.Event().wait(0.01)
    return MockHandle(server, thread, host, sock.getsockname()[1], state)

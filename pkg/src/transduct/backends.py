"""Completion providers: a deterministic mock and an HTTP chat-completions client."""

from __future__ import annotations

import asyncio
import hashlib
import json
import os
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .context import LLMConfig
from .errors import BackendError, FaultInjected, RateLimited, Timeout, TransportError
from .prompt import RenderedPrompt, canonical_json
from .schema import Kind, SlotType, TypeSchema


@dataclass
class AuditRecord:
    seq: int
    prompt_hash: str
    mode: str
    in_flight: int
    latency: float = 0.0
    outcome: str = "pending"
    prompt: RenderedPrompt | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"seq": self.seq, "prompt_hash": self.prompt_hash, "mode": self.mode,
                "latency": round(self.latency, 6), "outcome": self.outcome}


class AuditLog:
    """Thread-safe log of every backend call."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[AuditRecord] = []
        self._in_flight = 0
        self.max_in_flight = 0

    def start(self, prompt: RenderedPrompt, mode: str) -> AuditRecord:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
            rec = AuditRecord(len(self.records), prompt.digest(), mode, self._in_flight, prompt=prompt)
            self.records.append(rec)
            return rec

    def finish(self, rec: AuditRecord, outcome: str, latency: float) -> None:
        with self._lock:
            self._in_flight -= 1
            rec.outcome = outcome
            rec.latency = latency

    def clear(self) -> None:
        with self._lock:
            self.records.clear()
            self.max_in_flight = 0

    def __len__(self) -> int:
        return len(self.records)

    def prompts(self) -> list[RenderedPrompt]:
        return [r.prompt for r in self.records]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in list(self.records):
                fh.write(json.dumps(rec.to_json()) + "\n")


class TransducerBackend:
    """Maps a rendered prompt and a target schema to raw model text.

    Subclasses implement :meth:`_complete`; :meth:`complete_batch` may be
    overridden to model batch-level failures.
    """

    def __init__(self):
        self.audit = AuditLog()

    async def _complete(self, prompt: RenderedPrompt, target: TypeSchema, cfg: LLMConfig) -> str:
        raise NotImplementedError

    async def complete(self, prompt: RenderedPrompt, target: TypeSchema, cfg: LLMConfig,
                       *, mode: str = "single") -> str:
        rec = self.audit.start(prompt, mode)
        t0 = time.perf_counter()
        try:
            out = await self._complete_mode(prompt, target, cfg, mode)
        except BaseException as exc:
            self.audit.finish(rec, type(exc).__name__, time.perf_counter() - t0)
            raise
        self.audit.finish(rec, "ok", time.perf_counter() - t0)
        return out

    async def _complete_mode(self, prompt, target, cfg, mode):
        return await self._complete(prompt, target, cfg)

    async def complete_batch(self, prompts: Sequence[RenderedPrompt], target: TypeSchema,
                             cfg: LLMConfig) -> list[str | BaseException]:
        """Run all prompts concurrently; per-item errors come back as values."""
        return await asyncio.gather(
            *(self.complete(p, target, cfg, mode="batch") for p in prompts),
            return_exceptions=True)


def backend_complete(prompt: RenderedPrompt, cfg: LLMConfig,
                     target: TypeSchema, backend: TransducerBackend | None = None) -> str:
    """Synchronous single completion."""
    backend = backend or backend_for(cfg)
    return asyncio.run(backend.complete(prompt, target, cfg))


# -- mock --------------------------------------------------------------------

@dataclass(frozen=True)
class FaultPlan:
    """Deterministic failure injection for :class:`MockBackend`.

    fail_batches: indices of batch calls (0-based, in call order) that fail
        as a whole; ``None`` means no batch fails, ``"all"`` means every one.
    item_failure_rate: fraction of items failing inside an otherwise healthy
        batch, chosen by a keyed hash of the prompt.
    single_failures: number of single-item attempts per prompt that fail
        before one succeeds; ``-1`` fails forever.
    """

    fail_batches: frozenset[int] | str | None = None
    item_failure_rate: float = 0.0
    single_failures: int = 0
    seed: int = 0

    def batch_fails(self, index: int) -> bool:
        if self.fail_batches == "all":
            return True
        return self.fail_batches is not None and index in self.fail_batches


def _schema_fingerprint(schema: TypeSchema) -> str:
    return hashlib.sha256(repr(schema.structure()).encode()).hexdigest()[:16]


def _unit(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "big")


Responder = Callable[[RenderedPrompt, TypeSchema, LLMConfig], "str | Mapping | None"]


class MockBackend(TransducerBackend):
    """Deterministic stand-in for a model.

    Every slot value is derived from a keyed hash of (prompt, slot path,
    seed). ``script`` entries ``(needle, response)`` override that for any
    prompt whose user text contains ``needle``; ``responder`` is consulted
    first and may return ``None`` to fall through.
    """

    def __init__(self, seed: int | None = None, *, latency: float = 0.0,
                 script: Sequence[tuple[str, Any]] | Mapping[str, Any] | None = None,
                 responder: Responder | None = None, faults: FaultPlan | None = None):
        super().__init__()
        self.seed = seed
        self.latency = latency
        if isinstance(script, Mapping):
            script = list(script.items())
        self.script = list(script or [])
        self.responder = responder
        self.faults = faults or FaultPlan()
        self._lock = threading.Lock()
        self._batch_calls = 0
        self._single_attempts: dict[str, int] = {}

    def response_for(self, prompt: RenderedPrompt, target: TypeSchema, cfg: LLMConfig) -> str:
        if self.responder is not None:
            out = self.responder(prompt, target, cfg)
            if out is not None:
                return out if isinstance(out, str) else canonical_json(out)
        for needle, response in self.script:
            if needle in prompt.user_text:
                return response if isinstance(response, str) else canonical_json(response)
        seed = cfg.seed if self.seed is None else self.seed
        key = f"{seed}|{_schema_fingerprint(target)}|{prompt.digest()}"
        return canonical_json(self._record(target, key))

    def _record(self, schema: TypeSchema, key: str) -> dict:
        return {s.name: self._value(s.stype, f"{key}|{s.name}") for s in schema.slots}

    def _value(self, stype: SlotType, key: str) -> Any:
        h = _unit(key)
        kind = stype.kind
        if kind is Kind.TEXT:
            return f"v{h % 16**8:08x}"
        if kind is Kind.INTEGER:
            return h % 1000
        if kind is Kind.REAL:
            return (h % 10001) / 10000
        if kind is Kind.BOOLEAN:
            return bool(h & 1)
        if kind is Kind.ENUM:
            return stype.allowed_values[h % len(stype.allowed_values)]
        if kind is Kind.LIST:
            return [self._value(stype.element, f"{key}[{i}]") for i in range(h % 3)]
        return self._record(stype.inner, key)

    async def _complete_mode(self, prompt, target, cfg, mode):
        digest = prompt.digest()
        if mode == "single":
            with self._lock:
                n = self._single_attempts.get(digest, 0)
                self._single_attempts[digest] = n + 1
            limit = self.faults.single_failures
            if limit < 0 or n < limit:
                raise FaultInjected(f"single attempt {n} failed by plan")
        elif self.faults.item_failure_rate > 0:
            u = _unit(f"{self.faults.seed}|item|{digest}") / 2**64
            if u < self.faults.item_failure_rate:
                raise FaultInjected("item failed by plan")
        if self.latency:
            await asyncio.sleep(self.latency)
        return self.response_for(prompt, target, cfg)

    async def complete_batch(self, prompts, target, cfg):
        with self._lock:
            index = self._batch_calls
            self._batch_calls += 1
        if self.faults.batch_fails(index):
            raise FaultInjected(f"batch {index} failed by plan")
        return await super().complete_batch(prompts, target, cfg)


# -- http --------------------------------------------------------------------

class HTTPBackend(TransducerBackend):
    """OpenAI-style ``POST <endpoint>/chat/completions`` client."""

    def __init__(self, endpoint: str | None = None):
        super().__init__()
        self.endpoint = endpoint

    def request_body(self, prompt: RenderedPrompt, cfg: LLMConfig) -> dict:
        messages = []
        if prompt.system_text:
            messages.append({"role": "system", "content": prompt.system_text})
        messages.append({"role": "user", "content": prompt.user_text})
        body = {"model": cfg.model_id, "messages": messages,
                "temperature": cfg.temperature, "max_tokens": cfg.max_output_tokens,
                "seed": cfg.seed}
        if cfg.json_response_format:
            body["response_format"] = {"type": "json_object"}
        return body

    async def _complete(self, prompt, target, cfg):
        import httpx

        base = (self.endpoint or cfg.endpoint or os.environ.get("TRANSDUCT_BASE_URL", "")).rstrip("/")
        if not base:
            raise TransportError("no endpoint configured")
        headers = {}
        token = os.environ.get(cfg.auth_token_env) if cfg.auth_token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            async with httpx.AsyncClient(timeout=cfg.timeout) as client:
                resp = await client.post(f"{base}/chat/completions",
                                         json=self.request_body(prompt, cfg), headers=headers)
        except httpx.TimeoutException as exc:
            raise Timeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited(resp.text[:200])
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {resp.text[:200]}") from exc


def backend_for(cfg: LLMConfig) -> TransducerBackend:
    if cfg.backend == "http":
        return HTTPBackend()
    return MockBackend()


__all__ = ["AuditLog", "AuditRecord", "BackendError", "FaultPlan", "HTTPBackend",
           "MockBackend", "TransducerBackend", "backend_complete", "backend_for"]

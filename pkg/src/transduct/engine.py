"""The transduction operator: prompt, call, decode, batch, recover."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from .agentic import AgenticInstance, merge_overlay, rebind
from .backends import TransducerBackend
from .context import ExecutionContext
from .errors import (BackendError, MalformedOutput, OverlapError, ShapeMismatch,
                     TransductError, UnknownSlot, ValidationError)
from .prompt import RenderedPrompt, compose_prompt, render_fewshot
from .schema import TypeSchema, is_empty_state, validate_state

log = logging.getLogger(__name__)

OK = "ok"
RECOVERED = "recovered_via_fallback"
FAILED = "failed"

Source = Union[Mapping, str]


@dataclass
class ItemReport:
    index: int
    outcome: str = FAILED
    attempts: int = 0
    latency: float = 0.0
    raw_output: str = ""
    error: str = ""

    def to_json(self) -> dict:
        out = {"index": self.index, "outcome": self.outcome, "attempts": self.attempts,
               "latency": round(self.latency, 6), "raw_output": self.raw_output}
        if self.error:
            out["error"] = self.error
        return out


@dataclass
class TransductionReport:
    items: list[ItemReport] = field(default_factory=list)
    batches: int = 0
    failed_batches: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def count(self, outcome: str) -> int:
        return sum(1 for it in self.items if it.outcome == outcome)

    @property
    def failed(self) -> int:
        return self.count(FAILED)

    @property
    def recovered(self) -> int:
        return self.count(RECOVERED)

    def extend(self, other: TransductionReport) -> None:
        self.items.extend(other.items)
        self.batches += other.batches
        self.failed_batches.extend(other.failed_batches)
        self.notes.extend(other.notes)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for item in self.items:
                fh.write(json.dumps(item.to_json(), ensure_ascii=False) + "\n")


# -- decoding ----------------------------------------------------------------

_decoder = json.JSONDecoder()


def _first_object(raw: str) -> dict:
    idx = raw.find("{")
    while idx != -1:
        try:
            obj, _ = _decoder.raw_decode(raw, idx)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        idx = raw.find("{", idx + 1)
    raise MalformedOutput(f"no JSON object in output: {raw[:80]!r}")


def decode_structured(raw: str, target: TypeSchema) -> dict:
    """Pull the first JSON object out of ``raw`` and validate it against ``target``.

    Keys that match a slot name only case-insensitively are renamed first.
    """
    obj = _first_object(raw)
    lowered = {n.lower(): n for n in target.names}
    fixed = {}
    for key, value in obj.items():
        if key not in target and isinstance(key, str) and key.lower() in lowered:
            name = lowered[key.lower()]
            if name not in obj:
                key = name
        fixed[key] = value
    return validate_state(target, fixed)


# -- execution ---------------------------------------------------------------

def _repair_prompt(prompt: RenderedPrompt, error: Exception) -> RenderedPrompt:
    note = (f"The previous output was invalid: {error}. "
            "Return only a corrected JSON object.")
    return RenderedPrompt(prompt.system_text, prompt.user_text + "\n" + note,
                          prompt.target_schema_block, prompt.fewshot_block)


async def _decode_or_repair(backend, prompt, raw, target, ctx, mode) -> tuple[dict, str]:
    try:
        return decode_structured(raw, target), raw
    except (MalformedOutput, ValidationError) as exc:
        raw = await backend.complete(_repair_prompt(prompt, exc), target, ctx.llm, mode=mode)
        return decode_structured(raw, target), raw


async def afallback_recover(
    items: Sequence[tuple[int, RenderedPrompt]],
    target: TypeSchema,
    ctx: ExecutionContext,
    backend: TransducerBackend,
    reports: Mapping[int, ItemReport],
) -> dict[int, dict]:
    """Retry each item on its own, one after another.

    Each item gets up to ``ctx.max_retries_per_item`` further attempts
    with a fixed backoff of ``retry_backoff * attempt`` seconds.
    """
    recovered = {}
    for index, prompt in items:
        rep = reports[index]
        t0 = time.perf_counter()
        for attempt in range(1, ctx.max_retries_per_item + 1):
            if ctx.retry_backoff:
                await asyncio.sleep(ctx.retry_backoff * attempt)
            rep.attempts += 1
            try:
                raw = await backend.complete(prompt, target, ctx.llm, mode="single")
                state, raw = await _decode_or_repair(backend, prompt, raw, target, ctx, "single")
            except (BackendError, MalformedOutput, ValidationError) as exc:
                rep.error = f"{type(exc).__name__}: {exc}"
                continue
            recovered[index] = state
            rep.outcome, rep.raw_output, rep.error = RECOVERED, raw, ""
            break
        rep.latency += time.perf_counter() - t0
    return recovered


async def _run_batch(batch, target, ctx, backend, reports, outputs, report, batch_no):
    prompts = [p for _, p in batch]
    t0 = time.perf_counter()
    batch_exc = None
    try:
        raws = await backend.complete_batch(prompts, target, ctx.llm)
    except BackendError as exc:
        batch_exc = exc
        raws = [exc] * len(batch)

    async def settle(index, prompt, raw):
        rep = reports[index]
        rep.attempts += 1
        if isinstance(raw, BaseException):
            if not isinstance(raw, BackendError):
                raise raw
            rep.error = f"{type(raw).__name__}: {raw}"
            return
        try:
            state, raw = await _decode_or_repair(backend, prompt, raw, target, ctx, "batch")
        except (BackendError, MalformedOutput, ValidationError) as exc:
            rep.error = f"{type(exc).__name__}: {exc}"
            rep.raw_output = raw
            return
        outputs[index] = state
        rep.outcome, rep.raw_output = OK, raw

    await asyncio.gather(*(settle(i, p, r) for (i, p), r in zip(batch, raws)))
    elapsed = time.perf_counter() - t0
    for i, _ in batch:
        reports[i].latency = elapsed

    errored = [(i, p) for i, p in batch if reports[i].outcome != OK]
    if batch_exc is not None or len(errored) * 2 > len(batch):
        report.failed_batches.append(batch_no)
    if errored:
        log.info("batch %d: %d of %d items need fallback", batch_no, len(errored), len(batch))
        outputs.update(await afallback_recover(errored, target, ctx, backend, reports))


def _build_prompts(target, items, ctx, source_schema, fewshot):
    block = render_fewshot(fewshot, source_schema, target) if fewshot else ""
    prompts = []
    for item in items:
        memory = tuple(ctx.memory_hook(item)) if ctx.memory_hook else ()
        prompts.append(compose_prompt(ctx.template, item, target, source=source_schema,
                                      fewshot_block=block, instructions=ctx.instructions,
                                      memory=memory))
    return prompts


async def atransduce(
    target: TypeSchema,
    sources: AgenticInstance | Sequence[Source],
    ctx: ExecutionContext | None = None,
    *,
    source_schema: TypeSchema | None = None,
    fewshot: Sequence[tuple[Mapping, Mapping]] | None = None,
) -> tuple[AgenticInstance, TransductionReport]:
    """Transduce every source into a state of ``target``.

    Sources run in chunks of ``ctx.batch_size`` with every call of a chunk
    in flight at once; outputs are returned in input order. Items that
    still fail after fallback come back as empty states and are marked
    ``failed`` in the report.
    """
    if isinstance(sources, AgenticInstance):
        ctx = ctx or sources.context
        source_schema = source_schema or sources.atype
        items = list(sources.states)
    else:
        items = list(sources)
    ctx = ctx or ExecutionContext()
    backend = ctx.resolve_backend()
    pairs = ctx.fewshot if fewshot is None else tuple(fewshot)
    prompts = _build_prompts(target, items, ctx, source_schema, pairs)

    report = TransductionReport()
    reports = {i: ItemReport(i) for i in range(len(items))}
    outputs: dict[int, dict] = {}
    indexed = list(enumerate(prompts))
    bs = ctx.batch_size
    for batch_no, start in enumerate(range(0, len(indexed), bs)):
        await _run_batch(indexed[start:start + bs], target, ctx, backend,
                         reports, outputs, report, batch_no)
        report.batches += 1
    report.items = [reports[i] for i in range(len(items))]
    states = tuple(outputs.get(i, {}) for i in range(len(items)))
    return AgenticInstance(target, states, ctx), report


def _run(coro):
    return asyncio.run(coro)


def transduce(target, sources, ctx=None, **kwargs) -> tuple[AgenticInstance, TransductionReport]:
    """Blocking form of :func:`atransduce`."""
    return _run(atransduce(target, sources, ctx, **kwargs))


async def afew_shot_transduce(
    target: AgenticInstance, source: AgenticInstance, ctx: ExecutionContext | None = None,
) -> tuple[AgenticInstance, TransductionReport]:
    """Fill the empty target states, using the non-empty ones as examples."""
    if len(target) != len(source):
        raise ShapeMismatch(f"{len(target)} targets for {len(source)} sources")
    ctx = ctx or target.context
    todo = [i for i, s in enumerate(target.states) if is_empty_state(s)]
    if not todo:
        return target, TransductionReport()
    pairs = [(source.states[i], target.states[i])
             for i, s in enumerate(target.states) if not is_empty_state(s)]
    notes = []
    if not pairs:
        pairs = list(ctx.fewshot)
        if not pairs:
            notes.append("NoExamples: no filled targets and no context few-shots; ran zero-shot")
    out, report = await atransduce(target.atype, [source.states[i] for i in todo], ctx,
                                   source_schema=source.atype, fewshot=pairs)
    report.notes.extend(notes)
    states = list(target.states)
    for k, i in enumerate(todo):
        states[i] = out.states[k]
        report.items[k].index = i
    return target.with_states(states), report


def few_shot_transduce(target, source, ctx=None):
    return _run(afew_shot_transduce(target, source, ctx))


def _check_self_slots(x: AgenticInstance, input_slots, output_slots) -> None:
    for name in list(input_slots) + list(output_slots):
        if name not in x.atype:
            raise UnknownSlot(f"{x.atype.name!r} has no slot {name!r}")
    both = set(input_slots) & set(output_slots)
    if both:
        raise OverlapError(f"slots used as both input and output: {sorted(both)}")


async def aself_transduce(
    x: AgenticInstance,
    input_slots: Sequence[str],
    output_slots: Sequence[str],
    instructions: str | None = None,
    ctx: ExecutionContext | None = None,
    *,
    fewshot: bool = False,
) -> tuple[AgenticInstance, TransductionReport]:
    """Transduce ``x[input_slots]`` into ``x[output_slots]`` and merge it back.

    With ``fewshot=True`` rows whose outputs are already filled are kept
    and serve as examples for the rest.
    """
    _check_self_slots(x, input_slots, output_slots)
    if not output_slots:
        return x, TransductionReport()
    ctx = ctx or x.context
    if instructions is not None:
        ctx = ctx.with_(instructions=instructions)
    src = rebind(x, input_slots)
    tgt = rebind(x, output_slots)
    if fewshot:
        out, report = await afew_shot_transduce(tgt.with_context(ctx), src, ctx)
    else:
        out, report = await atransduce(tgt.atype, src, ctx)
    return merge_overlay(x, out), report


def self_transduce(x, input_slots, output_slots, instructions=None, ctx=None, **kwargs):
    return _run(aself_transduce(x, input_slots, output_slots, instructions, ctx, **kwargs))


__all__ = ["FAILED", "OK", "RECOVERED", "ItemReport", "TransductionReport", "TransductError",
           "afallback_recover", "afew_shot_transduce", "aself_transduce", "atransduce",
           "decode_structured", "few_shot_transduce", "self_transduce", "transduce"]

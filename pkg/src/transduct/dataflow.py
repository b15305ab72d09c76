"""Asynchronous map/reduce over agentic instances and declarative pipelines."""

from __future__ import annotations

import asyncio
import importlib
import inspect
import logging
import random
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agentic import AgenticInstance, product, quotient, rebind
from .context import ExecutionContext
from .engine import TransductionReport, aself_transduce, atransduce
from .errors import (ItemError, NonConvergence, OverlapError, ReduceError, StageError,
                     TransductError)
from .schema import TypeSchema, schema_product, validate_state

log = logging.getLogger(__name__)

MapFn = Callable[[dict], Any]
ReduceFn = Callable[[list], Any]

MAX_REDUCE_ROUNDS = 64


async def _call(fn: Callable, arg: Any) -> Any:
    if inspect.iscoroutinefunction(fn):
        return await fn(arg)
    result = await asyncio.to_thread(fn, arg)
    if inspect.isawaitable(result):
        result = await result
    return result


def _as_states(result: Any, schema: TypeSchema, what: str) -> list[dict]:
    if not isinstance(result, (list, tuple)):
        raise TypeError(f"{what} must return a list of states, got {type(result).__name__}")
    return [validate_state(schema, s) for s in result]


async def aamap(x: AgenticInstance, f: MapFn, out_schema: TypeSchema | None = None, *,
                concurrency: int = 16, strict: bool = True,
                dropped: list[ItemError] | None = None) -> AgenticInstance:
    """Apply ``f`` to every state with at most ``concurrency`` in flight.

    ``f`` returns a list per state: empty filters it out, several fan it
    out. Groups are concatenated in input order. In lenient mode
    (``strict=False``) failing items are dropped and appended to
    ``dropped`` instead of raising.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    out_schema = out_schema or x.atype
    sem = asyncio.Semaphore(concurrency)

    async def one(i: int, state: dict):
        async with sem:
            try:
                return _as_states(await _call(f, state), out_schema, "map function")
            except Exception as exc:  # noqa: BLE001 - reported with provenance
                return ItemError(i, exc)

    results = await asyncio.gather(*(one(i, s) for i, s in enumerate(x.states)))
    states: list[dict] = []
    for res in results:
        if isinstance(res, ItemError):
            if strict:
                raise res
            log.warning("amap dropped %s", res)
            if dropped is not None:
                dropped.append(res)
            continue
        states.extend(res)
    return AgenticInstance(out_schema, tuple(states), x.context)


def amap(x, f, out_schema=None, **kwargs) -> AgenticInstance:
    return asyncio.run(aamap(x, f, out_schema, **kwargs))


async def aareduce(x: AgenticInstance, f: ReduceFn,
                   out_schema: TypeSchema | None = None) -> AgenticInstance:
    out_schema = out_schema or x.atype
    try:
        states = _as_states(await _call(f, list(x.states)), out_schema, "reduce function")
    except Exception as exc:
        raise ReduceError(f"reduce failed: {exc!r}") from exc
    return AgenticInstance(out_schema, tuple(states), x.context)


def areduce(x, f, out_schema=None) -> AgenticInstance:
    return asyncio.run(aareduce(x, f, out_schema))


async def ahierarchical_reduce(x: AgenticInstance, f: ReduceFn, chunk: int,
                               out_schema: TypeSchema | None = None, *,
                               shuffle_seed: int | None = None) -> AgenticInstance:
    """Reduce chunks of at most ``chunk`` states, concatenate, repeat.

    Chunking is contiguous unless ``shuffle_seed`` is given, in which case
    states are shuffled with that seed before every round.
    """
    if chunk < 2:
        raise ValueError("chunk must be >= 2")
    rng = random.Random(shuffle_seed) if shuffle_seed is not None else None
    current = x
    for _ in range(MAX_REDUCE_ROUNDS):
        if len(current) <= chunk:
            return await aareduce(current, f, out_schema)
        states = list(current.states)
        if rng is not None:
            rng.shuffle(states)
        parts = [current.with_states(states[i:i + chunk]) for i in range(0, len(states), chunk)]
        reduced = await asyncio.gather(*(aareduce(p, f, out_schema) for p in parts))
        merged = tuple(s for r in reduced for s in r.states)
        if len(merged) >= len(current):
            raise NonConvergence(f"reduction did not shrink {len(current)} states")
        current = AgenticInstance(reduced[0].atype, merged, x.context)
    raise NonConvergence(f"no convergence after {MAX_REDUCE_ROUNDS} rounds")


def hierarchical_reduce(x, f, chunk, out_schema=None, **kwargs) -> AgenticInstance:
    return asyncio.run(ahierarchical_reduce(x, f, chunk, out_schema, **kwargs))


def transducer_fn(target: TypeSchema, ctx: ExecutionContext | None = None,
                  source_schema: TypeSchema | None = None) -> MapFn:
    """A map function that transduces each state into ``target``."""

    async def f(state: dict) -> list[dict]:
        out, report = await atransduce(target, [state], ctx, source_schema=source_schema)
        return [] if report.failed else list(out.states)

    return f


# -- pipelines ---------------------------------------------------------------

FUNCTIONS: dict[str, Callable] = {
    "identity": lambda s: [s],
    "count": lambda states: [{"count": len(states)}],
}


def register_function(name: str, fn: Callable | None = None):
    """Register ``fn`` under ``name`` for use in pipeline documents (usable as decorator)."""
    def deco(f):
        FUNCTIONS[name] = f
        return f
    return deco(fn) if fn is not None else deco


def resolve_function(ref: str) -> Callable:
    if ref in FUNCTIONS:
        return FUNCTIONS[ref]
    if ":" in ref:
        module, _, attr = ref.partition(":")
        obj = importlib.import_module(module)
        for part in attr.split("."):
            obj = getattr(obj, part)
        return obj
    raise KeyError(f"unknown function {ref!r}")


def _function_ref(fn: Callable) -> str:
    for name, f in FUNCTIONS.items():
        if f is fn:
            return name
    return f"{fn.__module__}:{fn.__qualname__}"


@dataclass(frozen=True)
class TransduceTo:
    schema: TypeSchema
    instructions: str | None = None
    ctx: ExecutionContext | None = None
    kind = "transduce"

    def out_schema(self, schema: TypeSchema) -> TypeSchema:
        return self.schema

    async def apply(self, x: AgenticInstance):
        ctx = self.ctx or x.context
        if self.instructions is not None:
            ctx = ctx.with_(instructions=self.instructions)
        return await atransduce(self.schema, x, ctx)


@dataclass(frozen=True)
class SelfTransduce:
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    instructions: str | None = None
    fewshot: bool = False

    @property
    def kind(self) -> str:
        return "few-shot" if self.fewshot else "self-transduce"

    def out_schema(self, schema: TypeSchema) -> TypeSchema:
        schema.select(self.inputs)
        schema.select(self.outputs)
        both = set(self.inputs) & set(self.outputs)
        if both:
            raise OverlapError(f"slots used as both input and output: {sorted(both)}")
        return schema

    async def apply(self, x):
        return await aself_transduce(x, self.inputs, self.outputs, self.instructions,
                                     fewshot=self.fewshot)


@dataclass(frozen=True)
class AMap:
    fn: MapFn
    schema: TypeSchema | None = None
    concurrency: int = 16
    strict: bool = True
    kind = "amap"

    def out_schema(self, schema):
        return self.schema or schema

    async def apply(self, x):
        dropped: list[ItemError] = []
        out = await aamap(x, self.fn, self.schema, concurrency=self.concurrency,
                          strict=self.strict, dropped=dropped)
        report = TransductionReport(notes=[f"dropped {e}" for e in dropped])
        return out, report


@dataclass(frozen=True)
class AReduce:
    fn: ReduceFn
    schema: TypeSchema | None = None
    chunk: int | None = None
    kind = "areduce"

    def out_schema(self, schema):
        return self.schema or schema

    async def apply(self, x):
        if self.chunk:
            return await ahierarchical_reduce(x, self.fn, self.chunk, self.schema), None
        return await aareduce(x, self.fn, self.schema), None


@dataclass(frozen=True)
class Rebind:
    slots: tuple[str, ...]
    kind = "rebind"

    def out_schema(self, schema):
        return schema.select(self.slots)

    async def apply(self, x):
        return rebind(x, self.slots), None


@dataclass(frozen=True)
class Product:
    other: AgenticInstance
    kind = "product"

    def out_schema(self, schema):
        return schema_product(schema, self.other.atype)

    async def apply(self, x):
        return product(x, self.other), None


@dataclass(frozen=True)
class Quotient:
    other: AgenticInstance
    kind = "quotient"

    def out_schema(self, schema):
        schema.select(self.other.atype.names)
        return schema

    async def apply(self, x):
        return quotient(x, self.other), None


Stage = Any


@dataclass
class PipelineRun:
    output: AgenticInstance | list[AgenticInstance]
    report: TransductionReport
    trace: list[Any] = field(default_factory=list)


@dataclass(frozen=True)
class Pipeline:
    """An ordered list of stages applied left to right.

    After a ``quotient`` stage the value is a list of groups and later
    stages apply to each group separately.
    """

    stages: tuple[Stage, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def __add__(self, other: Pipeline) -> Pipeline:
        return Pipeline(self.stages + other.stages)

    def check(self, schema: TypeSchema) -> TypeSchema:
        for i, stage in enumerate(self.stages):
            try:
                schema = stage.out_schema(schema)
            except TransductError as exc:
                raise StageError(i, exc) from exc
        return schema

    async def arun(self, x: AgenticInstance, *, trace: bool = False) -> PipelineRun:
        self.check(x.atype)
        report = TransductionReport()
        steps: list[Any] = []
        value: AgenticInstance | list[AgenticInstance] = x
        for i, stage in enumerate(self.stages):
            try:
                if isinstance(value, list):
                    results = [await stage.apply(v) for v in value]
                    value = [r[0] for r in results]
                    reps = [r[1] for r in results]
                else:
                    value, rep = await stage.apply(value)
                    reps = [rep]
            except TransductError as exc:
                raise StageError(i, exc) from exc
            for rep in reps:
                if rep is not None:
                    report.extend(rep)
            if trace:
                steps.append(value)
        return PipelineRun(value, report, steps)

    def run(self, x: AgenticInstance, *, trace: bool = False) -> PipelineRun:
        return asyncio.run(self.arun(x, trace=trace))

    # -- documents -----------------------------------------------------------

    def to_doc(self) -> dict:
        stages = []
        for st in self.stages:
            d: dict[str, Any] = {"kind": st.kind}
            if isinstance(st, TransduceTo):
                d["schema"] = st.schema.to_json()
                if st.instructions is not None:
                    d["instructions"] = st.instructions
            elif isinstance(st, SelfTransduce):
                d.update(inputs=list(st.inputs), outputs=list(st.outputs))
                if st.instructions is not None:
                    d["instructions"] = st.instructions
            elif isinstance(st, AMap):
                d.update(fn=_function_ref(st.fn), concurrency=st.concurrency, strict=st.strict)
                if st.schema is not None:
                    d["schema"] = st.schema.to_json()
            elif isinstance(st, AReduce):
                d["fn"] = _function_ref(st.fn)
                if st.schema is not None:
                    d["schema"] = st.schema.to_json()
                if st.chunk:
                    d["chunk"] = st.chunk
            elif isinstance(st, Rebind):
                d["slots"] = list(st.slots)
            else:
                raise TypeError(f"stage {st.kind!r} references data and cannot be serialized inline")
            stages.append(d)
        return {"stages": stages}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], schemas: Mapping[str, TypeSchema] | None = None,
                 datasets: Callable[[Mapping[str, Any]], AgenticInstance] | None = None) -> Pipeline:
        """Build a pipeline from its document form.

        ``schema`` fields are either a name looked up in ``schemas`` or an
        inline schema object. ``product``/``quotient`` stages describe their
        other operand and are materialized by ``datasets``.
        """
        schemas = schemas or {}

        def schema_of(ref):
            if ref is None:
                return None
            if isinstance(ref, str):
                if ref not in schemas:
                    raise KeyError(f"unknown schema {ref!r}")
                return schemas[ref]
            return TypeSchema.from_json(ref)

        stages: list[Stage] = []
        for d in doc.get("stages", []):
            kind = d["kind"]
            if kind == "transduce":
                stages.append(TransduceTo(schema_of(d["schema"]), d.get("instructions")))
            elif kind in ("self-transduce", "few-shot"):
                stages.append(SelfTransduce(tuple(d["inputs"]), tuple(d["outputs"]),
                                            d.get("instructions"), fewshot=kind == "few-shot"))
            elif kind == "amap":
                stages.append(AMap(resolve_function(d["fn"]), schema_of(d.get("schema")),
                                   d.get("concurrency", 16), d.get("strict", True)))
            elif kind == "areduce":
                stages.append(AReduce(resolve_function(d["fn"]), schema_of(d.get("schema")),
                                      d.get("chunk")))
            elif kind == "rebind":
                stages.append(Rebind(tuple(d["slots"])))
            elif kind in ("product", "quotient"):
                if datasets is None:
                    raise KeyError(f"{kind} stage needs a dataset loader")
                other = datasets(d)
                stages.append(Product(other) if kind == "product" else Quotient(other))
            else:
                raise KeyError(f"unknown stage kind {kind!r}")
        return cls(tuple(stages))


def run_pipeline(p: Pipeline, x: AgenticInstance, *, trace: bool = False):
    return p.run(x, trace=trace).output


__all__ = ["AMap", "AReduce", "FUNCTIONS", "Pipeline", "PipelineRun", "Product", "Quotient",
           "Rebind", "SelfTransduce", "TransduceTo", "aamap", "aareduce", "ahierarchical_reduce",
           "amap", "areduce", "hierarchical_reduce", "register_function", "resolve_function",
           "run_pipeline", "transducer_fn"]

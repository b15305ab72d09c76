"""Agentic instances: a schema, an ordered list of states and a context.

Instances are immutable; every operation returns a new one. ``+`` is
concatenation, ``*`` the row-major product and ``/`` the positional
quotient that inverts it.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .context import ExecutionContext
from .errors import ShapeMismatch, TypeMismatch, UnknownSlot, ValidationError
from .prompt import canonical_json
from .schema import TypeSchema, schema_product, serialize_state, validate_state

State = dict


@dataclass(frozen=True)
class AgenticInstance:
    atype: TypeSchema
    states: tuple[State, ...] = ()
    context: ExecutionContext = field(default_factory=ExecutionContext, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))

    @classmethod
    def from_records(cls, atype: TypeSchema, records: Iterable[Mapping],
                     context: ExecutionContext | None = None) -> AgenticInstance:
        states = tuple(validate_state(atype, r) for r in records)
        return cls(atype, states, context or ExecutionContext())

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self) -> Iterator[State]:
        return iter(self.states)

    def __getitem__(self, i):
        return self.states[i]

    def __add__(self, other: AgenticInstance) -> AgenticInstance:
        return concat(self, other)

    def __mul__(self, other: AgenticInstance) -> AgenticInstance:
        return product(self, other)

    def __truediv__(self, other: AgenticInstance) -> list[AgenticInstance]:
        return quotient(self, other)

    def with_states(self, states: Iterable[State]) -> AgenticInstance:
        return AgenticInstance(self.atype, tuple(states), self.context)

    def with_context(self, context: ExecutionContext) -> AgenticInstance:
        return AgenticInstance(self.atype, self.states, context)

    def truncate(self, start: int, stop: int | None = None) -> AgenticInstance:
        """``truncate(n)`` keeps the first n states; ``truncate(a, b)`` keeps ``[a:b]``."""
        if stop is None:
            start, stop = 0, start
        return self.with_states(self.states[start:stop])

    def records(self) -> list[dict]:
        return [serialize_state(self.atype, s) for s in self.states]

    def to_jsonl(self, path: str | Path | None = None) -> str:
        text = "".join(canonical_json(r) + "\n" for r in self.records())
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_jsonl(cls, atype: TypeSchema, lines: Iterable[str],
                   context: ExecutionContext | None = None) -> AgenticInstance:
        """Parse JSONL text lines, validating each; blank lines are skipped."""
        states = []
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError([("<line>", f"invalid JSON: {exc.msg}")], line=lineno) from exc
            try:
                states.append(validate_state(atype, record))
            except ValidationError as exc:
                raise ValidationError(exc.issues, line=lineno) from exc
        return cls(atype, tuple(states), context or ExecutionContext())


def empty(atype: TypeSchema, context: ExecutionContext | None = None) -> AgenticInstance:
    return AgenticInstance(atype, (), context or ExecutionContext())


def concat(x1: AgenticInstance, x2: AgenticInstance) -> AgenticInstance:
    if not x1.atype.same_structure(x2.atype):
        raise TypeMismatch(f"cannot concatenate {x1.atype.name!r} with {x2.atype.name!r}")
    return AgenticInstance(x1.atype, x1.states + x2.states, x1.context)


def product(x: AgenticInstance, y: AgenticInstance) -> AgenticInstance:
    atype = schema_product(x.atype, y.atype)
    states = tuple({**xs, **ys} for xs in x.states for ys in y.states)
    return AgenticInstance(atype, states, x.context)


def quotient(z: AgenticInstance, y: AgenticInstance) -> list[AgenticInstance]:
    """Split ``z`` into ``len(z) // len(y)`` contiguous groups of ``len(y)`` states."""
    missing = [n for n in y.atype.names if n not in z.atype]
    if missing:
        raise UnknownSlot(f"quotient: {z.atype.name!r} lacks slots {missing}")
    m, n = len(z), len(y)
    if n == 0 or m == 0 or m % n:
        raise ShapeMismatch(f"cannot divide {m} states into groups of {n}")
    return [AgenticInstance(z.atype, z.states[i:i + n], z.context) for i in range(0, m, n)]


def project(state: Mapping, names: Sequence[str]) -> State:
    return {n: state[n] for n in names if state.get(n) is not None}


def rebind(x: AgenticInstance, slots: Sequence[str]) -> AgenticInstance:
    atype = x.atype.select(slots)
    return AgenticInstance(atype, tuple(project(s, slots) for s in x.states), x.context)


def merge_overlay(base: AgenticInstance, overlay: AgenticInstance) -> AgenticInstance:
    for name in overlay.atype.names:
        if name not in base.atype:
            raise UnknownSlot(f"overlay slot {name!r} not in {base.atype.name!r}")
    if len(base) != len(overlay):
        raise ShapeMismatch(f"overlay has {len(overlay)} states, base has {len(base)}")
    merged = []
    for b, o in zip(base.states, overlay.states):
        state = dict(b)
        state.update({k: v for k, v in o.items() if v is not None})
        merged.append(state)
    return base.with_states(merged)


# -- equivalence -------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceRelation:
    """A user-supplied equivalence on states, looking only at ``slots``.

    ``relate`` receives the two states projected to ``slots`` (all slots
    when ``slots`` is None). The relation laws are the caller's contract.
    """

    name: str
    relate: Callable[[State, State], bool]
    slots: tuple[str, ...] | None = None

    def __call__(self, a: Mapping, b: Mapping) -> bool:
        if self.slots is not None:
            a, b = project(a, self.slots), project(b, self.slots)
        return self.relate(a, b)

    @classmethod
    def syntactic(cls, slots: Sequence[str] | None = None) -> EquivalenceRelation:
        return cls("syntactic", lambda a, b: a == b, tuple(slots) if slots is not None else None)

    @classmethod
    def by_key(cls, name: str, key: Callable[[State], Any],
               slots: Sequence[str] | None = None) -> EquivalenceRelation:
        """Observational equivalence: states are related when ``key`` agrees."""
        return cls(name, lambda a, b: key(a) == key(b), tuple(slots) if slots is not None else None)


def partition_by(x: AgenticInstance, rel: EquivalenceRelation) -> list[AgenticInstance]:
    """Group states into classes ordered by first occurrence."""
    if rel.slots is not None:
        for name in rel.slots:
            if name not in x.atype:
                raise UnknownSlot(f"relation slot {name!r} not in {x.atype.name!r}")
    reps: list[State] = []
    groups: list[list[State]] = []
    for state in x.states:
        for rep, group in zip(reps, groups):
            if rel(rep, state):
                group.append(state)
                break
        else:
            reps.append(state)
            groups.append([state])
    return [x.with_states(g) for g in groups]


def statewise_equivalent(x1: AgenticInstance, x2: AgenticInstance, rel: EquivalenceRelation) -> bool:
    """Instances are equivalent when their state lists agree elementwise under ``rel``."""
    return len(x1) == len(x2) and all(rel(a, b) for a, b in zip(x1.states, x2.states))

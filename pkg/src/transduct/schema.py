"""Runtime record types and the set/product algebra over them.

A :class:`TypeSchema` is an ordered collection of named, typed slots. States
(records conforming to a schema) are plain ``dict`` objects keyed by slot
name; an absent optional slot is simply a missing key.
"""

from __future__ import annotations

import enum
import math
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

from .errors import SlotConflict, UnknownSlot, ValidationError

__all__ = [
    "ABSENT",
    "BOOLEAN",
    "INTEGER",
    "Kind",
    "REAL",
    "Slot",
    "SlotType",
    "TEXT",
    "TypeSchema",
    "enum_of",
    "list_of",
    "record_of",
    "schema_difference",
    "schema_intersection",
    "schema_product",
    "schema_union",
    "serialize_state",
    "validate_state",
]


class _Absent:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT: Any = _Absent()


class Kind(str, enum.Enum):
    TEXT = "text"
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"
    ENUM = "enum"
    LIST = "list"
    RECORD = "record"


@dataclass(frozen=True, eq=False)
class SlotType:
    kind: Kind
    allowed_values: tuple[str, ...] = ()
    element: SlotType | None = None
    inner: TypeSchema | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "allowed_values", tuple(self.allowed_values))
        if (self.kind is Kind.ENUM) != bool(self.allowed_values):
            raise ValueError("allowed_values must be non-empty exactly for enum slots")
        if (self.kind is Kind.LIST) != (self.element is not None):
            raise ValueError("element type is required exactly for list slots")
        if (self.kind is Kind.RECORD) != (self.inner is not None):
            raise ValueError("inner schema is required exactly for record slots")

    def key(self) -> tuple:
        """Structural identity; descriptions and defaults do not participate."""
        if self.kind is Kind.ENUM:
            return (self.kind.value, self.allowed_values)
        if self.kind is Kind.LIST:
            return (self.kind.value, self.element.key())
        if self.kind is Kind.RECORD:
            return (self.kind.value, self.inner.structure())
        return (self.kind.value,)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SlotType):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def label(self) -> str:
        if self.kind is Kind.LIST:
            return f"list[{self.element.label()}]"
        if self.kind is Kind.RECORD:
            return f"record[{self.inner.name}]"
        return self.kind.value

    def __repr__(self) -> str:
        if self.kind is Kind.ENUM:
            return f"enum_of{self.allowed_values!r}"
        return self.label()

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is Kind.ENUM:
            out["allowed_values"] = list(self.allowed_values)
        elif self.kind is Kind.LIST:
            out["element"] = self.element.to_json()
        elif self.kind is Kind.RECORD:
            out["inner"] = self.inner.to_json()
        return out

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> SlotType:
        kind = Kind(doc["kind"])
        element = doc.get("element")
        inner = doc.get("inner")
        return cls(
            kind,
            allowed_values=tuple(doc.get("allowed_values") or ()),
            element=cls.from_json(element) if element is not None else None,
            inner=TypeSchema.from_json(inner) if inner is not None else None,
        )


TEXT = SlotType(Kind.TEXT)
INTEGER = SlotType(Kind.INTEGER)
REAL = SlotType(Kind.REAL)
BOOLEAN = SlotType(Kind.BOOLEAN)


def enum_of(*values: str) -> SlotType:
    return SlotType(Kind.ENUM, allowed_values=tuple(values))


def list_of(element: SlotType) -> SlotType:
    return SlotType(Kind.LIST, element=element)


def record_of(inner: TypeSchema) -> SlotType:
    return SlotType(Kind.RECORD, inner=inner)


@dataclass(frozen=True)
class Slot:
    name: str
    stype: SlotType
    description: str = ""
    optional: bool = False
    default: Any = field(default=ABSENT)

    def __post_init__(self):
        if not self.name:
            raise ValueError("slot name must be non-empty")
        if self.default is not ABSENT:
            issues: list[tuple[str, str]] = []
            value = _check_value(self.stype, self.default, self.name, issues)
            if issues:
                raise ValidationError(issues)
            object.__setattr__(self, "default", value)

    @property
    def pair(self) -> tuple[str, tuple]:
        return (self.name, self.stype.key())

    def to_json(self) -> dict:
        out = {"name": self.name, **self.stype.to_json(), "description": self.description,
               "optional": self.optional}
        if self.default is not ABSENT:
            out["default"] = self.default
        return out

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> Slot:
        return cls(
            name=doc["name"],
            stype=SlotType.from_json(doc),
            description=doc.get("description") or "",
            optional=bool(doc.get("optional", False)),
            default=doc["default"] if "default" in doc else ABSENT,
        )


@dataclass(frozen=True)
class TypeSchema:
    name: str
    slots: tuple[Slot, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        seen = set()
        for slot in self.slots:
            if slot.name in seen:
                raise SlotConflict(f"duplicate slot name {slot.name!r} in schema {self.name!r}")
            seen.add(slot.name)

    @classmethod
    def of(cls, name: str, *slots: Slot | tuple) -> TypeSchema:
        """Shorthand: ``TypeSchema.of("QA", ("q", TEXT), Slot("a", TEXT, optional=True))``."""
        return cls(name, tuple(s if isinstance(s, Slot) else Slot(*s) for s in slots))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    def slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise UnknownSlot(f"schema {self.name!r} has no slot {name!r}")

    def __contains__(self, name: object) -> bool:
        return any(s.name == name for s in self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    def __iter__(self) -> Iterator[Slot]:
        return iter(self.slots)

    def structure(self) -> tuple:
        return tuple(s.pair for s in self.slots)

    def same_structure(self, other: TypeSchema) -> bool:
        return self.structure() == other.structure()

    def select(self, names: Iterable[str], name: str | None = None) -> TypeSchema:
        """Restrict to ``names`` in the requested order."""
        picked = [self.slot(n) for n in names]
        return TypeSchema(name or self.name, tuple(picked))

    def to_json(self) -> dict:
        return {"name": self.name, "slots": [s.to_json() for s in self.slots]}

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> TypeSchema:
        return cls(doc.get("name", ""), tuple(Slot.from_json(s) for s in doc.get("slots", ())))


# -- set algebra -------------------------------------------------------------

def schema_union(a: TypeSchema, b: TypeSchema) -> TypeSchema:
    by_name = {s.name: s for s in a.slots}
    extra = []
    for s in b.slots:
        mine = by_name.get(s.name)
        if mine is None:
            extra.append(s)
        elif mine.stype != s.stype:
            raise SlotConflict(f"slot {s.name!r} is {mine.stype!r} in {a.name!r} "
                               f"but {s.stype!r} in {b.name!r}")
    return TypeSchema(f"{a.name}|{b.name}", a.slots + tuple(extra))


def schema_intersection(a: TypeSchema, b: TypeSchema) -> TypeSchema:
    pairs = {s.pair for s in b.slots}
    return TypeSchema(f"{a.name}&{b.name}", tuple(s for s in a.slots if s.pair in pairs))


def schema_difference(a: TypeSchema, b: TypeSchema) -> TypeSchema:
    pairs = {s.pair for s in b.slots}
    return TypeSchema(f"{a.name}-{b.name}", tuple(s for s in a.slots if s.pair not in pairs))


def schema_product(a: TypeSchema, b: TypeSchema) -> TypeSchema:
    shared = set(a.names) & set(b.names)
    if shared:
        raise SlotConflict(f"product needs disjoint slot names; shared: {sorted(shared)}")
    return TypeSchema(f"{a.name}×{b.name}", a.slots + b.slots)


# -- validation --------------------------------------------------------------

_INT_RE = re.compile(r"\s*[+-]?\d+\s*")
_REAL_RE = re.compile(r"\s*[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\s*")


def _check_value(stype: SlotType, value: Any, path: str, issues: list) -> Any:
    kind = stype.kind
    if kind is Kind.TEXT:
        if isinstance(value, str):
            return value
    elif kind is Kind.INTEGER:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str) and _INT_RE.fullmatch(value):
            return int(value)
    elif kind is Kind.REAL:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            if isinstance(value, float) and not math.isfinite(value):
                issues.append((path, "non-finite real"))
                return ABSENT
            return float(value)
        if isinstance(value, str) and _REAL_RE.fullmatch(value):
            return float(value)
    elif kind is Kind.BOOLEAN:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "false"):
            return value.strip().lower() == "true"
    elif kind is Kind.ENUM:
        if isinstance(value, str) and value in stype.allowed_values:
            return value
        if isinstance(value, str):
            issues.append((path, f"{value!r} is not one of {list(stype.allowed_values)}"))
            return ABSENT
    elif kind is Kind.LIST:
        if isinstance(value, (list, tuple)):
            return [_check_value(stype.element, v, f"{path}[{i}]", issues)
                    for i, v in enumerate(value)]
    elif kind is Kind.RECORD:
        if isinstance(value, Mapping):
            return _validate(stype.inner, value, path + ".", issues)
    issues.append((path, f"expected {stype.label()}, got {type(value).__name__} {value!r:.40}"))
    return ABSENT


def _validate(schema: TypeSchema, value: Mapping, prefix: str, issues: list) -> dict:
    known = set(schema.names)
    for key in value:
        if key not in known:
            issues.append((f"{prefix}{key}", "unknown slot"))
    out = {}
    for slot in schema.slots:
        raw = value.get(slot.name)
        if raw is None:
            if slot.default is not ABSENT:
                out[slot.name] = slot.default
            elif not slot.optional:
                issues.append((prefix + slot.name, "required slot missing"))
            continue
        out[slot.name] = _check_value(slot.stype, raw, prefix + slot.name, issues)
    return out


def validate_state(schema: TypeSchema, value: Any) -> dict:
    """Check ``value`` against ``schema`` and return the conforming state.

    Absent optional slots take their default when one is declared. The
    only coercions applied are digit strings to integers, numerals to
    reals and ``"true"``/``"false"`` to booleans.
    """
    if not isinstance(value, Mapping):
        raise ValidationError([("<record>", f"expected a mapping, got {type(value).__name__}")])
    issues: list[tuple[str, str]] = []
    out = _validate(schema, value, "", issues)
    if issues:
        raise ValidationError(issues)
    return out


def _serialize_value(stype: SlotType, value: Any) -> Any:
    if stype.kind is Kind.RECORD:
        return serialize_state(stype.inner, value)
    if stype.kind is Kind.LIST:
        return [_serialize_value(stype.element, v) for v in value]
    return value


def serialize_state(schema: TypeSchema, state: Mapping) -> dict:
    """Order a state's keys by declaration order, dropping absent slots."""
    return {s.name: _serialize_value(s.stype, state[s.name])
            for s in schema.slots if state.get(s.name) is not None}


def is_empty_state(state: Mapping) -> bool:
    return all(v is None for v in state.values())

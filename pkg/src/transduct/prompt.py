"""Prompt rendering: states to text, few-shot blocks and full prompts.

Everything here is a pure function of its inputs so that prompts are
byte-stable across runs, threads and batch sizes.
"""

from __future__ import annotations

import hashlib
import json
import string
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import EmptyTargetExample, UnknownSlot, UnresolvedPlaceholder
from .schema import Kind, TypeSchema, is_empty_state, serialize_state

OUTPUT_DIRECTIVE = "Generate Output as JSON"

_formatter = string.Formatter()


def canonical_json(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"))


@dataclass(frozen=True)
class PromptTemplate:
    """A ``{placeholder}`` template plus the parameters it may reference.

    ``template=None`` selects the default SOURCE/TASK layout.
    """

    template: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path, **params: Any) -> PromptTemplate:
        return cls(Path(path).read_text(encoding="utf-8"), params)

    def placeholders(self) -> list[str]:
        if self.template is None:
            return []
        return [f for _, f, _, _ in _formatter.parse(self.template) if f is not None]


@dataclass(frozen=True)
class RenderedPrompt:
    system_text: str
    user_text: str
    target_schema_block: str = ""
    fewshot_block: str = ""

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.system_text.encode("utf-8"))
        h.update(b"\x00")
        h.update(self.user_text.encode("utf-8"))
        return h.hexdigest()


def render_state(schema: TypeSchema | None, state: Mapping, slots: Sequence[str] | None = None) -> str:
    if schema is None:
        return canonical_json({k: v for k, v in state.items() if v is not None})
    if slots is not None:
        for name in slots:
            if name not in schema:
                raise UnknownSlot(f"schema {schema.name!r} has no slot {name!r}")
        schema = schema.select(slots)
    return canonical_json(serialize_state(schema, state))


def render_states(schema: TypeSchema | None, states: Sequence[Mapping]) -> str:
    """List form of the prompt function: one canonical line per state."""
    return "\n".join(render_state(schema, s) for s in states)


def _slot_line(slot, indent: str) -> list[str]:
    req = "optional" if slot.optional else "required"
    head = f"{indent}- {slot.name} ({slot.stype.label()}, {req})"
    if slot.description:
        head += f": {slot.description}"
    stype = slot.stype
    while stype.kind is Kind.LIST:
        stype = stype.element
    if stype.kind is Kind.ENUM:
        head += f" one of: {' | '.join(stype.allowed_values)}"
    lines = [head]
    if stype.kind is Kind.RECORD:
        for inner in stype.inner.slots:
            lines.extend(_slot_line(inner, indent + "  "))
    return lines


def render_target_schema(schema: TypeSchema) -> str:
    lines = [f"TARGET SCHEMA {schema.name}:"]
    for slot in schema.slots:
        lines.extend(_slot_line(slot, ""))
    return "\n".join(lines)


def render_fewshot(pairs: Sequence[tuple[Mapping, Mapping]],
                   source: TypeSchema | None, target: TypeSchema | None) -> str:
    if not pairs:
        return ""
    stanzas = []
    for src, tgt in pairs:
        if is_empty_state(tgt):
            raise EmptyTargetExample("few-shot target states must have at least one slot present")
        stanzas.append(f"INPUT: {render_state(source, src)}\nOUTPUT: {render_state(target, tgt)}")
    return "EXAMPLES:\n" + "\n\n".join(stanzas)


def _render_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return canonical_json(value)


def fill_template(template: str, values: Mapping[str, Any]) -> str:
    parts = []
    for literal, fname, _spec, _conv in _formatter.parse(template):
        parts.append(literal)
        if fname is None:
            continue
        if fname not in values:
            raise UnresolvedPlaceholder(f"placeholder {{{fname}}} has no slot or parameter")
        parts.append(_render_value(values[fname]))
    return "".join(parts)


_SYSTEM_LINES = (
    ("role", "You are {}."),
    ("goal", "Your personal goal is: {}."),
    ("expected_output", "This is the expected criteria for your final answer: {}."),
)


def compose_prompt(
    template: PromptTemplate,
    state: Mapping | str,
    target: TypeSchema,
    *,
    source: TypeSchema | None = None,
    fewshot_block: str = "",
    instructions: str = "",
    memory: Sequence[str] = (),
) -> RenderedPrompt:
    """Build the full prompt for one source item.

    ``user_text`` joins, in order: the filled template, an optional CONTEXT
    block, the few-shot block, the target schema block and the output
    directive. Empty segments are skipped.
    """
    params = dict(template.params)
    system = [fmt.format(str(params[k]).rstrip(".")) for k, fmt in _SYSTEM_LINES if params.get(k)]

    if template.template is None:
        if isinstance(state, str):
            body = "SOURCE:\n" + state
        else:
            body = "SOURCE:\n" + render_state(source, state)
        if instructions:
            body += "\nTASK:\n" + instructions
    else:
        values = dict(params)
        values["instructions"] = instructions
        if isinstance(state, str):
            values["input"] = state
        else:
            names = source.names if source is not None else list(state)
            values.update({n: state.get(n) for n in names})
        body = fill_template(template.template, values)
        if instructions and "instructions" not in template.placeholders():
            system.append(instructions)

    schema_block = render_target_schema(target)
    segments = [body]
    if memory:
        segments.append("CONTEXT:\n" + "\n".join(memory))
    segments += [fewshot_block, schema_block, OUTPUT_DIRECTIVE]
    user = "\n".join(s for s in segments if s)
    return RenderedPrompt("\n".join(system), user, schema_block, fewshot_block)

"""JSONL loading with optional schema inference."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .agentic import AgenticInstance
from .context import ExecutionContext
from .errors import InferenceAmbiguous, ValidationError
from .schema import BOOLEAN, INTEGER, REAL, TEXT, Slot, SlotType, TypeSchema, list_of


def _infer_type(key: str, value: Any) -> SlotType:
    if isinstance(value, bool):
        return BOOLEAN
    if isinstance(value, int):
        return INTEGER
    if isinstance(value, float):
        return REAL
    if isinstance(value, str):
        return TEXT
    if isinstance(value, list):
        elems = {_infer_type(key, v) for v in value}
        if len(elems) > 1:
            raise InferenceAmbiguous(f"list slot {key!r} mixes element types")
        return list_of(elems.pop() if elems else TEXT)
    raise InferenceAmbiguous(f"cannot infer a slot type for {key!r} from {type(value).__name__}")


def infer_schema(record: dict, name: str = "Inferred") -> TypeSchema:
    return TypeSchema(name, tuple(Slot(k, _infer_type(k, v)) for k, v in record.items()))


def load_jsonl(path: str | Path, schema: TypeSchema | None = None,
               context: ExecutionContext | None = None) -> AgenticInstance:
    """Read a JSONL file into an instance.

    Without a schema one is inferred from the first line (scalars and
    lists of scalars); every line, the first included, is then validated.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if schema is None:
        first = next((ln for ln in lines if ln.strip()), None)
        if first is None:
            raise InferenceAmbiguous(f"{path}: empty file and no schema to infer from")
        try:
            record = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ValidationError([("<line>", f"invalid JSON: {exc.msg}")], line=1) from exc
        if not isinstance(record, dict):
            raise InferenceAmbiguous(f"{path}: first line is not a JSON object")
        schema = infer_schema(record, path.stem)
    return AgenticInstance.from_jsonl(schema, lines, context)


def write_jsonl(instance: AgenticInstance, path: str | Path) -> None:
    instance.to_jsonl(path)

"""Execution context: everything that conditions a transduction."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

from .prompt import PromptTemplate
from .schema import is_empty_state

if TYPE_CHECKING:
    from .backends import TransducerBackend

DEFAULT_BATCH_SIZE = 16


@dataclass(frozen=True)
class LLMConfig:
    """Model settings. ``temperature=0`` is the deterministic setting."""

    backend: str = "mock"
    model_id: str = "mock-model"
    temperature: float = 0.0
    seed: int = 0
    endpoint: str = ""
    auth_token_env: str = "TRANSDUCT_API_KEY"
    timeout: float = 60.0
    max_output_tokens: int = 1024
    json_response_format: bool = True

    def __post_init__(self):
        if self.backend not in ("mock", "http"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ExecutionContext:
    instructions: str = ""
    template: PromptTemplate = field(default_factory=PromptTemplate)
    fewshot: Sequence[tuple[Mapping, Mapping]] = ()
    llm: LLMConfig = field(default_factory=LLMConfig)
    batch_size: int = DEFAULT_BATCH_SIZE
    max_retries_per_item: int = 2
    retry_backoff: float = 0.25
    memory_hook: Callable[[Any], Sequence[str]] | None = None
    # reserved; tools are never invoked
    tool_hook: Any = None
    backend: TransducerBackend | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.batch_size <= 1024:
            raise ValueError("batch_size must be in [1, 1024]")
        if self.max_retries_per_item < 0:
            raise ValueError("max_retries_per_item must be >= 0")
        object.__setattr__(self, "fewshot", tuple(self.fewshot))
        for _, target in self.fewshot:
            if is_empty_state(target):
                raise ValueError("few-shot targets must be non-empty states")

    def with_(self, **changes: Any) -> ExecutionContext:
        return replace(self, **changes)

    def resolve_backend(self) -> TransducerBackend:
        if self.backend is not None:
            return self.backend
        from .backends import backend_for
        return backend_for(self.llm)

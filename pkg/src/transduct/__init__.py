"""Typed record algebra and LLM-backed transduction with async map/reduce."""

from .agentic import (AgenticInstance, EquivalenceRelation, concat, empty, merge_overlay,
                      partition_by, product, quotient, rebind, statewise_equivalent)
from .backends import AuditLog, FaultPlan, HTTPBackend, MockBackend, TransducerBackend
from .context import ExecutionContext, LLMConfig
from .dataflow import (AMap, AReduce, Pipeline, Rebind, SelfTransduce, TransduceTo, amap,
                       areduce, hierarchical_reduce, run_pipeline)
from .engine import (TransductionReport, decode_structured, few_shot_transduce,
                     self_transduce, transduce)
from .errors import *  # noqa: F401,F403
from .io import load_jsonl
from .prompt import (PromptTemplate, RenderedPrompt, compose_prompt, render_fewshot,
                     render_state, render_target_schema)
from .schema import (ABSENT, BOOLEAN, INTEGER, REAL, TEXT, Slot, SlotType, TypeSchema, enum_of,
                     list_of, record_of, schema_difference, schema_intersection, schema_product,
                     schema_union, validate_state)

__version__ = "0.1.0"

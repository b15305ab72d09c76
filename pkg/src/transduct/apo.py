"""Meta-prompt driven prompt optimization (generate, evaluate, keep the best k)."""

from __future__ import annotations

import asyncio
import json
import logging
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .agentic import AgenticInstance, product, quotient
from .context import ExecutionContext
from .dataflow import aamap
from .engine import TransductionReport, aself_transduce, atransduce
from .errors import GenerationFailed, UnscoredCandidate
from .prompt import PromptTemplate, canonical_json, render_state
from .schema import BOOLEAN, REAL, TEXT, Slot, TypeSchema, list_of

log = logging.getLogger(__name__)

OPT_META_INSTRUCTION = """\
Your proposed prompt template will be used in the following way.
* You are "role" -- this role must be suitable for solving the demo task.
* Your personal goal is: "goal" -- the goal achieves the outputs given inputs.
* This is the expected criteria for your final answer "expected_output" -- this constrains the output format.
* You can add a short imperative instruction "imperative" -- this comes after the input of the task.

[[Several demo tasks of input and outputs will be provided when you solve problem.]]

[[The previous optimized prompt templates with scores appear from the worst to the best.]]
{optimization_history}

* Given the previous optimization results, don't generate duplicate or similar prompt templates.
* Generate prompt template that achieves the best score, and succint and concise instructions."""

MCQA_META_INSTRUCTION = """\
Your proposed prompt template will be used in the following way.
* You are "role" -- this role must be suitable for solving the demo task.
* Your personal goal is: "goal" -- the goal achieves the outputs given inputs.
* This is the expected criteria for your final answer "expected_output" -- this constrains the output format.
* Extract"task_context" from demo tasks to explain the problem context -- this comes before the input of the task.
* You can add a short imperative instruction "imperative" -- this comes after the input of the task.


[[Several demo tasks of input and outputs will be provided when you solve problem.]]

[[The previous optimized prompt templates with scores appear from the worst to the best.]]
{optimization_history}

* Given the previous optimization results, don't generate duplicate or similar prompt templates.
* Generate prompt template that achieves the best score, and succint and concise instructions."""

USER_PROMPT_TEMPLATE = """\
You are {role}.
Your personal goal is: {goal}.
This is the expected criteria for your final answer: {expected_output}.

solve the following task.
{question}

{imperative}"""

MCQA_USER_PROMPT_TEMPLATE = """\
You are {role}.
Your personal goal is: {goal}.
This is the expected criteria for your final answer: {expected_output}.

This is the general task context.
{task_context}

solve the following task.
{question}
{options}
{option_ids}
{asset_name}
{relevancy}
{question_type}
{subject}

{imperative}"""

OPTIMIZER_TEMPLATE = '{{"demo tasks":{demos}}}'
OPTIMIZER_PARAMS = {
    "role": "Prompt optimizer.",
    "goal": "Propose diverse prompt templates that achieves high performance for the demo task given as input.",
    "backstory": "Understand the problem domain given the demo task example and propose what answer should be generated.",
    "expected_output": "the outputs are role, goal, and the expected output description, and imperative sentence for solving provided tasks.",
}

PROMPT_FIELDS = ("role", "goal", "expected_output", "imperative")

OPTIMIZATION_TASK = TypeSchema("OptimizationTask", (
    Slot("demos", list_of(TEXT), "optimization demo tasks", optional=True),
    Slot("role", TEXT, "New role instruction", optional=True),
    Slot("goal", TEXT, "New goal instruction", optional=True),
    Slot("expected_output", TEXT, "New expected_output instruction", optional=True),
    Slot("imperative", TEXT, "New imperative", optional=True),
    Slot("task_context", TEXT, "Problem context extracted from the demo tasks", optional=True),
    Slot("score", REAL, "evaluation score", optional=True),
))

GSM8K = TypeSchema("GSM8K", (
    Slot("question", TEXT, "a grade school math question."),
    Slot("answer", TEXT, "the ground-truth answer"),
    Slot("response_think", TEXT, "the step by step reasoning", optional=True),
    Slot("response_answer", TEXT, "the final answer", optional=True),
    Slot("correct", BOOLEAN, optional=True),
))


@dataclass(frozen=True)
class OptimizationTask:
    demos: tuple[str, ...] = ()
    role: str = ""
    goal: str = ""
    expected_output: str = ""
    imperative: str = ""
    task_context: str = ""
    score: float | None = None
    generation: int = -1

    def params(self) -> dict[str, str]:
        out = {k: getattr(self, k) for k in PROMPT_FIELDS}
        if self.task_context:
            out["task_context"] = self.task_context
        return out

    def key(self) -> tuple[str, ...]:
        return (self.role, self.goal, self.expected_output, self.imperative, self.task_context)

    def to_state(self) -> dict:
        state = {"demos": list(self.demos), **self.params()}
        if self.score is not None:
            state["score"] = float(self.score)
        return state

    @classmethod
    def from_state(cls, state: dict, generation: int = -1) -> OptimizationTask:
        return cls(demos=tuple(state.get("demos") or ()),
                   **{k: state.get(k) or "" for k in (*PROMPT_FIELDS, "task_context")},
                   score=state.get("score"), generation=generation)


@dataclass(frozen=True)
class OptimizerConfig:
    num_demos: int = 3
    top_k: int = 8
    parallel_candidates: int = 8
    eval_batch_size: int = 16
    max_iter: int = 5
    num_trains: int = 3
    num_devs: int = 100
    convergence_window: int | None = None
    convergence_epsilon: float = 0.0
    fields: tuple[str, ...] = PROMPT_FIELDS

    def __post_init__(self):
        if not 1 <= self.parallel_candidates <= 8:
            raise ValueError("parallel_candidates must be in [1, 8]")
        if not 1 <= self.eval_batch_size <= 20:
            raise ValueError("eval_batch_size must be in [1, 20]")
        if self.top_k < 1 or self.num_demos < 0:
            raise ValueError("top_k must be >= 1 and num_demos >= 0")
        object.__setattr__(self, "fields", tuple(self.fields))


@dataclass(frozen=True)
class Evaluator:
    """Grades one executed task state; the score is the percentage graded correct."""

    name: str
    grade: Callable[[dict], bool]
    response_slots: tuple[str, ...] = ("response_think", "response_answer")


_NUM_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?")


def _last_number(text: str | None) -> float | None:
    if not text:
        return None
    if "####" in text:
        text = text.rsplit("####", 1)[1]
    found = _NUM_RE.findall(text)
    if not found:
        return None
    return float(found[-1].replace(",", ""))


def grade_gsm8k(state: dict) -> bool:
    got, want = _last_number(state.get("response_answer")), _last_number(state.get("answer"))
    return got is not None and want is not None and abs(got - want) < 1e-9


def grade_exact(state: dict) -> bool:
    got, want = state.get("response_answer"), state.get("answer")
    return got is not None and want is not None and str(got).strip() == str(want).strip()


EVALUATORS: dict[str, Evaluator] = {
    "gsm8k": Evaluator("gsm8k", grade_gsm8k),
    "exact_match": Evaluator("exact_match", grade_exact),
}


def _fmt_score(score: float) -> int | float:
    return int(score) if float(score).is_integer() else score


def build_history_block(history: Sequence[OptimizationTask]) -> str:
    """Render scored candidates from worst to best, one JSON object per line."""
    for task in history:
        if task.score is None:
            raise UnscoredCandidate(f"candidate {task.generation} has no score")
    ordered = sorted(history, key=lambda t: (t.score, t.generation))
    return "\n".join(canonical_json({**t.params(), "score": _fmt_score(t.score)}) for t in ordered)


def keep_best_k(pool: Sequence[OptimizationTask], k: int) -> list[OptimizationTask]:
    for task in pool:
        if task.score is None:
            raise UnscoredCandidate(f"candidate {task.generation} has no score")
    best = sorted(pool, key=lambda t: (-t.score, t.generation))[:k]
    return sorted(best, key=lambda t: (t.score, t.generation))


def _candidate_schema(fields: Sequence[str]) -> TypeSchema:
    return TypeSchema("PromptCandidate", tuple(
        Slot(f, TEXT, OPTIMIZATION_TASK.slot(f).description) for f in fields))


async def agenerate_candidates(
    demos: Sequence[str],
    history: Sequence[OptimizationTask],
    n: int,
    ctx: ExecutionContext,
    *,
    meta_instruction: str = OPT_META_INSTRUCTION,
    fields: Sequence[str] = PROMPT_FIELDS,
    first_generation: int = 0,
    report: TransductionReport | None = None,
) -> list[OptimizationTask]:
    """Run ``n`` concurrent transductions of the meta-prompt into candidates.

    Candidate ``i`` samples with seed ``ctx.llm.seed + first_generation + i``
    so that a deterministic backend still yields distinct proposals.
    Exact duplicates of history (or of each other) are dropped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    target = _candidate_schema(fields)
    instructions = meta_instruction.replace("{optimization_history}", build_history_block(history))
    source_schema = OPTIMIZATION_TASK.select(["demos"])
    base = ctx.with_(instructions=instructions,
                     template=PromptTemplate(OPTIMIZER_TEMPLATE, OPTIMIZER_PARAMS))

    async def one(i: int):
        gen = first_generation + i
        c = base.with_(llm=replace(base.llm, seed=base.llm.seed + gen))
        out, rep = await atransduce(target, [{"demos": list(demos)}], c, source_schema=source_schema)
        return gen, out.states[0], rep

    results = await asyncio.gather(*(one(i) for i in range(n)))
    seen = {t.key() for t in history}
    cands = []
    for gen, state, rep in results:
        if report is not None:
            report.extend(rep)
        if rep.failed:
            continue
        task = OptimizationTask.from_state({**state, "demos": list(demos)}, generation=gen)
        if task.key() in seen:
            if report is not None:
                report.notes.append(f"candidate {gen} duplicates an earlier template; dropped")
            continue
        seen.add(task.key())
        cands.append(task)
    if not cands:
        raise GenerationFailed("no candidate survived generation")
    return cands


def generate_candidates(demos, history, n, ctx, **kwargs) -> list[OptimizationTask]:
    return asyncio.run(agenerate_candidates(demos, history, n, ctx, **kwargs))


def _template_inputs(template: str, schema: TypeSchema) -> list[str]:
    names = [f for f in PromptTemplate(template).placeholders() if f in schema]
    return list(dict.fromkeys(names))


async def aevaluate_candidates(
    cands: Sequence[OptimizationTask],
    valset: AgenticInstance,
    evaluator: Evaluator,
    ctx: ExecutionContext,
    *,
    user_template: str = USER_PROMPT_TEMPLATE,
    report: TransductionReport | None = None,
) -> list[OptimizationTask]:
    """Score every candidate on ``valset``.

    The candidates are crossed with the validation set, every pair is
    answered with ``user_template``, and the product is divided by the
    validation set again to regroup answers per candidate.
    """
    if len(valset) == 0:
        raise ValueError("validation set is empty")
    if not cands:
        return []
    cand_schema = OPTIMIZATION_TASK.select(["role", "goal", "expected_output", "imperative",
                                            "task_context"], name="Candidate")
    opt = AgenticInstance(cand_schema, tuple(
        {k: v for k, v in c.params().items() if v} for c in cands), ctx)
    joint = product(opt, valset)
    inputs = _template_inputs(user_template, joint.atype)
    eval_ctx = ctx.with_(template=PromptTemplate(user_template), instructions="")
    executed, rep = await aself_transduce(joint, inputs, list(evaluator.response_slots),
                                          ctx=eval_ctx)
    if report is not None:
        report.extend(rep)
    groups = quotient(executed, valset)

    def keep_if_correct(state: dict) -> list[dict]:
        return [state] if evaluator.grade(state) else []

    scored = []
    n = len(valset)
    for ci, (cand, group) in enumerate(zip(cands, groups)):
        items = rep.items[ci * n:(ci + 1) * n]
        if all(it.outcome == "failed" for it in items):
            if report is not None:
                report.notes.append(f"candidate {cand.generation}: every evaluation failed; score 0")
            scored.append(replace(cand, score=0.0))
            continue
        correct = await aamap(group, keep_if_correct, concurrency=ctx.batch_size)
        scored.append(replace(cand, score=100.0 * len(correct) / n))
    return scored


def evaluate_candidates(cands, valset, evaluator, ctx, **kwargs) -> list[OptimizationTask]:
    return asyncio.run(aevaluate_candidates(cands, valset, evaluator, ctx, **kwargs))


@dataclass
class OptimizationResult:
    best: OptimizationTask
    trajectory: list[float]
    history: list[OptimizationTask]
    rows: list[dict] = field(default_factory=list)
    report: TransductionReport = field(default_factory=TransductionReport)
    converged: bool = False

    def write_trajectory(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def split_trainset(trainset: AgenticInstance, cfg: OptimizerConfig) -> tuple[list[str], AgenticInstance]:
    train = trainset.truncate(cfg.num_trains)
    demos = [render_state(train.atype, s) for s in train.states[:cfg.num_demos]]
    valset = trainset.truncate(cfg.num_trains, cfg.num_trains + cfg.num_devs)
    if len(valset) == 0:
        raise ValueError(f"trainset has {len(trainset)} states; need more than num_trains={cfg.num_trains}")
    return demos, valset


async def aoptimize(
    trainset: AgenticInstance,
    evaluator: Evaluator,
    cfg: OptimizerConfig,
    ctx: ExecutionContext,
    *,
    meta_instruction: str = OPT_META_INSTRUCTION,
    user_template: str = USER_PROMPT_TEMPLATE,
) -> OptimizationResult:
    if cfg.max_iter < 1:
        raise GenerationFailed("max_iter < 1: no candidates would be generated")
    demos, valset = split_trainset(trainset, cfg)
    eval_ctx = ctx.with_(batch_size=cfg.eval_batch_size)
    report = TransductionReport()
    pool: list[OptimizationTask] = []
    trajectory: list[float] = []
    rows: list[dict] = []
    next_gen = 0
    converged = False
    for it in range(cfg.max_iter):
        try:
            cands = await agenerate_candidates(demos, pool, cfg.parallel_candidates, ctx,
                                               meta_instruction=meta_instruction, fields=cfg.fields,
                                               first_generation=next_gen, report=report)
        except GenerationFailed as exc:
            raise GenerationFailed(str(exc), trajectory) from exc
        next_gen += cfg.parallel_candidates
        scored = await aevaluate_candidates(cands, valset, evaluator, eval_ctx,
                                            user_template=user_template, report=report)
        pool = keep_best_k(pool + scored, cfg.top_k)
        best = max(pool, key=lambda t: (t.score, -t.generation))
        trajectory.append(best.score)
        rows.append({"iteration": it, **best.params(), "score": best.score,
                     "candidates": len(scored)})
        log.info("iteration %d: best score %.2f over %d candidates", it, best.score, len(scored))
        w = cfg.convergence_window
        if w and len(trajectory) > w and trajectory[-1] - trajectory[-1 - w] < cfg.convergence_epsilon:
            converged = True
            break
    best = max(pool, key=lambda t: (t.score, -t.generation))
    return OptimizationResult(best, trajectory, pool, rows, report, converged)


def optimize(trainset, evaluator, cfg, ctx, **kwargs) -> OptimizationResult:
    return asyncio.run(aoptimize(trainset, evaluator, cfg, ctx, **kwargs))


__all__ = ["EVALUATORS", "Evaluator", "GSM8K", "MCQA_META_INSTRUCTION", "MCQA_USER_PROMPT_TEMPLATE",
           "OPTIMIZATION_TASK", "OPT_META_INSTRUCTION", "OptimizationResult", "OptimizationTask",
           "OptimizerConfig", "USER_PROMPT_TEMPLATE", "aevaluate_candidates", "agenerate_candidates",
           "aoptimize", "build_history_block", "evaluate_candidates", "generate_candidates",
           "keep_best_k", "optimize", "split_trainset"]

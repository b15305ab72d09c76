"""Command line front end.

    transduct run --config pipeline.yaml [--set key=value ...]
    transduct optimize --config apo.yaml
    transduct bench --batch-sizes 1,2,4,16 --n 64 --latency 0.5

Exit codes: 0 success, 1 runtime failure (including failed items),
2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from . import apo
from .agentic import AgenticInstance
from .backends import HTTPBackend, MockBackend
from .bench import format_table, run_bench, to_csv
from .context import ExecutionContext, LLMConfig
from .dataflow import Pipeline, resolve_function
from .errors import (ConfigError, InferenceAmbiguous, StageError, TransductError,
                     ValidationError)
from .io import load_jsonl
from .prompt import PromptTemplate
from .schema import TypeSchema

log = logging.getLogger("transduct")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

_CONTEXT_SCHEMA = {
    "type": "object",
    "properties": {
        "backend": {"enum": ["mock", "http"]},
        "model": {"type": "string"},
        "temperature": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "endpoint": {"type": "string"},
        "auth_token_env": {"type": "string"},
        "timeout": {"type": "number", "exclusiveMinimum": 0},
        "max_output_tokens": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1, "maximum": 1024},
        "max_retries_per_item": {"type": "integer", "minimum": 0},
        "retry_backoff": {"type": "number", "minimum": 0},
        "instructions": {"type": "string"},
        "template": {"type": "string"},
        "template_params": {"type": "object"},
        "mock": {
            "type": "object",
            "properties": {
                "latency": {"type": "number", "minimum": 0},
                "script": {"type": "array", "items": {
                    "type": "object", "required": ["match", "response"],
                    "properties": {"match": {"type": "string"},
                                   "response": {"type": ["object", "string"]}}}},
                "script_file": {"type": "string"},
                "responder": {"type": "string", "pattern": "^[\\w.]+:[\\w.]+$"},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

_DATASET_SCHEMA = {
    "type": "object",
    "required": ["path"],
    "properties": {"path": {"type": "string"}, "schema": {"type": ["string", "object"]}},
    "additionalProperties": False,
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["source", "pipeline", "output"],
    "properties": {
        "schemas": {"type": "object", "additionalProperties": {"type": "object"}},
        "source": _DATASET_SCHEMA,
        "pipeline": {"type": "object", "properties": {
            "stages": {"type": "array", "items": {"type": "object", "required": ["kind"]}},
            "file": {"type": "string"}}},
        "context": _CONTEXT_SCHEMA,
        "output": {"type": "string"},
        "report": {"type": "string"},
        "strict": {"type": "boolean"},
    },
    "additionalProperties": False,
}

OPTIMIZE_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["train", "evaluator"],
    "properties": {
        "schemas": {"type": "object", "additionalProperties": {"type": "object"}},
        "train": _DATASET_SCHEMA,
        "evaluator": {"type": "string"},
        "optimizer": {"type": "object", "properties": {
            "num_demos": {"type": "integer", "minimum": 0},
            "top_k": {"type": "integer", "minimum": 1},
            "parallel_candidates": {"type": "integer", "minimum": 1, "maximum": 8},
            "eval_batch_size": {"type": "integer", "minimum": 1, "maximum": 20},
            "max_iter": {"type": "integer", "minimum": 0},
            "num_trains": {"type": "integer", "minimum": 0},
            "num_devs": {"type": "integer", "minimum": 1},
            "convergence_window": {"type": ["integer", "null"], "minimum": 1},
            "convergence_epsilon": {"type": "number"},
            "fields": {"type": "array", "items": {"type": "string"}},
        }, "additionalProperties": False},
        "context": _CONTEXT_SCHEMA,
        "meta_prompt": {"type": "string"},
        "user_template": {"type": "string"},
        "trajectory": {"type": "string"},
        "best": {"type": "string"},
        "report": {"type": "string"},
    },
    "additionalProperties": False,
}

BUILTIN_SCHEMAS = {"GSM8K": apo.GSM8K, "OptimizationTask": apo.OPTIMIZATION_TASK}


# -- config plumbing ---------------------------------------------------------

def _set_path(doc: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a mapping")
    cur[keys[-1]] = yaml.safe_load(raw)


def load_config(path: str | Path, overrides: list[str], schema: dict, args) -> tuple[dict, Path]:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set_path(doc, key, value)
    ctx = doc.setdefault("context", {})
    if getattr(args, "backend", None):
        ctx["backend"] = args.backend
    if getattr(args, "seed", None) is not None:
        ctx["seed"] = args.seed
    if getattr(args, "batch_size", None) is not None:
        ctx["batch_size"] = args.batch_size
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {path}: {where}: {exc.message}") from exc
    return doc, path.parent


def _schemas(doc: dict, base: Path) -> dict[str, TypeSchema]:
    out = dict(BUILTIN_SCHEMAS)
    for name, sdoc in (doc.get("schemas") or {}).items():
        if "file" in sdoc:
            sdoc = json.loads((base / sdoc["file"]).read_text(encoding="utf-8"))
        try:
            out[name] = TypeSchema.from_json({"name": name, **sdoc})
        except (KeyError, ValueError, TransductError) as exc:
            raise ConfigError(f"schema {name!r}: {exc}") from exc
    return out


def _schema_ref(ref, schemas) -> TypeSchema | None:
    if ref is None:
        return None
    if isinstance(ref, str):
        if ref not in schemas:
            raise ConfigError(f"unknown schema {ref!r}")
        return schemas[ref]
    return TypeSchema.from_json(ref)


def _load_responder(ref: str, base: Path):
    """Import ``module:attr``, looking in the config directory first."""
    if str(base.resolve()) not in sys.path:
        sys.path.insert(0, str(base.resolve()))
    try:
        return resolve_function(ref)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load mock responder {ref!r}: {exc}") from exc


def build_context(cdoc: dict, base: Path) -> ExecutionContext:
    llm = LLMConfig(
        backend=cdoc.get("backend", "mock"),
        model_id=cdoc.get("model", "mock-model"),
        temperature=cdoc.get("temperature", 0.0),
        seed=cdoc.get("seed", 0),
        endpoint=cdoc.get("endpoint", ""),
        auth_token_env=cdoc.get("auth_token_env", "TRANSDUCT_API_KEY"),
        timeout=cdoc.get("timeout", 60.0),
        max_output_tokens=cdoc.get("max_output_tokens", 1024),
    )
    template = PromptTemplate(None, cdoc.get("template_params") or {})
    if "template" in cdoc:
        template = PromptTemplate.from_file(base / cdoc["template"], **(cdoc.get("template_params") or {}))
    if llm.backend == "mock":
        mdoc = cdoc.get("mock") or {}
        script = [(e["match"], e["response"]) for e in mdoc.get("script", [])]
        if "script_file" in mdoc:
            entries = json.loads((base / mdoc["script_file"]).read_text(encoding="utf-8"))
            script += [(e["match"], e["response"]) for e in entries]
        responder = _load_responder(mdoc["responder"], base) if "responder" in mdoc else None
        backend = MockBackend(latency=mdoc.get("latency", 0.0), script=script, responder=responder)
    else:
        backend = HTTPBackend()
    return ExecutionContext(
        instructions=cdoc.get("instructions", ""),
        template=template,
        llm=llm,
        batch_size=cdoc.get("batch_size", 16),
        max_retries_per_item=cdoc.get("max_retries_per_item", 2),
        retry_backoff=cdoc.get("retry_backoff", 0.25),
        backend=backend,
    )


def _load_dataset(ddoc: dict, base: Path, schemas, ctx) -> AgenticInstance:
    schema = _schema_ref(ddoc.get("schema"), schemas)
    path = base / ddoc["path"]
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found")
    if schema is None and not path.read_text(encoding="utf-8").strip():
        raise InferenceAmbiguous(f"{path}: empty file and no schema")
    return load_jsonl(path, schema, ctx)


def _write_jsonl(path: Path, value) -> None:
    if isinstance(value, list):
        text = "".join(inst.to_jsonl() for inst in value)
    else:
        text = value.to_jsonl()
    path.write_text(text, encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        doc, base = load_config(args.config, args.set, RUN_CONFIG_SCHEMA, args)
        schemas = _schemas(doc, base)
        ctx = build_context(doc.get("context") or {}, base)
        pdoc = doc["pipeline"]
        if "file" in pdoc:
            pdoc = yaml.safe_load((base / pdoc["file"]).read_text(encoding="utf-8"))
        pipeline = Pipeline.from_doc(
            pdoc, schemas, datasets=lambda d: _load_dataset(d, base, schemas, ctx))
        source_schema = _schema_ref(doc["source"].get("schema"), schemas)
        if source_schema is not None:
            pipeline.check(source_schema)
    except (ConfigError, KeyError, ImportError, AttributeError, StageError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValidationError, InferenceAmbiguous) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    out_path = base / doc["output"]
    report_path = Path(args.report) if args.report else (base / doc["report"] if "report" in doc else None)
    try:
        source = _load_dataset(doc["source"], base, schemas, ctx)
    except InferenceAmbiguous:
        # empty input without a schema: nothing to do
        out_path.write_text("", encoding="utf-8")
        if report_path:
            report_path.write_text("", encoding="utf-8")
        return EXIT_OK
    except (FileNotFoundError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    try:
        if source_schema is None:
            pipeline.check(source.atype)
        run = pipeline.run(source, trace=args.trace)
    except StageError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    _write_jsonl(out_path, run.output)
    if report_path:
        run.report.to_jsonl(report_path)
    if args.trace:
        for i, value in enumerate(run.trace):
            _write_jsonl(out_path.with_suffix(f".stage{i}.jsonl"), value)
    for note in run.report.notes:
        log.info("%s", note)
    failed = run.report.failed
    if failed and doc.get("strict", True):
        print(f"{failed} item(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_optimize(args) -> int:
    try:
        doc, base = load_config(args.config, args.set, OPTIMIZE_CONFIG_SCHEMA, args)
        schemas = _schemas(doc, base)
        ctx = build_context(doc.get("context") or {}, base)
        if doc["evaluator"] not in apo.EVALUATORS:
            raise ConfigError(f"unknown evaluator {doc['evaluator']!r}; "
                              f"choose from {sorted(apo.EVALUATORS)}")
        evaluator = apo.EVALUATORS[doc["evaluator"]]
        cfg = apo.OptimizerConfig(**(doc.get("optimizer") or {}))
        meta = apo.OPT_META_INSTRUCTION
        if "meta_prompt" in doc:
            meta = (base / doc["meta_prompt"]).read_text(encoding="utf-8")
        user_template = apo.USER_PROMPT_TEMPLATE
        if "user_template" in doc:
            user_template = (base / doc["user_template"]).read_text(encoding="utf-8")
        train_ref = doc["train"].get("schema", "GSM8K")
        train_doc = {**doc["train"], "schema": train_ref}
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        trainset = _load_dataset(train_doc, base, schemas, ctx)
        apo.split_trainset(trainset, cfg)
    except (FileNotFoundError, ValidationError, InferenceAmbiguous, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        result = apo.optimize(trainset, evaluator, cfg, ctx, meta_instruction=meta,
                              user_template=user_template)
    except TransductError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    result.write_trajectory(base / doc.get("trajectory", "trajectory.jsonl"))
    best = {**result.best.params(), "score": result.best.score}
    (base / doc.get("best", "best.json")).write_text(
        json.dumps(best, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    report = args.report or (str(base / doc["report"]) if "report" in doc else None)
    if report:
        result.report.to_jsonl(report)
    print(f"best score {result.best.score:.2f} after {len(result.trajectory)} iteration(s)")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        sizes = [int(b) for b in args.batch_sizes.split(",") if b]
        if not sizes or min(sizes) < 1:
            raise ValueError("batch sizes must be positive integers")
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = run_bench(sizes, n=args.n, latency=args.latency, seed=args.seed or 0)
    print(format_table(rows))
    if args.csv:
        Path(args.csv).write_text(to_csv(rows), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transduct", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--backend", choices=["mock", "http"])
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--report")

    p_run = sub.add_parser("run", help="run a declarative pipeline over a JSONL dataset")
    common(p_run)
    p_run.add_argument("--trace", action="store_true", help="write every stage's output")
    p_run.set_defaults(func=cmd_run)

    p_opt = sub.add_parser("optimize", help="optimize a prompt template")
    common(p_opt)
    p_opt.set_defaults(func=cmd_optimize)

    p_bench = sub.add_parser("bench", help="time a mock workload at several batch sizes")
    p_bench.add_argument("--batch-sizes", default="1,2,4,8,16,32")
    p_bench.add_argument("--n", type=int, default=64)
    p_bench.add_argument("--latency", type=float, default=0.5, help="seconds per call")
    p_bench.add_argument("--seed", type=int)
    p_bench.add_argument("--csv")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

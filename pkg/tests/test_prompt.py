import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strategies import schemas, states
from transduct.agentic import AgenticInstance
from transduct.apo import GSM8K, USER_PROMPT_TEMPLATE, OptimizationTask, generate_candidates
from transduct.backends import MockBackend
from transduct.context import ExecutionContext, LLMConfig
from transduct.errors import EmptyTargetExample, UnknownSlot, UnresolvedPlaceholder
from transduct.prompt import (PromptTemplate, compose_prompt, render_fewshot, render_state,
                              render_target_schema)
from transduct.schema import INTEGER, REAL, TEXT, Slot, TypeSchema, enum_of, validate_state

FIXTURES = Path(__file__).parent / "fixtures"


def fixture(name):
    return (FIXTURES / name).read_text(encoding="utf-8").removesuffix("\n")


REVIEW = TypeSchema.of("ProductReview", ("reviewer", TEXT), ("text", TEXT), ("stars", INTEGER))
SENTIMENT = TypeSchema.of("SentimentSummary",
                          ("sentiment", enum_of("positive", "neutral", "negative")), ("reason", TEXT))
ANSWER = TypeSchema("Answer", (
    Slot("answer", TEXT, "the answer to the question"),
    Slot("justification", TEXT, "why the answer is right", optional=True),
    Slot("confidence", REAL, "confidence between 0 and 1", optional=True),
))
QA = TypeSchema.of("QA", ("question", TEXT), ("answer", TEXT))


def test_render_state_review():
    s = {"reviewer": "Alice", "text": "Excellent product quality and fast delivery!", "stars": 5}
    assert render_state(REVIEW, s) == \
        '{"reviewer":"Alice","text":"Excellent product quality and fast delivery!","stars":5}'


def test_render_state_order_and_absent():
    s = {"stars": 1, "reviewer": "Bob", "text": "x"}
    assert list(json.loads(render_state(REVIEW, s))) == ["reviewer", "text", "stars"]
    opt = TypeSchema("O", (Slot("a", TEXT, optional=True),))
    assert render_state(opt, {}) == "{}"


def test_render_state_subset():
    s = {"question": "Q?", "answer": "A"}
    assert render_state(QA, s, ["question"]) == json.dumps({"question": "Q?"}, separators=(",", ":"))
    with pytest.raises(UnknownSlot):
        render_state(QA, s, ["nope"])


def test_target_schema_golden():
    assert render_target_schema(ANSWER) == fixture("answer_schema.txt")
    assert render_target_schema(TypeSchema("Empty")) == "TARGET SCHEMA Empty:"
    block = render_target_schema(SENTIMENT)
    assert "one of: positive | neutral | negative" in block


def test_fewshot_block():
    p1 = ({"question": "a", "answer": "1"}, {"answer": "1"})
    p2 = ({"question": "b", "answer": "2"}, {"answer": "2"})
    tgt = QA.select(["answer"])
    assert render_fewshot([], QA, tgt) == ""
    one = render_fewshot([p1], QA, tgt)
    assert one.count("INPUT:") == 1 and one.count("OUTPUT:") == 1
    fwd, rev = render_fewshot([p1, p2], QA, tgt), render_fewshot([p2, p1], QA, tgt)
    assert fwd != rev
    assert sorted(fwd.split("\n\n")[1:] + [fwd.split("\n\n")[0].removeprefix("EXAMPLES:\n")]) == \
        sorted(rev.split("\n\n")[1:] + [rev.split("\n\n")[0].removeprefix("EXAMPLES:\n")])
    with pytest.raises(EmptyTargetExample):
        render_fewshot([({"question": "a"}, {})], QA, tgt)


def test_default_template_layout():
    p = compose_prompt(PromptTemplate(), {"question": "Q?", "answer": "A"}, ANSWER, source=QA,
                       instructions="Answer it")
    lines = p.user_text.split("\n")
    assert lines[:4] == ["SOURCE:", '{"question":"Q?","answer":"A"}', "TASK:", "Answer it"]
    assert p.user_text.endswith(fixture("answer_schema.txt") + "\nGenerate Output as JSON")
    assert p.system_text == ""


def test_custom_template_start_and_unresolved():
    p = compose_prompt(PromptTemplate("{question}"), {"question": "Q?"}, ANSWER, source=QA.select(["question"]))
    assert p.user_text.startswith("Q?")
    with pytest.raises(UnresolvedPlaceholder):
        compose_prompt(PromptTemplate("{nothing}"), {"question": "Q?"}, ANSWER, source=QA)
    p = compose_prompt(PromptTemplate("{{literal}} {question}"), {"question": "Q"}, ANSWER, source=QA)
    assert p.user_text.startswith("{literal} Q")


def test_plain_string_source():
    p = compose_prompt(PromptTemplate(), "What is the capital of Italy?", ANSWER)
    assert p.user_text.startswith("SOURCE:\nWhat is the capital of Italy?")


def test_system_text_from_params():
    t = PromptTemplate("{question}", {"role": "Math Problem Solver", "goal": "Solve it.",
                                      "expected_output": "A number"})
    p = compose_prompt(t, {"question": "1+1"}, ANSWER, source=QA, instructions="be brief")
    assert p.system_text.split("\n") == [
        "You are Math Problem Solver.", "Your personal goal is: Solve it.",
        "This is the expected criteria for your final answer: A number.", "be brief"]


def test_memory_block():
    p = compose_prompt(PromptTemplate(), {"question": "Q"}, ANSWER, source=QA.select(["question"]),
                       memory=("fact one", "fact two"))
    assert "\nCONTEXT:\nfact one\nfact two\nTARGET SCHEMA" in p.user_text


def test_gsm8k_user_prompt_golden():
    cand = {"role": "Math Problem Solver", "goal": "Solve problems step by step",
            "expected_output": "A single numeric value", "imperative": "Box the final numeric result."}
    question = ("Natalia sold clips to 48 of her friends in April, and then she sold half as many "
                "clips in May. How many clips did Natalia sell altogether in April and May?")
    src = TypeSchema.of("Joint", *[(k, TEXT) for k in cand], ("question", TEXT))
    target = GSM8K.select(["response_think", "response_answer"])
    p = compose_prompt(PromptTemplate(USER_PROMPT_TEMPLATE), {**cand, "question": question},
                       target, source=src)
    assert p.user_text == fixture("gsm8k_user_prompt.txt")
    # role line, goal line, criteria line, task, imperative last (before the schema block)
    body = p.user_text.split("\nTARGET SCHEMA")[0].split("\n")
    assert body[0].startswith("You are ") and body[1].startswith("Your personal goal is: ")
    assert body[2].startswith("This is the expected criteria") and body[-1] == cand["imperative"]


def test_meta_prompt_golden_via_generation():
    backend = MockBackend()
    ctx = ExecutionContext(llm=LLMConfig(seed=3), backend=backend, retry_backoff=0)
    history = [
        OptimizationTask(role="Solver", goal="Solve", expected_output="A number", imperative="Go.",
                         score=54, generation=0),
        OptimizationTask(role="Tutor", goal="Teach", expected_output="A number", imperative="Think.",
                         score=41, generation=1),
        OptimizationTask(role="Math Problem Solver", goal="Solve carefully",
                         expected_output="A boxed number", imperative="Box it.", score=60, generation=2),
    ]
    demo = render_state(QA, {"question": "1+1?", "answer": "2"})
    generate_candidates([demo], history, 1, ctx)
    (prompt,) = backend.audit.prompts()
    assert prompt.system_text == fixture("meta_prompt_system.txt")
    assert prompt.user_text == fixture("meta_prompt_user.txt")


def test_fewshot_only_adds_segment():
    state = {"question": "Q", "answer": "A"}
    block = render_fewshot([({"question": "x", "answer": "y"}, {"answer": "y"})], QA, ANSWER)
    plain = compose_prompt(PromptTemplate(), state, ANSWER, source=QA).user_text
    shot = compose_prompt(PromptTemplate(), state, ANSWER, source=QA, fewshot_block=block).user_text
    cut = shot.index(block)
    assert shot[:cut] + shot[cut + len(block) + 1:] == plain


def test_render_is_pure_across_threads():
    state = {"question": "Q é", "answer": "A"}

    def digest(_):
        return compose_prompt(PromptTemplate(), state, ANSWER, source=QA, instructions="x").digest()

    first = digest(0)
    assert all(digest(i) == first for i in range(100))
    with ThreadPoolExecutor(8) as pool:
        assert set(pool.map(digest, range(100))) == {first}
    assert len(first) == len(hashlib.sha256().hexdigest())


@settings(max_examples=200)
@given(st.data())
def test_render_state_roundtrip(data):
    schema = data.draw(schemas())
    s = validate_state(schema, data.draw(states(schema)))
    assert validate_state(schema, json.loads(render_state(schema, s))) == s


def test_template_from_file(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("Q: {question}", encoding="utf-8")
    t = PromptTemplate.from_file(path, role="x")
    assert t.placeholders() == ["question"] and t.params == {"role": "x"}


def test_instance_roundtrip_via_render():
    x = AgenticInstance.from_records(REVIEW, [{"reviewer": "A", "text": "t", "stars": "3"}])
    assert render_state(REVIEW, x[0]) == '{"reviewer":"A","text":"t","stars":3}'

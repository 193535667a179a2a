from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest

from conftest import POSTER_DESCRIPTION, answer_key, poster_question, synthetic_records, write_jsonl
from fakeserver import ChatServer
from prism.dataset import Category, ImagePayload, VisualQuestion, load_benchmark
from prism.endpoints import EndpointClient, EndpointConfig, MockBackend, mock_endpoint
from prism.errors import IntegrityError, RunAborted
from prism.instructions import GENERIC_TEXTS, InstructionSpec, Variant
from prism.pipeline import (
    PERCEPTION_FAILED,
    Pipeline,
    build_e2e_prompt,
    build_reasoning_prompt,
    ensemble_descriptions,
    make_manifest,
    run_benchmark,
)
from prism.scoring import compare_runs, score_run
from prism.store import Store, read_records

FIXTURES = Path(__file__).parent / "fixtures"


def vision(name, spec):
    return mock_endpoint(name, spec, "vision")


def text(name, spec):
    return mock_endpoint(name, spec, "text")


def keyed_vision(records, name="keyed"):
    ep = vision(name, "keyed:inline")
    backend = MockBackend("keyed:inline", answer_key(records))
    return ep, backend


def normalized(path: Path) -> list[str]:
    records, _ = read_records(path)
    out = []
    for r in records:
        r = {k: v for k, v in r.items() if k not in ("created_at", "timings")}
        out.append(json.dumps(r, sort_keys=True))
    return sorted(out)


@pytest.fixture
def bench10(tmp_path):
    records = synthetic_records(per_category=2, categories=("CP", "FP", "IR", "LR", "Math"))
    return write_jsonl(tmp_path / "bench10.jsonl", records), records


# prompts

def test_worked_reasoning_prompt():
    expected = (FIXTURES / "poster_prompt.txt").read_text(encoding="utf-8")
    assert build_reasoning_prompt(POSTER_DESCRIPTION, poster_question()) == expected


def test_open_ended_prompt_has_no_options():
    q = VisualQuestion(id="o", image=ImagePayload(data=b"x"), question="What is shown?",
                       options=(), answer=None, category=Category("CP"))
    prompt = build_reasoning_prompt("A cat.", q)
    assert prompt.endswith("Description: A cat.\nQuestion: What is shown?")
    assert "Options" not in prompt


def test_description_newlines_kept_verbatim():
    prompt = build_reasoning_prompt("line one\nline two", poster_question())
    assert "Description: line one\nline two\nQuestion: " in prompt


def test_empty_description_rejected():
    with pytest.raises(ValueError):
        build_reasoning_prompt("", poster_question())


def test_e2e_prompt_is_question_block():
    prompt = build_e2e_prompt(poster_question())
    assert prompt.startswith("Which special day")
    assert "Description" not in prompt
    assert prompt.endswith("Please select the correct answer from the options above.")


# ensembles

def test_ensemble_identity():
    assert ensemble_descriptions(["only one"]) == "only one"


def test_ensemble_two_blocks_and_order():
    assert ensemble_descriptions(["x", "y"]) == "Description 1:\nx\n\nDescription 2:\ny"
    assert ensemble_descriptions(["y", "x"]) == "Description 1:\ny\n\nDescription 2:\nx"


def test_ensemble_empty():
    with pytest.raises(ValueError):
        ensemble_descriptions([])


# perception and reasoning stages

def test_cache_hit_issues_no_requests(bench10, store):
    bench, records = bench10
    ep, backend = keyed_vision(records)
    manifest = make_manifest(bench, "prism", [ep], text("llm", "echo"), run_id="r")
    q = load_benchmark(bench)[0]
    client = EndpointClient(transports={ep.name: httpx.MockTransport(backend)})
    first = Pipeline(manifest, store, client).run_perception(q)
    assert len(backend.requests) == 1 and not first[0].cache_hit
    again = Pipeline(manifest, store, client).run_perception(q)
    assert len(backend.requests) == 1 and again[0].cache_hit
    assert again[0].description == first[0].description == answer_key(records)[q.image.digest]


def test_shared_image_single_upstream_call(tmp_path, store):
    records = synthetic_records(per_category=2, categories=("CP",), shared_images=1)
    bench = write_jsonl(tmp_path / "b.jsonl", records)
    backend = MockBackend("fixed:a shared picture")
    ep = vision("v", "fixed:a shared picture")
    manifest = make_manifest(bench, "prism", [ep], text("llm", "echo-description"),
                             run_id="r", parallelism=4)
    client = EndpointClient(transports={"v": httpx.MockTransport(backend)})
    path = run_benchmark(manifest, store, client)
    outcomes = [r for r in read_records(path)[0] if r["type"] == "outcome"]
    assert len(outcomes) == 2
    assert len(backend.requests) == 1


def test_run_reasoning_fixed_answer(bench10, store):
    bench, _ = bench10
    manifest = make_manifest(bench, "prism", [vision("v", "echo")], text("llm", "fixed:C. Father's Day."),
                             run_id="r")
    pipe = Pipeline(manifest, store, EndpointClient())
    q = poster_question()
    rec = pipe.run_reasoning(q, POSTER_DESCRIPTION)
    assert rec.raw_answer == "C. Father's Day."
    assert rec.prompt == (FIXTURES / "poster_prompt.txt").read_text(encoding="utf-8")


def test_empty_description_skips_reasoning(bench10, store):
    bench, _ = bench10
    llm = text("llm", "echo")
    manifest = make_manifest(bench, "prism", [vision("v", "keyed:inline")], llm, run_id="r")
    client = EndpointClient(transports={"v": httpx.MockTransport(MockBackend("keyed:inline", {}))})
    rec = Pipeline(manifest, store, client).process(load_benchmark(bench)[0])
    assert rec["status"] == PERCEPTION_FAILED
    assert client.request_counts["llm"] == 0


def test_prompt_is_reconstructible(bench10, store):
    bench, records = bench10
    ep, backend = keyed_vision(records)
    manifest = make_manifest(bench, "prism", [ep], text("llm", "echo"), run_id="r")
    client = EndpointClient(transports={ep.name: httpx.MockTransport(backend)})
    q = load_benchmark(bench)[3]
    rec = Pipeline(manifest, store, client).process(q)
    assert rec["prompt"] == build_reasoning_prompt(rec["description"], q)
    assert rec["raw_answer"] == rec["prompt"]
    assert rec["instruction"] == GENERIC_TEXTS[Variant.HUMAN1]


def test_ensemble_in_pipeline(bench10, store):
    bench, _ = bench10
    a, b = vision("a", "fixed:first view"), vision("b", "fixed:second view")
    q = load_benchmark(bench)[0]
    m1 = make_manifest(bench, "prism", [a, b], text("llm", "echo"), run_id="r1")
    m2 = make_manifest(bench, "prism", [b, a], text("llm", "echo"), run_id="r2")
    d1 = Pipeline(m1, store, EndpointClient()).process(q)["description"]
    d2 = Pipeline(m2, store, EndpointClient()).process(q)["description"]
    assert d1 == "Description 1:\nfirst view\n\nDescription 2:\nsecond view"
    assert d2 == "Description 1:\nsecond view\n\nDescription 2:\nfirst view"


# query-specific instructions

def test_query_specific_instruction(bench10, store):
    bench, _ = bench10
    llm = text("llm", "fixed:the central object")
    manifest = make_manifest(bench, "prism", [vision("v", "echo")], llm,
                             run_id="r", instruction="query-specific:human1")
    rec = Pipeline(manifest, store, EndpointClient()).process(load_benchmark(bench)[0])
    assert rec["instruction"] == (GENERIC_TEXTS[Variant.HUMAN1]
                                  + " Especially, pay attention to the central object.")
    assert rec["degraded_instruction"] is False
    # description is an echo of the perception request text
    assert rec["description"] == rec["instruction"]


def test_query_specific_degrades_to_generic(bench10, store):
    bench, _ = bench10
    llm = text("llm", "fixed:")
    manifest = make_manifest(bench, "prism", [vision("v", "echo")], llm,
                             run_id="r", instruction="query-specific:human1")
    path = run_benchmark(manifest, store, EndpointClient())
    questions = load_benchmark(bench)
    report = score_run(path, questions, "solver-eval", 0)
    assert report.degraded_instruction_count == len(questions)
    outcomes = [r for r in read_records(path)[0] if r["type"] == "outcome"]
    assert all(r["instruction"] == GENERIC_TEXTS[Variant.HUMAN1] for r in outcomes)


def test_contents_generation_is_cached(bench10, store):
    bench, _ = bench10
    backend = MockBackend("fixed:the colours")
    llm = text("llm", "fixed:the colours")
    manifest = make_manifest(bench, "prism", [vision("v", "echo")], llm,
                             run_id="r", instruction="query-specific:human1")
    q = load_benchmark(bench)[0]
    for _ in range(2):
        client = EndpointClient(transports={"llm": httpx.MockTransport(backend)})
        spec, degraded = Pipeline(manifest, store, client).instruction_for(q)
        assert not degraded and spec.part.contents == "the colours"
    assert len(backend.requests) == 1


# end-to-end baseline

def test_e2e_mode(bench10, store):
    bench, _ = bench10
    backend = MockBackend("fixed:A")
    ep = vision("vlm", "fixed:A")
    manifest = make_manifest(bench, "e2e", [ep], run_id="e2e")
    client = EndpointClient(transports={"vlm": httpx.MockTransport(backend)})
    path = run_benchmark(manifest, store, client)
    outcomes = [r for r in read_records(path)[0] if r["type"] == "outcome"]
    assert all(r["raw_answer"] == "A" and r["mode"] == "e2e" for r in outcomes)
    for body in backend.requests:
        parts = body["messages"][0]["content"]
        assert parts[0]["type"] == "text" and "Description" not in parts[0]["text"]
        assert parts[1]["type"] == "image_url"

    questions = load_benchmark(bench)
    prism = make_manifest(bench, "prism", [vision("v", "fixed:x")], text("llm", "fixed:A"), run_id="p")
    prism_path = run_benchmark(prism, store, EndpointClient())
    a = score_run(path, questions, "solver-eval", 0, benchmark_digest=manifest.benchmark_digest)
    b = score_run(prism_path, questions, "solver-eval", 0, benchmark_digest=prism.benchmark_digest)
    assert compare_runs(a, b)["overall"] == 0


# run_benchmark

class Crash(BaseException):
    pass


class CrashingBackend(MockBackend):
    def __init__(self, spec, after):
        super().__init__(spec)
        self.after = after

    def __call__(self, request):
        if len(self.requests) >= self.after:
            raise Crash()
        return super().__call__(request)


def test_resume_after_crash_matches_clean_run(bench10, tmp_path):
    bench, records = bench10
    ep, _ = keyed_vision(records)
    llm = text("llm", "echo-description")
    key = answer_key(records)

    def client(reasoner=None):
        transports = {ep.name: httpx.MockTransport(MockBackend("keyed:inline", key))}
        if reasoner is not None:
            transports["llm"] = httpx.MockTransport(reasoner)
        return EndpointClient(transports=transports)

    clean_store = Store(tmp_path / "clean")
    clean = run_benchmark(make_manifest(bench, "prism", [ep], llm, run_id="x"), clean_store, client())

    store = Store(tmp_path / "crashy")
    manifest = make_manifest(bench, "prism", [ep], llm, run_id="x")
    with pytest.raises(Crash):
        run_benchmark(manifest, store, client(CrashingBackend("echo-description", after=5)))
    partial, _ = read_records(store.run_dir("x") / "results.jsonl")
    assert len(partial) == 5
    resumed = run_benchmark(manifest, store, client())
    assert normalized(resumed) == normalized(clean)


def test_torn_tail_is_repaired_on_resume(bench10, store):
    bench, _ = bench10
    manifest = make_manifest(bench, "prism", [vision("v", "fixed:x")], text("llm", "fixed:A"), run_id="t")
    path = run_benchmark(manifest, store)
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:4]) + lines[4][:20])
    run_benchmark(manifest, store)
    records, _ = read_records(path)
    assert len([r for r in records if r["type"] == "outcome"]) == 10


def test_parallelism_does_not_change_results(bench10, tmp_path):
    bench, records = bench10
    key = answer_key(records)
    paths = []
    for par in (1, 8):
        ep = vision("keyed", "keyed:inline")
        manifest = make_manifest(bench, "prism", [ep], text("llm", "echo-description"),
                                 run_id="p", parallelism=par)
        client = EndpointClient(transports={"keyed": httpx.MockTransport(MockBackend("keyed:inline", key))})
        paths.append(run_benchmark(manifest, Store(tmp_path / f"s{par}"), client))
    assert normalized(paths[0]) == normalized(paths[1])


def test_rerun_of_finished_run_is_noop(bench10, store):
    bench, _ = bench10
    manifest = make_manifest(bench, "prism", [vision("v", "fixed:x")], text("llm", "fixed:A"), run_id="t")
    path = run_benchmark(manifest, store)
    before = path.read_bytes()
    client = EndpointClient()
    run_benchmark(manifest, store, client)
    assert path.read_bytes() == before
    assert sum(client.request_counts.values()) == 0


def test_changed_benchmark_is_integrity_error(bench10, store):
    bench, records = bench10
    manifest = make_manifest(bench, "prism", [vision("v", "echo")], text("llm", "echo"), run_id="t")
    write_jsonl(bench, records[:-1])
    with pytest.raises(IntegrityError):
        run_benchmark(manifest, store)


def test_manifest_mismatch_is_integrity_error(bench10, store):
    bench, _ = bench10
    run_benchmark(make_manifest(bench, "prism", [vision("v", "fixed:x")], text("llm", "fixed:A"),
                                run_id="t"), store)
    other = make_manifest(bench, "prism", [vision("v", "fixed:y")], text("llm", "fixed:A"), run_id="t")
    with pytest.raises(IntegrityError):
        run_benchmark(other, store)


def test_permanent_error_aborts(bench10, store):
    bench, _ = bench10
    ep = vision("v", "echo")
    manifest = make_manifest(bench, "prism", [ep], text("llm", "echo"), run_id="t")
    deny = httpx.MockTransport(lambda req: httpx.Response(401, json={"error": "bad key"}))
    with pytest.raises(RunAborted):
        run_benchmark(manifest, store, EndpointClient(transports={"v": deny}))


def test_limit_subsamples_deterministically(bench10, tmp_path):
    bench, _ = bench10
    ids = []
    for i in range(2):
        manifest = make_manifest(bench, "prism", [vision("v", "fixed:x")], text("llm", "fixed:A"),
                                 run_id="l", limit=4, seed=3)
        path = run_benchmark(manifest, Store(tmp_path / f"s{i}"))
        ids.append([r["question_id"] for r in read_records(path)[0] if r["type"] == "outcome"])
    assert len(ids[0]) == 4 and ids[0] == ids[1]


# live wire format via a local server

def test_self_run_bodies_and_credentials(bench10, store, monkeypatch):
    bench, _ = bench10
    secret = "sk-test-do-not-persist-0123456789"
    monkeypatch.setenv("PRISM_TEST_KEY", secret)
    with ChatServer(MockBackend("fixed:A")) as server:
        ep = EndpointConfig(name="self", modality="vision", base_url=server.url, model_id="m-1",
                            credential="PRISM_TEST_KEY", backoff_base=0, rate_limit=1e6)
        manifest = make_manifest(bench, "prism", [ep], ep, run_id="self")
        run_benchmark(manifest, store)
        bodies = server.bodies()
        headers = [e["headers"] for e in server.log]
    perception = [b for b in bodies if isinstance(b["messages"][0]["content"], list)]
    reasoning = [b for b in bodies if isinstance(b["messages"][0]["content"], str)]
    assert len(perception) == len(reasoning) == 10
    assert all(any(p["type"] == "image_url" for p in b["messages"][0]["content"]) for b in perception)
    assert all("data:image" not in b["messages"][0]["content"] for b in reasoning)
    assert all(b["temperature"] == 0 and b["model"] == "m-1" for b in bodies)
    assert all(h.get("Authorization") == f"Bearer {secret}" for h in headers)
    for f in store.root.rglob("*"):
        if f.is_file():
            assert secret not in f.read_text(encoding="utf-8", errors="replace")


def test_instruction_spec_rendering():
    spec = InstructionSpec(Variant.COT)
    assert spec.rendered == GENERIC_TEXTS[Variant.COT]
    assert spec.mode == "generic"

"""Perception -> reasoning orchestration over a benchmark."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .dataset import VisualQuestion, file_digest, load_benchmark, subsample
from .endpoints import EndpointClient, EndpointConfig
from .errors import (
    ConfigError,
    GenerationFailed,
    IntegrityError,
    PermanentError,
    RunAborted,
    TransientError,
)
from .instructions import (
    InstructionSpec,
    QuerySpecificPart,
    Variant,
    build_contents_prompt,
    generate_query_specific,
    parse_contents_reply,
    parse_instruction_mode,
)
from .store import CacheEntry, RunWriter, Store, cache_key, canonical_json, read_records, repair_tail, utcnow

logger = logging.getLogger(__name__)

REASONING_PREAMBLE = (
    "You are an excellent text-based reasoning expert. You are required to answer the "
    "question based on the detailed description of the image."
)
SELECT_SENTENCE = "Please select the correct answer from the options above."

ANSWERED = "answered"
PERCEPTION_FAILED = "perception_failed"
REASONING_FAILED = "reasoning_failed"


def options_block(question: VisualQuestion) -> str:
    return "Options:\n" + "\n".join(f"{o.letter}. {o.text}" for o in question.options)


def question_block(question: VisualQuestion) -> str:
    """Question text, lettered options and the selection sentence."""
    if not question.options:
        return question.question
    return f"{question.question}\n\n{options_block(question)}\n\n{SELECT_SENTENCE}"


def build_reasoning_prompt(description: str, question: VisualQuestion) -> str:
    if not description:
        raise ValueError("description must be non-empty")
    return f"{REASONING_PREAMBLE}\nDescription: {description}\nQuestion: {question_block(question)}"


def build_e2e_prompt(question: VisualQuestion) -> str:
    return question_block(question)


def contents_question_text(question: VisualQuestion, include_options: bool = False) -> str:
    if include_options and question.options:
        return f"{question.question}\n{options_block(question)}"
    return question.question


@dataclass(frozen=True)
class DescriptionRecord:
    question_id: str
    perception_model: str
    instruction: InstructionSpec
    description: str
    finish_reason: str
    created_at: str
    cache_key: str
    endpoint: str = ""
    cache_hit: bool = False

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model": self.perception_model,
            "description": self.description,
            "finish_reason": self.finish_reason,
            "cache_key": self.cache_key,
        }


@dataclass(frozen=True)
class ReasoningRecord:
    question_id: str
    reasoning_model: str
    prompt: str
    raw_answer: str
    finish_reason: str


def ensemble_descriptions(records) -> str:
    """Join descriptions in manifest order; a single description passes through unchanged."""
    descriptions = [r.description if isinstance(r, DescriptionRecord) else r for r in records]
    if not descriptions:
        raise ValueError("no descriptions to ensemble")
    if len(descriptions) == 1:
        return descriptions[0]
    return "\n\n".join(f"Description {i}:\n{d}" for i, d in enumerate(descriptions, start=1))


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    benchmark: str
    benchmark_digest: str
    mode: str  # "prism" or "e2e"
    perception: tuple[EndpointConfig, ...] = ()
    reasoning: EndpointConfig | None = None
    instruction: str = "generic:human1"
    seed: int = 0
    limit: int | None = None
    parallelism: int = 1
    contents_include_options: bool = False
    multi_image: bool = False
    require_answers: bool = True

    def __post_init__(self):
        if self.mode not in ("prism", "e2e"):
            raise ConfigError(f"mode must be prism or e2e, got {self.mode!r}")
        if not self.perception:
            raise ConfigError("at least one perception endpoint is required")
        for ep in self.perception:
            if ep.modality != "vision":
                raise ConfigError(f"perception endpoint {ep.name} is not a vision endpoint")
        if self.mode == "prism" and self.reasoning is None:
            raise ConfigError("prism mode needs a reasoning endpoint")
        if self.mode == "e2e" and len(self.perception) != 1:
            raise ConfigError("e2e mode takes exactly one vision endpoint")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        try:
            parse_instruction_mode(self.instruction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def instruction_mode(self) -> tuple[str, Variant]:
        return parse_instruction_mode(self.instruction)

    def pinned(self) -> dict:
        """Fields that define the run's results (not run_id or parallelism)."""
        mode, variant = self.instruction_mode
        return {
            "benchmark_digest": self.benchmark_digest,
            "mode": self.mode,
            "perception": [ep.fingerprint() for ep in self.perception],
            "reasoning": self.reasoning.fingerprint() if self.reasoning and self.mode == "prism" else None,
            "instruction": f"{mode}:{variant.value}",
            "seed": self.seed,
            "limit": self.limit,
            "contents_include_options": self.contents_include_options,
            "multi_image": self.multi_image,
        }

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.pinned()).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        def ep(e: EndpointConfig) -> dict:
            d = {k: getattr(e, k) for k in e.__dataclass_fields__}
            d["params"] = e.params.to_dict()
            return d

        return {
            "run_id": self.run_id,
            "benchmark": self.benchmark,
            "benchmark_digest": self.benchmark_digest,
            "mode": self.mode,
            "perception": [ep(e) for e in self.perception],
            "reasoning": ep(self.reasoning) if self.reasoning else None,
            "instruction": self.instruction,
            "seed": self.seed,
            "limit": self.limit,
            "parallelism": self.parallelism,
            "contents_include_options": self.contents_include_options,
            "multi_image": self.multi_image,
            "require_answers": self.require_answers,
            "manifest_digest": self.digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = dict(d)
        d.pop("manifest_digest", None)
        d.pop("provenance", None)
        d["perception"] = tuple(EndpointConfig.from_dict(e) for e in d["perception"])
        if d.get("reasoning"):
            d["reasoning"] = EndpointConfig.from_dict(d["reasoning"])
        return cls(**d)


def new_run_id(manifest_digest: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return f"{stamp}-{manifest_digest[:8]}"


def make_manifest(benchmark: str | Path, mode: str, perception, reasoning=None, *,
                  run_id: str | None = None, **kw) -> RunManifest:
    """Build a manifest, pinning the benchmark file's digest and a run id."""
    benchmark = str(Path(benchmark))
    m = RunManifest(
        run_id=run_id or "pending",
        benchmark=benchmark,
        benchmark_digest=file_digest(benchmark),
        mode=mode,
        perception=tuple(perception),
        reasoning=reasoning,
        **kw,
    )
    if run_id is None:
        m = replace(m, run_id=new_run_id(m.digest))
    return m


def select_questions(manifest: RunManifest) -> list[VisualQuestion]:
    questions = load_benchmark(manifest.benchmark, require_answers=manifest.require_answers)
    if manifest.limit is not None and manifest.limit < len(questions):
        questions = subsample(questions, manifest.limit, manifest.seed)
    return questions


class Pipeline:
    """Per-run orchestration. Safe to call ``process`` from several worker threads."""

    def __init__(self, manifest: RunManifest, store: Store, client: EndpointClient):
        self.manifest = manifest
        self.store = store
        self.client = client
        self._key_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def _images(self, question: VisualQuestion):
        images = question.images
        return images if self.manifest.multi_image else images[:1]

    # -- instructions ---------------------------------------------------------

    def _contents(self, question: VisualQuestion) -> QuerySpecificPart:
        reasoner = self.manifest.reasoning
        text = contents_question_text(question, self.manifest.contents_include_options)
        prompt = build_contents_prompt(text)
        key = cache_key(reasoner.model_id, "", prompt, reasoner.params.canonical())
        with self._lock_for(key):
            hit = self.store.cache_get(key)
            if hit is not None:
                contents = parse_contents_reply(hit.description)
                if contents:
                    return QuerySpecificPart(contents)
                raise GenerationFailed("cached contents reply is empty")
            part = None
            try:
                part = generate_query_specific(self.client, reasoner, text)
            finally:
                if part is not None:
                    self.store.cache_put(CacheEntry(key, part.contents, "stop", utcnow(), reasoner.model_id))
            return part

    def instruction_for(self, question: VisualQuestion) -> tuple[InstructionSpec, bool]:
        """Returns (instruction, degraded) where degraded means query-specific fell back to generic."""
        mode, variant = self.manifest.instruction_mode
        if mode == "generic":
            return InstructionSpec(variant), False
        try:
            return InstructionSpec(variant, self._contents(question)), False
        except (GenerationFailed, TransientError) as exc:
            logger.warning("question %s: query-specific instruction failed (%s); using generic",
                           question.id, exc)
            return InstructionSpec(variant), True

    # -- stages ---------------------------------------------------------------

    def run_perception(self, question: VisualQuestion,
                       instruction: InstructionSpec | None = None) -> list[DescriptionRecord]:
        if instruction is None:
            instruction, _ = self.instruction_for(question)
        rendered = instruction.rendered
        images = self._images(question)
        image_digest = "+".join(img.digest for img in images)
        records = []
        for ep in self.manifest.perception:
            key = cache_key(ep.model_id, image_digest, rendered, ep.params.canonical())
            with self._lock_for(key):
                entry = self.store.cache_get(key)
                hit = entry is not None
                if entry is None:
                    reply = self.client.perceive(ep, images, rendered)
                    entry = CacheEntry(key, reply.text, reply.finish_reason, utcnow(), ep.model_id)
                    self.store.cache_put(entry)
            records.append(DescriptionRecord(
                question_id=question.id,
                perception_model=ep.model_id,
                instruction=instruction,
                description=entry.description,
                finish_reason=entry.finish_reason,
                created_at=entry.created_at,
                cache_key=key,
                endpoint=ep.name,
                cache_hit=hit,
            ))
        return records

    def run_reasoning(self, question: VisualQuestion, description: str) -> ReasoningRecord:
        ep = self.manifest.reasoning
        prompt = build_reasoning_prompt(description, question)
        reply = self.client.complete(ep, prompt)
        return ReasoningRecord(question.id, ep.name, prompt, reply.text, reply.finish_reason)

    def run_e2e(self, question: VisualQuestion) -> ReasoningRecord:
        ep = self.manifest.perception[0]
        prompt = build_e2e_prompt(question)
        reply = self.client.perceive(ep, self._images(question), prompt)
        return ReasoningRecord(question.id, ep.name, prompt, reply.text, reply.finish_reason)

    def process(self, question: VisualQuestion) -> dict:
        """Run one question end to end and return its outcome record."""
        if self.manifest.mode == "e2e":
            return self._process_e2e(question)
        rec = {
            "type": "outcome",
            "question_id": question.id,
            "category": str(question.category),
            "mode": "prism",
            "status": ANSWERED,
            "descriptions": [],
            "description": None,
            "prompt": None,
            "reasoning_model": self.manifest.reasoning.name,
            "raw_answer": None,
            "finish_reason": None,
            "error": None,
        }
        timings = {}
        t0 = time.monotonic()
        instruction, degraded = self.instruction_for(question)
        rec["instruction"] = instruction.rendered
        rec["instruction_mode"] = instruction.mode
        rec["degraded_instruction"] = degraded
        t1 = time.monotonic()
        timings["instruction_s"] = round(t1 - t0, 4)
        try:
            descriptions = self.run_perception(question, instruction)
        except TransientError as exc:
            rec["status"] = PERCEPTION_FAILED
            rec["error"] = str(exc)
            rec["timings"] = timings
            return rec
        t2 = time.monotonic()
        timings["perception_s"] = round(t2 - t1, 4)
        timings["cache_hits"] = sum(d.cache_hit for d in descriptions)
        rec["descriptions"] = [d.to_dict() for d in descriptions]
        description = ensemble_descriptions(descriptions)
        rec["description"] = description
        if not description.strip():
            rec["status"] = PERCEPTION_FAILED
            rec["error"] = "empty description"
            rec["timings"] = timings
            return rec
        rec["prompt"] = build_reasoning_prompt(description, question)
        try:
            reasoning = self.run_reasoning(question, description)
        except TransientError as exc:
            rec["status"] = REASONING_FAILED
            rec["error"] = str(exc)
        else:
            rec["raw_answer"] = reasoning.raw_answer
            rec["finish_reason"] = reasoning.finish_reason
        timings["reasoning_s"] = round(time.monotonic() - t2, 4)
        rec["timings"] = timings
        return rec

    def _process_e2e(self, question: VisualQuestion) -> dict:
        ep = self.manifest.perception[0]
        rec = {
            "type": "outcome",
            "question_id": question.id,
            "category": str(question.category),
            "mode": "e2e",
            "status": ANSWERED,
            "instruction": None,
            "instruction_mode": None,
            "degraded_instruction": False,
            "descriptions": [],
            "description": None,
            "prompt": build_e2e_prompt(question),
            "reasoning_model": ep.name,
            "raw_answer": None,
            "finish_reason": None,
            "error": None,
        }
        t0 = time.monotonic()
        try:
            reply = self.run_e2e(question)
        except TransientError as exc:
            rec["status"] = REASONING_FAILED
            rec["error"] = str(exc)
        else:
            rec["raw_answer"] = reply.raw_answer
            rec["finish_reason"] = reply.finish_reason
        rec["timings"] = {"e2e_s": round(time.monotonic() - t0, 4)}
        return rec


def _write_json_atomic(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_manifest(run_dir: str | Path) -> RunManifest:
    data = json.loads((Path(run_dir) / "run.json").read_text(encoding="utf-8"))
    return RunManifest.from_dict(data)


def run_benchmark(manifest: RunManifest, store: Store, client: EndpointClient | None = None) -> Path:
    """Process every selected question, appending outcomes to ``results.jsonl``.

    Re-running with a manifest whose digest matches the stored ``run.json``
    resumes: completed question ids are skipped.
    """
    own_client = client is None
    client = client or EndpointClient(seed=manifest.seed)
    run_dir = store.run_dir(manifest.run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "run.json"
    results_path = run_dir / "results.jsonl"

    current = file_digest(manifest.benchmark)
    if current != manifest.benchmark_digest:
        raise IntegrityError(
            f"benchmark {manifest.benchmark} changed since the run was created "
            f"(digest {current[:12]} != {manifest.benchmark_digest[:12]})"
        )
    if manifest_path.exists():
        stored = json.loads(manifest_path.read_text(encoding="utf-8"))
        if stored.get("manifest_digest") != manifest.digest:
            raise IntegrityError(
                f"run {manifest.run_id}: manifest digest {manifest.digest[:12]} does not match "
                f"stored {str(stored.get('manifest_digest'))[:12]}"
            )
    else:
        _write_json_atomic(manifest_path, manifest.to_dict())

    repair_tail(results_path)
    records, _ = read_records(results_path)
    done = {r["question_id"] for r in records if r.get("type") == "outcome"}
    finished = any(r.get("type") == "footer" for r in records)
    questions = select_questions(manifest)
    todo = [q for q in questions if q.id not in done]
    if finished and not todo:
        return results_path
    if done:
        logger.info("resuming run %s: %d done, %d to go", manifest.run_id, len(done), len(todo))

    pipeline = Pipeline(manifest, store, client)
    writer = RunWriter(results_path)
    stop = threading.Event()

    def work(q: VisualQuestion) -> None:
        if stop.is_set():
            return
        rec = pipeline.process(q)
        rec["created_at"] = utcnow()
        writer.append(rec)

    try:
        if manifest.parallelism == 1:
            for q in todo:
                work(q)
        else:
            with ThreadPoolExecutor(max_workers=manifest.parallelism) as pool:
                futures = [pool.submit(work, q) for q in todo]
                finished_set, pending = wait(futures, return_when=FIRST_EXCEPTION)
                failed = [f for f in finished_set if f.exception() is not None]
                if failed:
                    stop.set()
                    for f in pending:
                        f.cancel()
                    raise failed[0].exception()
    except PermanentError as exc:
        raise RunAborted(f"run {manifest.run_id} aborted: {exc}") from exc
    finally:
        provenance = {"warnings": list(client.warnings),
                      "request_counts": dict(client.request_counts)}
        try:
            data = json.loads(manifest_path.read_text(encoding="utf-8"))
            data["provenance"] = provenance
            _write_json_atomic(manifest_path, data)
        except OSError:
            logger.warning("could not record provenance for run %s", manifest.run_id)
        if own_client:
            client.close()

    records, _ = read_records(results_path)
    ids = [r["question_id"] for r in records if r.get("type") == "outcome"]
    if len(ids) != len(set(ids)):
        raise IntegrityError(f"{results_path}: duplicate outcome records")
    writer.append({
        "type": "footer",
        "manifest_digest": manifest.digest,
        "benchmark_digest": manifest.benchmark_digest,
        "n_outcomes": len(ids),
    })
    return results_path

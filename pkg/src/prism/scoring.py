"""Answer extraction, refusal handling and per-category accuracy reports."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .dataset import CATEGORY_ORDER, Option, VisualQuestion, parse_category, sort_categories
from .errors import ConfigError, IntegrityError
from .store import read_records

logger = logging.getLogger(__name__)

DEFAULT_REFUSAL_MARKERS = (
    "i'm sorry",
    "cannot answer",
    "unable to determine",
    "not enough information",
)

PERCEPTION_EVAL = "perception-eval"
SOLVER_EVAL = "solver-eval"
SCORE_MODES = (PERCEPTION_EVAL, SOLVER_EVAL)

REASONING_CATEGORIES = ("IR", "LR", "Math", "ST")
PERCEPTION_CATEGORIES = ("CP", "FP")


@dataclass(frozen=True)
class RefusalPolicy:
    markers: tuple[str, ...] = DEFAULT_REFUSAL_MARKERS
    mode: str = "count_as_failure"  # or "fallback_anyway"

    def __post_init__(self):
        if self.mode not in ("count_as_failure", "fallback_anyway"):
            raise ConfigError(f"unknown refusal mode {self.mode!r}")
        if self.mode == "count_as_failure" and not self.markers:
            raise ConfigError("count_as_failure needs at least one refusal marker")

    @classmethod
    def for_mode(cls, score_mode: str, markers: Sequence[str] | None = None) -> "RefusalPolicy":
        if score_mode not in SCORE_MODES:
            raise ConfigError(f"score mode must be one of {SCORE_MODES}, got {score_mode!r}")
        mode = "count_as_failure" if score_mode == PERCEPTION_EVAL else "fallback_anyway"
        return cls(tuple(markers) if markers is not None else DEFAULT_REFUSAL_MARKERS, mode)


def load_markers(path: str | Path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(line.strip().lower() for line in lines if line.strip() and not line.startswith("#"))


def _fold(text: str) -> str:
    return text.replace("’", "'").replace("‘", "'").lower()


def classify_refusal(text: str | None, policy: RefusalPolicy = RefusalPolicy()) -> bool:
    if text is None or not text.strip():
        return True
    folded = _fold(text)
    return any(_fold(m) in folded for m in policy.markers)


def _letters(options) -> list[str]:
    return [o.letter if isinstance(o, Option) else str(o[0]) for o in options]


def _texts(options) -> list[tuple[str, str]]:
    return [(o.letter, o.text) if isinstance(o, Option) else (str(o[0]), str(o[1])) for o in options]


_LEADING = re.compile(r"^\(?([A-Z])[.):]")
_ANSWER_IS = re.compile(r"answer(?:\s+is\s*:?|\s*:)\s*[\*\(\[]*([A-Z])\b", re.IGNORECASE)


def _norm_text(text: str) -> str:
    return " ".join(_fold(text).split()).strip(" .;,")


def extract_choice(raw: str | None, options) -> str | None:
    """Pick an option letter out of a free-form answer, or None.

    Rules, first hit wins:
      1. the whole answer is one letter in range;
      2. it starts with ``<letter>.``, ``<letter>)`` or ``<letter>:``;
      3. ``answer is <letter>`` / ``answer: <letter>`` (last occurrence);
      4. exactly one option's text appears in the answer.
    """
    if not raw:
        return None
    letters = _letters(options)
    text = raw.strip()
    if len(text) == 1 and text.upper() in letters:
        return text.upper()
    m = _LEADING.match(text)
    if m and m.group(1) in letters:
        return m.group(1)
    hits = [m.group(1) for m in _ANSWER_IS.finditer(text) if m.group(1) in letters]
    if hits:
        return hits[-1]
    haystack = " ".join(_fold(text).split())
    found = []
    for letter, option_text in _texts(options):
        needle = _norm_text(option_text)
        if needle and re.search(rf"(?<![a-z0-9]){re.escape(needle)}(?![a-z0-9])", haystack):
            found.append(letter)
    if len(found) == 1:
        return found[0]
    return None


def fallback_choice(rng_seed: int, question_id: str, options) -> str:
    """Seeded uniform pick, independent per question id."""
    letters = _letters(options)
    if len(letters) < 2:
        raise ValueError("fallback needs at least two options")
    h = hashlib.sha256(f"{rng_seed}\x1f{question_id}".encode("utf-8")).digest()
    return letters[int.from_bytes(h, "big") % len(letters)]


@dataclass(frozen=True)
class EvalOutcome:
    question_id: str
    predicted: str | None
    matched_by: str  # "rule", "fallback" or "none"
    refusal: bool
    correct: bool
    category: str = ""


def score_outcome(question: VisualQuestion, record: dict | None, policy: RefusalPolicy,
                  seed: int) -> EvalOutcome:
    fallback = policy.mode == "fallback_anyway"

    def done(pred, how, refusal):
        return EvalOutcome(question.id, pred, how, refusal, pred is not None and pred == question.answer,
                           str(question.category))

    def fall(refusal):
        if fallback:
            return done(fallback_choice(seed, question.id, question.options), "fallback", refusal)
        return done(None, "none", refusal)

    if record is None:
        return done(None, "none", False)
    status = record.get("status")
    raw = record.get("raw_answer")
    if status == "perception_failed":
        refusal = True
    elif status == "reasoning_failed":
        return fall(False)
    else:
        refusal = classify_refusal(raw, policy)
    if refusal:
        return fall(True)
    pred = extract_choice(raw, question.options)
    if pred is not None:
        return done(pred, "rule", False)
    return fall(False)


@dataclass
class CategoryScore:
    n: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


def macro_mean(accuracies: Iterable[float]) -> float:
    values = list(accuracies)
    return sum(values) / len(values) if values else 0.0


@dataclass
class ScoreReport:
    per_category: dict[str, CategoryScore] = field(default_factory=dict)
    refusal_count: int = 0
    fallback_count: int = 0
    degraded_instruction_count: int = 0
    perception_failed_count: int = 0
    reasoning_failed_count: int = 0
    missing: list[str] = field(default_factory=list)
    benchmark_digest: str = ""
    score_mode: str = ""
    seed: int = 0
    runs: list[dict] = field(default_factory=list)
    label: str = ""

    @property
    def n(self) -> int:
        return sum(c.n for c in self.per_category.values())

    @property
    def overall(self) -> float:
        """Unweighted mean over categories with at least one question."""
        return macro_mean(c.accuracy for c in self.per_category.values() if c.n > 0)

    @property
    def micro(self) -> float:
        n = self.n
        return sum(c.correct for c in self.per_category.values()) / n if n else 0.0

    def accuracy(self, category: str) -> float | None:
        c = self.per_category.get(category)
        return c.accuracy if c and c.n else None

    def to_dict(self) -> dict:
        cats = sort_categories(parse_category(k) for k in self.per_category)
        return {
            "label": self.label,
            "score_mode": self.score_mode,
            "seed": self.seed,
            "benchmark_digest": self.benchmark_digest,
            "per_category": {
                str(c): {
                    "n": self.per_category[str(c)].n,
                    "correct": self.per_category[str(c)].correct,
                    "accuracy": self.per_category[str(c)].accuracy,
                }
                for c in cats
            },
            "overall": self.overall,
            "micro": self.micro,
            "n": self.n,
            "refusal_count": self.refusal_count,
            "fallback_count": self.fallback_count,
            "degraded_instruction_count": self.degraded_instruction_count,
            "perception_failed_count": self.perception_failed_count,
            "reasoning_failed_count": self.reasoning_failed_count,
            "missing": list(self.missing),
            "runs": list(self.runs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        per = {k: CategoryScore(v["n"], v["correct"]) for k, v in d["per_category"].items()}
        keep = {k: d[k] for k in (
            "refusal_count", "fallback_count", "degraded_instruction_count",
            "perception_failed_count", "reasoning_failed_count", "missing",
            "benchmark_digest", "score_mode", "seed", "runs", "label",
        ) if k in d}
        return cls(per_category=per, **keep)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ScoreReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate(outcomes: Iterable[EvalOutcome]) -> dict[str, CategoryScore]:
    per: dict[str, CategoryScore] = {}
    for o in outcomes:
        c = per.setdefault(o.category, CategoryScore())
        c.n += 1
        c.correct += o.correct
    return per


def score_records(questions: Sequence[VisualQuestion], records: Iterable[dict],
                  policy: RefusalPolicy, seed: int) -> tuple[ScoreReport, list[EvalOutcome]]:
    for q in questions:
        if q.answer is None:
            raise ConfigError(f"question {q.id} has no ground-truth answer; cannot score")
    by_id: dict[str, dict] = {}
    for r in records:
        if r.get("type", "outcome") != "outcome":
            continue
        qid = r["question_id"]
        if qid in by_id:
            raise IntegrityError(f"more than one outcome for question {qid}")
        by_id[qid] = r
    known = {q.id for q in questions}
    extra = sorted(set(by_id) - known)
    if extra:
        logger.warning("%d outcomes refer to questions outside the benchmark (ignored)", len(extra))
    report = ScoreReport(seed=seed)
    outcomes = []
    for q in questions:
        rec = by_id.get(q.id)
        if rec is None:
            report.missing.append(q.id)
        else:
            report.degraded_instruction_count += bool(rec.get("degraded_instruction"))
            report.perception_failed_count += rec.get("status") == "perception_failed"
            report.reasoning_failed_count += rec.get("status") == "reasoning_failed"
        o = score_outcome(q, rec, policy, seed)
        report.refusal_count += o.refusal
        report.fallback_count += o.matched_by == "fallback"
        outcomes.append(o)
    if report.missing:
        logger.warning("%d questions have no outcome and are scored incorrect: %s",
                       len(report.missing), ", ".join(report.missing[:10]))
    report.per_category = aggregate(outcomes)
    return report, outcomes


def score_run(results_path: str | Path, questions: Sequence[VisualQuestion], score_mode: str,
              seed: int, markers: Sequence[str] | None = None,
              benchmark_digest: str = "") -> ScoreReport:
    policy = RefusalPolicy.for_mode(score_mode, markers)
    records, _ = read_records(results_path)
    report, _ = score_records(questions, records, policy, seed)
    report.score_mode = score_mode
    report.benchmark_digest = benchmark_digest
    footer = next((r for r in records if r.get("type") == "footer"), None)
    run = {"results": str(results_path)}
    if footer:
        run["manifest_digest"] = footer.get("manifest_digest")
    report.runs.append(run)
    return report


def compare_runs(report_a: ScoreReport, report_b: ScoreReport) -> dict:
    """Per-category and overall deltas (b - a) in percentage points."""
    if report_a.benchmark_digest != report_b.benchmark_digest:
        raise IntegrityError("reports were computed on different benchmarks")
    cats = sort_categories(parse_category(k) for k in {*report_a.per_category, *report_b.per_category})
    deltas = {}
    for c in cats:
        a, b = report_a.accuracy(str(c)), report_b.accuracy(str(c))
        deltas[str(c)] = None if a is None or b is None else 100.0 * (b - a)

    def group_mean(names):
        vals = [deltas[n] for n in names if deltas.get(n) is not None]
        return macro_mean(vals) if vals else None

    return {
        "a": report_a.label,
        "b": report_b.label,
        "per_category": deltas,
        "overall": 100.0 * (report_b.overall - report_a.overall),
        "micro": 100.0 * (report_b.micro - report_a.micro),
        "summary": {
            "perception_categories_delta": group_mean(PERCEPTION_CATEGORIES),
            "reasoning_categories_delta": group_mean(REASONING_CATEGORIES),
            "improved": [k for k, v in deltas.items() if v is not None and v > 0],
            "declined": [k for k, v in deltas.items() if v is not None and v < 0],
        },
    }


def _columns(reports: Sequence[ScoreReport]) -> list[str]:
    extra = sort_categories(
        parse_category(k) for r in reports for k in r.per_category if k not in CATEGORY_ORDER
    )
    return list(CATEGORY_ORDER) + [str(c) for c in extra]


def _fmt(value: float | None, signed: bool = False) -> str:
    if value is None:
        return "-"
    return f"{value:+.1f}" if signed else f"{value:.1f}"


def _grid(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    out = []
    for r in [header, *rows]:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out)


def render_table(reports: Sequence[ScoreReport], labels: Sequence[str] | None = None) -> str:
    """Accuracy table in percent, columns CP FP IR LR Math ST Overall."""
    cols = _columns(reports)
    labels = labels or [r.label or f"run{i + 1}" for i, r in enumerate(reports)]
    rows = []
    for label, r in zip(labels, reports):
        accs = [r.accuracy(c) for c in cols]
        rows.append([label] + [_fmt(None if a is None else 100 * a) for a in accs]
                    + [_fmt(100 * r.overall)])
    return _grid(["Model", *cols, "Overall"], rows)


def render_comparison(cmp: dict) -> str:
    cols = list(cmp["per_category"])
    row = [f"{cmp['b'] or 'b'} - {cmp['a'] or 'a'}"]
    row += [_fmt(cmp["per_category"][c], signed=True) for c in cols]
    row.append(_fmt(cmp["overall"], signed=True))
    s = cmp["summary"]
    lines = [
        _grid(["Delta", *cols, "Overall"], [row]),
        "",
        f"perception categories (CP, FP) mean delta: {_fmt(s['perception_categories_delta'], True)}",
        f"reasoning categories (IR, LR, Math, ST) mean delta: {_fmt(s['reasoning_categories_delta'], True)}",
    ]
    return "\n".join(lines)

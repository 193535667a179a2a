"""Benchmark loading and validation.

On-disk schema (JSONL, one object per line; TSV uses the same column names):

    index        unique question id (str or int)
    image        base64 image bytes, or a list of them for multi-image items
    image_path   path (relative to the benchmark file) instead of ``image``
    question     question stem
    A..Z         option texts, consecutive from A
    answer       ground-truth letter
    category     capability category, e.g. "coarse perception" or "CP"
    split        free-form tag, e.g. "full" or "F"
"""

from __future__ import annotations

import base64
import binascii
import csv
import hashlib
import json
import logging
import random
import re
import string
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DatasetError

logger = logging.getLogger(__name__)

LETTERS = string.ascii_uppercase

# canonical code -> long form
CANONICAL_CATEGORIES = {
    "CP": "coarse perception",
    "FP": "fine-grained perception",
    "IR": "instance reasoning",
    "LR": "logical reasoning",
    "Math": "mathematics",
    "ST": "science & technology",
}
CATEGORY_ORDER = tuple(CANONICAL_CATEGORIES)


def _category_key(raw: str) -> str:
    return re.sub(r"[^a-z0-9]", "", raw.lower().replace("&", "and"))


_CATEGORY_ALIASES: dict[str, str] = {}
for _code, _long in CANONICAL_CATEGORIES.items():
    _CATEGORY_ALIASES[_category_key(_code)] = _code
    _CATEGORY_ALIASES[_category_key(_long)] = _code
_CATEGORY_ALIASES[_category_key("math")] = "Math"
_CATEGORY_ALIASES[_category_key("science and technology")] = "ST"
_CATEGORY_ALIASES[_category_key("fine grained perception")] = "FP"


@dataclass(frozen=True)
class Category:
    label: str
    known: bool = True

    def __str__(self) -> str:
        return self.label

    @property
    def sort_key(self) -> tuple[int, str]:
        if self.known:
            return (CATEGORY_ORDER.index(self.label), "")
        return (len(CATEGORY_ORDER), self.label)


def parse_category(raw: str) -> Category:
    """Map a category string to one of the six canonical categories, else ``Other(raw)``."""
    code = _CATEGORY_ALIASES.get(_category_key(raw))
    if code is not None:
        return Category(code)
    return Category(raw.strip(), known=False)


def sort_categories(categories: Iterable[Category]) -> list[Category]:
    return sorted(set(categories), key=lambda c: c.sort_key)


@dataclass(frozen=True)
class ImagePayload:
    """Exactly one of ``data`` (inline bytes) or ``path`` is set."""

    data: bytes | None = None
    path: Path | None = None
    media_type: str = "image/png"
    digest: str = ""

    def __post_init__(self):
        if (self.data is None) == (self.path is None):
            raise ValueError("ImagePayload needs exactly one of data or path")
        if not self.digest:
            object.__setattr__(self, "digest", hashlib.sha256(self.read_bytes()).hexdigest())

    @classmethod
    def from_base64(cls, encoded: str, media_type: str | None = None) -> "ImagePayload":
        if encoded.startswith("data:"):
            header, _, encoded = encoded.partition(",")
            media_type = media_type or header[5:].split(";")[0]
        raw = base64.b64decode(encoded, validate=True)
        return cls(data=raw, media_type=media_type or sniff_media_type(raw))

    @classmethod
    def from_path(cls, path: str | Path, media_type: str | None = None) -> "ImagePayload":
        path = Path(path)
        raw = path.read_bytes()
        return cls(
            path=path,
            media_type=media_type or sniff_media_type(raw),
            digest=hashlib.sha256(raw).hexdigest(),
        )

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return self.path.read_bytes()

    def b64(self) -> str:
        return base64.b64encode(self.read_bytes()).decode("ascii")

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.b64()}"


def sniff_media_type(raw: bytes) -> str:
    if raw.startswith(b"\x89PNG"):
        return "image/png"
    if raw.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if raw[:6] in (b"GIF87a", b"GIF89a"):
        return "image/gif"
    if raw[:4] == b"RIFF" and raw[8:12] == b"WEBP":
        return "image/webp"
    return "image/png"


@dataclass(frozen=True)
class Option:
    letter: str
    text: str


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class VisualQuestion:
    id: str
    image: ImagePayload | None
    question: str
    options: tuple[Option, ...]
    answer: str | None
    category: Category
    split: str = "full"
    extra_images: tuple[ImagePayload, ...] = field(default=())

    @property
    def letters(self) -> tuple[str, ...]:
        return tuple(o.letter for o in self.options)

    def option_text(self, letter: str) -> str | None:
        for o in self.options:
            if o.letter == letter:
                return o.text
        return None

    @property
    def images(self) -> tuple[ImagePayload, ...]:
        if self.image is None:
            return self.extra_images
        return (self.image, *self.extra_images)


def check_question(q: VisualQuestion, require_answer: bool = True) -> list[tuple[str, str]]:
    """Return (field, message) pairs for every invariant ``q`` violates."""
    problems = []
    if not q.id:
        problems.append(("index", "empty id"))
    if not q.question or not q.question.strip():
        problems.append(("question", "empty question"))
    if q.image is None:
        problems.append(("image", "no image"))
    n = len(q.options)
    if not 2 <= n <= 26:
        problems.append(("options", f"need 2..26 options, got {n}"))
    if tuple(o.letter for o in q.options) != tuple(LETTERS[:n]):
        problems.append(("options", "option letters must be consecutive from A"))
    seen = set()
    for o in q.options:
        if not o.text.strip():
            problems.append((o.letter, "empty option text"))
        norm = normalize_ws(o.text)
        if norm in seen:
            problems.append((o.letter, f"duplicate option text {o.text!r}"))
        seen.add(norm)
    if q.answer is None:
        if require_answer:
            problems.append(("answer", "missing answer"))
    elif q.answer not in q.letters:
        problems.append(("answer", f"answer {q.answer!r} not among options {''.join(q.letters)}"))
    return problems


def _options_from_record(rec: dict, line: int) -> tuple[Option, ...]:
    present = []
    for letter in LETTERS:
        value = rec.get(letter)
        if value is None or (isinstance(value, str) and value.strip() == ""):
            continue
        if isinstance(value, float) and value != value:  # NaN from exported tables
            continue
        present.append((letter, str(value)))
    expected = LETTERS[: len(present)]
    got = "".join(letter for letter, _ in present)
    if got != expected:
        raise DatasetError(f"option columns {got} are not consecutive from A", line, "options")
    return tuple(Option(letter, text) for letter, text in present)


def _images_from_record(rec: dict, base_dir: Path, line: int) -> list[ImagePayload]:
    inline = rec.get("image")
    path = rec.get("image_path")
    has_inline = inline not in (None, "", [])
    has_path = path not in (None, "", [])
    if has_inline == has_path:
        raise DatasetError("exactly one of image / image_path is required", line, "image")
    media_type = rec.get("image_media_type") or None
    images = []
    if has_inline:
        items = inline if isinstance(inline, list) else [inline]
        if isinstance(inline, str) and inline.startswith("["):
            items = json.loads(inline)
        for item in items:
            try:
                images.append(ImagePayload.from_base64(item, media_type))
            except (binascii.Error, ValueError) as exc:
                raise DatasetError(f"invalid base64 image: {exc}", line, "image") from None
    else:
        items = path if isinstance(path, list) else [path]
        for item in items:
            full = Path(item)
            if not full.is_absolute():
                full = base_dir / full
            try:
                images.append(ImagePayload.from_path(full, media_type))
            except OSError as exc:
                raise DatasetError(f"cannot read image: {exc}", line, "image_path") from None
    return images


def question_from_record(
    rec: dict, *, line: int = 0, base_dir: Path = Path("."), require_answer: bool = True
) -> VisualQuestion:
    if not isinstance(rec, dict):
        raise DatasetError("record is not an object", line)
    qid = rec.get("index", rec.get("id"))
    if qid is None or str(qid).strip() == "":
        raise DatasetError("missing id", line, "index")
    qid = str(qid).strip()
    question = rec.get("question")
    if not isinstance(question, str) or not question.strip():
        raise DatasetError(f"question {qid}: empty or missing question", line, "question")
    images = _images_from_record(rec, base_dir, line)
    options = _options_from_record(rec, line)
    answer = rec.get("answer")
    if answer is not None:
        answer = str(answer).strip() or None
    if not require_answer:
        answer = None
    cat_raw = rec.get("category")
    if cat_raw is None or str(cat_raw).strip() == "":
        raise DatasetError(f"question {qid}: missing category", line, "category")
    q = VisualQuestion(
        id=qid,
        image=images[0],
        question=question,
        options=options,
        answer=answer,
        category=parse_category(str(cat_raw)),
        split=str(rec.get("split") or "full"),
        extra_images=tuple(images[1:]),
    )
    problems = check_question(q, require_answer=require_answer)
    if problems:
        fld, msg = problems[0]
        raise DatasetError(f"question {qid}: {msg}", line, fld)
    return q


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                yield lineno, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None


def _iter_tsv(path: Path) -> Iterator[tuple[int, dict]]:
    csv.field_size_limit(sys.maxsize)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            # header is line 1
            yield reader.line_num, {k: v for k, v in row.items() if k is not None}


def detect_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".tsv", ".tab"):
        return "tsv"
    return "jsonl"


def load_benchmark(
    path: str | Path, format: str | None = None, *, require_answers: bool = True
) -> list[VisualQuestion]:
    """Load every record of a benchmark file, in file order.

    Raises DatasetError naming the line and field of the first bad record,
    or the line of the second occurrence of a duplicated id.
    """
    path = Path(path)
    fmt = format or detect_format(path)
    if fmt not in ("jsonl", "tsv"):
        raise DatasetError(f"unknown benchmark format {fmt!r}")
    records = _iter_jsonl(path) if fmt == "jsonl" else _iter_tsv(path)
    out: list[VisualQuestion] = []
    seen: dict[str, int] = {}
    for lineno, rec in records:
        q = question_from_record(
            rec, line=lineno, base_dir=path.parent, require_answer=require_answers
        )
        if q.id in seen:
            raise DatasetError(
                f"duplicate id {q.id!r} (first seen on line {seen[q.id]})", lineno, "index"
            )
        seen[q.id] = lineno
        out.append(q)
    return out


def validate_benchmark(path: str | Path, format: str | None = None) -> list[str]:
    """Check every record and collect all problems instead of stopping at the first."""
    path = Path(path)
    fmt = format or detect_format(path)
    problems = []
    seen: dict[str, int] = {}
    try:
        records = list(_iter_jsonl(path) if fmt == "jsonl" else _iter_tsv(path))
    except (DatasetError, OSError) as exc:
        return [str(exc)]
    for lineno, rec in records:
        try:
            q = question_from_record(rec, line=lineno, base_dir=path.parent)
        except DatasetError as exc:
            problems.append(str(exc))
            continue
        if q.id in seen:
            problems.append(f"line {lineno}, field 'index': duplicate id {q.id!r}")
        seen.setdefault(q.id, lineno)
    return problems


def question_to_record(q: VisualQuestion) -> dict:
    rec: dict = {"index": q.id}
    images = q.images
    if all(img.data is not None for img in images):
        encoded = [img.b64() for img in images]
        rec["image"] = encoded[0] if len(encoded) == 1 else encoded
    else:
        paths = [str(img.path) for img in images]
        rec["image_path"] = paths[0] if len(paths) == 1 else paths
    if images and images[0].media_type != "image/png":
        rec["image_media_type"] = images[0].media_type
    rec["question"] = q.question
    for o in q.options:
        rec[o.letter] = o.text
    if q.answer is not None:
        rec["answer"] = q.answer
    rec["category"] = str(q.category)
    rec["split"] = q.split
    return rec


def dump_benchmark(questions: Iterable[VisualQuestion], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(question_to_record(q), ensure_ascii=False) + "\n")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def subsample(questions: list[VisualQuestion], n: int, seed: int) -> list[VisualQuestion]:
    """Draw ``n`` questions deterministically, keeping their original order.

    Stratified by category (``n // k`` per category, remainder drawn from the
    leftovers) when every category has at least ``n // k`` members; otherwise
    a plain uniform draw.
    """
    if n < 0 or n > len(questions):
        raise ValueError(f"cannot draw {n} of {len(questions)} questions")
    if n == len(questions):
        return list(questions)
    rng = random.Random(seed)
    by_cat: dict[Category, list[int]] = defaultdict(list)
    for i, q in enumerate(questions):
        by_cat[q.category].append(i)
    cats = sort_categories(by_cat)
    per = n // len(cats) if cats else 0
    if all(len(by_cat[c]) >= per for c in cats):
        chosen: set[int] = set()
        for c in cats:
            chosen.update(rng.sample(by_cat[c], per))
        leftover = [i for i in range(len(questions)) if i not in chosen]
        chosen.update(rng.sample(leftover, n - len(chosen)))
    else:
        chosen = set(rng.sample(range(len(questions)), n))
    return [questions[i] for i in sorted(chosen)]

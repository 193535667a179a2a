from __future__ import annotations

import base64
import hashlib
import json
import random
from pathlib import Path

import pytest

from prism.dataset import CATEGORY_ORDER, Category, ImagePayload, Option, VisualQuestion

WORDS = [
    "apple", "bicycle", "castle", "dolphin", "elephant", "guitar", "harbor", "igloo",
    "jacket", "kettle", "lantern", "mountain", "notebook", "orchid", "pyramid", "quartz",
    "rocket", "saxophone", "tractor", "umbrella", "violin", "windmill", "xylophone", "yacht",
]

POSTER_DESCRIPTION = (
    "The image presents a delightful celebration of Father's Day. Dominating the center of the "
    "image is a blue tie, adorned with white stripes, symbolizing the essence of fatherhood. The "
    "tie is slightly tilted to the right, adding a touch of dynamism to the composition. On the "
    "left side of the tie, the phrase \"Happy Father's Day\" is elegantly inscribed in a white "
    "cursive font, extending warm wishes to all dads. The text and the tie are set against a dark "
    "blue background, creating a striking contrast that draws attention to the main elements of "
    "the image. Adding a final touch of sophistication, a thin white border frames the entire "
    "image, encapsulating the joyous message of Father's Day. The image, in its entirety, serves "
    "as a heartfelt tribute to all the wonderful fathers out there."
)


def fake_image(tag: str) -> bytes:
    return b"\x89PNG\r\n\x1a\n" + hashlib.sha256(tag.encode()).digest()


def poster_question() -> VisualQuestion:
    return VisualQuestion(
        id="poster",
        image=ImagePayload(data=fake_image("poster")),
        question="Which special day is associated with this poster?",
        options=(
            Option("A", "Earth Day."),
            Option("B", "National Reading Day."),
            Option("C", "Father's Day."),
            Option("D", "Mother's Day"),
        ),
        answer="C",
        category=Category("CP"),
    )


def synthetic_records(per_category: int = 10, n_options: int = 4, seed: int = 0,
                      categories=CATEGORY_ORDER, shared_images: int = 0) -> list[dict]:
    rng = random.Random(seed)
    records = []
    for cat in categories:
        for i in range(per_category):
            qid = f"{cat.lower()}-{i:03d}"
            words = rng.sample(WORDS, n_options)
            answer = "ABCDEFGH"[rng.randrange(n_options)]
            tag = qid if shared_images == 0 else f"shared-{len(records) % shared_images}"
            rec = {
                "index": qid,
                "image": base64.b64encode(fake_image(tag)).decode(),
                "question": f"Which object is shown in picture {qid}?",
                "answer": answer,
                "category": cat,
                "split": "F",
            }
            for letter, word in zip("ABCDEFGH", words):
                rec[letter] = word
            records.append(rec)
    return records


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def answer_key(records: list[dict]) -> dict[str, str]:
    """Keyed-mock map: image digest -> a description naming the correct option."""
    out = {}
    for r in records:
        digest = hashlib.sha256(base64.b64decode(r["image"])).hexdigest()
        out[digest] = f"The picture shows a {r[r['answer']]} in the center."
    return out


@pytest.fixture
def synthetic(tmp_path):
    records = synthetic_records()
    bench = write_jsonl(tmp_path / "bench.jsonl", records)
    key = tmp_path / "key.json"
    key.write_text(json.dumps(answer_key(records)))
    return bench, key, records


@pytest.fixture
def store(tmp_path):
    from prism.store import Store
    return Store(tmp_path / "store")


# one PASS/FAIL line per acceptance criterion in the terminal summary
_acceptance: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))
    elif report.when == "setup" and report.skipped and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], "skipped"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{label}  {name}")

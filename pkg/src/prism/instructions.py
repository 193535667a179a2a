"""Perception instructions: the generic variants and query-specific composition."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import GenerationFailed

_HUMAN1 = (
    "Describe the fine-grained content of the image, including scenes, objects, "
    "relationships, instance location, and any text present."
)


class Variant(enum.Enum):
    HUMAN1 = "human1"
    HUMAN2 = "human2"
    GPTSYN1 = "gptsyn1"
    GPTSYN2 = "gptsyn2"
    COT = "cot"
    DECOMPOSE = "decompose"

    @classmethod
    def parse(cls, raw: str) -> "Variant":
        key = raw.strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        key = {"gptsynthesize1": "gptsyn1", "gptsynthesize2": "gptsyn2"}.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown instruction variant {raw!r} (choose from {names})") from None


GENERIC_TEXTS = {
    Variant.HUMAN1: _HUMAN1,
    Variant.HUMAN2: (
        "Describe the fine-grained content of the image, including scenes, objects, "
        "relationships, instance location, background and any text present. "
        "Please skip generating statements for non-existent contents and describe all you see."
    ),
    Variant.GPTSYN1: "Given the image below, please provide a detailed description of what you see.",
    Variant.GPTSYN2: "Analyze the image below and describe the main elements and their relationship.",
    Variant.COT: _HUMAN1 + " Let's think step by step.",
    Variant.DECOMPOSE: (
        "Decompose the image into several parts and describe the fine-grained content of the "
        "image part by part, including scenes, objects, relationships, instance location, "
        "and any text present."
    ),
}

DEFAULT_VARIANT = Variant.HUMAN1

FEW_SHOT_HEADER = (
    "Your task is to give a concise instruction about what basic elements are needed to be "
    "described based on the given question. Ensure that your instructions do not cover the "
    "raw question, options, or thought process of answering the question."
)

FEW_SHOT_EXAMPLES = (
    (
        "In which period the number of full-time employees is the maximum?",
        "the number of full-time employees",
    ),
    ("What is the value of the smallest bar?", "the heights of all bars and their values"),
    ("What is the main subject of the image?", "the central theme or object"),
    (
        "What is the position of the catcher relative to the home plate?",
        "the spatial arrangement of the objects",
    ),
    (
        "What is the expected ratio of offspring with white spots to offspring with solid "
        "coloring? Choose the most likely ratio.",
        "the genetic information",
    ),
)

CONTENTS_LABEL = "Contents to observe:"
ATTENTION_PHRASE = "Especially, pay attention to "


def render_generic(variant: Variant = DEFAULT_VARIANT) -> str:
    return GENERIC_TEXTS[variant]


def build_contents_prompt(question_text: str) -> str:
    """Few-shot prompt asking the reasoning model what the describer should look at."""
    if not question_text or not question_text.strip():
        raise ValueError("question text must be non-empty")
    lines = [FEW_SHOT_HEADER, ""]
    for q, contents in FEW_SHOT_EXAMPLES:
        lines.append(f"Question: {q}")
        lines.append(f"{CONTENTS_LABEL} {contents}")
    lines.append(f"Question: {question_text}")
    lines.append(CONTENTS_LABEL)
    return "\n".join(lines)


def _clean_contents(text: str) -> str:
    text = " ".join(text.split())
    while text.endswith("."):
        text = text[:-1].rstrip()
    return text


@dataclass(frozen=True)
class QuerySpecificPart:
    contents: str
    source: str = "model-generated"  # or "manual"

    def __post_init__(self):
        if not self.contents or self.contents != self.contents.strip():
            raise ValueError("contents must be non-empty without surrounding whitespace")
        if "\n" in self.contents:
            raise ValueError("contents must be a single line")


@dataclass(frozen=True)
class InstructionSpec:
    """How the perception instruction for one question was produced."""

    variant: Variant = DEFAULT_VARIANT
    part: QuerySpecificPart | None = None

    @property
    def mode(self) -> str:
        return "generic" if self.part is None else "query-specific"

    @property
    def rendered(self) -> str:
        if self.part is None:
            return render_generic(self.variant)
        return compose_query_specific(self.variant, self.part)


def parse_contents_reply(text: str) -> str:
    """First non-empty line, minus an echoed label and any terminal period."""
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.lower().startswith(CONTENTS_LABEL.lower()):
            line = line[len(CONTENTS_LABEL):].strip()
            if not line:
                continue
        return _clean_contents(line)
    return ""


def generate_query_specific(client, reasoner, question_text: str) -> QuerySpecificPart:
    """Ask the reasoning endpoint what to observe for ``question_text``.

    ``client`` is an :class:`prism.endpoints.EndpointClient`; ``reasoner`` the
    text endpoint's config.
    """
    reply = client.complete(reasoner, build_contents_prompt(question_text))
    contents = parse_contents_reply(reply.text)
    if not contents:
        raise GenerationFailed(f"{reasoner.name} returned no usable contents to observe")
    return QuerySpecificPart(contents)


def compose_query_specific(generic: Variant | str, part: QuerySpecificPart | str) -> str:
    generic_text = render_generic(generic) if isinstance(generic, Variant) else generic
    contents = part.contents if isinstance(part, QuerySpecificPart) else part
    contents = _clean_contents(contents)
    if not contents:
        raise ValueError("query-specific contents must be non-empty")
    return f"{generic_text} {ATTENTION_PHRASE}{contents}."


def parse_instruction_mode(raw: str) -> tuple[str, Variant]:
    """Parse ``generic:<variant>`` / ``query-specific:<variant>`` (variant optional)."""
    mode, _, variant = raw.partition(":")
    mode = mode.strip().lower().replace("_", "-")
    if mode in ("query-specific", "qs", "queryspecific"):
        mode = "query-specific"
    elif mode != "generic":
        raise ValueError(f"instruction mode must be generic or query-specific, got {raw!r}")
    return mode, Variant.parse(variant) if variant else DEFAULT_VARIANT

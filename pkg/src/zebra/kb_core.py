"""Knowledge-base data model: examples, queries, validation, and passage text.

A knowledge base is a JSONL file, one example per line:

    {"id": "...", "question": "...", "choices": ["...", ...],
     "answer": "A", "explanations": ["...", ...], "topic": "..."}

``answer`` and ``topic`` are optional. Choice labels are always derived
from position (index 0 -> "A"), never trusted from the file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

SEP_TOKEN = "[SEP]"
_SEP_INFIX = f" {SEP_TOKEN} "


class KbError(ValueError):
    """Raised when a knowledge-base file cannot be loaded."""


def label_for_index(index: int) -> str:
    """Positional choice label: 0 -> "A", 1 -> "B", ..."""
    if not 0 <= index < 26:
        raise ValueError(f"choice index {index} out of label range A-Z")
    return chr(ord("A") + index)


@dataclass(frozen=True)
class Choice:
    label: str
    text: str


@dataclass(frozen=True)
class QueryView:
    """A question plus its ordered choices: the retrieval and answering unit."""

    id: str
    question: str
    choices: tuple[Choice, ...]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.choices)


@dataclass(frozen=True)
class Example:
    """One knowledge-base entry: a question, its choices, and explanations."""

    id: str
    question: str
    choices: tuple[Choice, ...]
    answer_label: str | None = None
    explanations: tuple[str, ...] = ()
    topic: str | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.choices)

    def as_query(self) -> QueryView:
        return QueryView(id=self.id, question=self.question, choices=self.choices)


def make_choices(texts: list[str] | tuple[str, ...]) -> tuple[Choice, ...]:
    """Build a choice tuple with labels assigned by position."""
    return tuple(Choice(label=label_for_index(i), text=t) for i, t in enumerate(texts))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


def _check_text_field(name: str, text: str, violations: list[str]) -> None:
    if not text.strip():
        violations.append(f"{name} is empty")
        return
    if "\n" in text or "\r" in text:
        violations.append(f"{name} contains a newline")
    if _SEP_INFIX in text:
        violations.append(f"{name} contains the reserved separator '{_SEP_INFIX}'")


def validate_example(ex: Example) -> ValidationReport:
    """Check every invariant of an example; report all violations, not just the first."""
    violations: list[str] = []
    _check_text_field("question", ex.question, violations)
    if len(ex.choices) < 2:
        violations.append(f"needs at least 2 choices, got {len(ex.choices)}")
    expected = [label_for_index(i) for i in range(len(ex.choices))]
    if [c.label for c in ex.choices] != expected:
        violations.append("labels not consecutive from A")
    for i, c in enumerate(ex.choices):
        _check_text_field(f"choice {i}", c.text, violations)
    if ex.answer_label is not None and ex.answer_label not in {c.label for c in ex.choices}:
        violations.append(f"answer label {ex.answer_label!r} not among choices")
    for i, x in enumerate(ex.explanations):
        if not x.strip():
            violations.append(f"empty explanation at index {i}")
        elif "\n" in x or "\r" in x:
            violations.append(f"explanation at index {i} contains a newline")
    return ValidationReport(ok=not violations, violations=tuple(violations))


def serialize_query(q: QueryView | Example) -> str:
    """Flatten a question and its ordered choices into one passage string.

    The question text is followed by every choice text in order, joined by
    the literal ``[SEP]`` marker. Order-sensitive on purpose: permuted
    choices must produce a different passage.
    """
    parts = [q.question] + [c.text for c in q.choices]
    return _SEP_INFIX.join(parts)


class ExampleSet:
    """Id-keyed, insertion-ordered collection of validated examples."""

    def __init__(self, examples: list[Example] | None = None, source_name: str = "") -> None:
        self.source_name = source_name
        self._by_id: dict[str, Example] = {}
        for ex in examples or []:
            self.add(ex)

    def add(self, ex: Example) -> None:
        if ex.id in self._by_id:
            raise KbError(f"duplicate id {ex.id!r}")
        self._by_id[ex.id] = ex

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Example]:
        return iter(self._by_id.values())

    def __contains__(self, example_id: str) -> bool:
        return example_id in self._by_id

    def __getitem__(self, example_id: str) -> Example:
        return self._by_id[example_id]

    def get(self, example_id: str) -> Example | None:
        return self._by_id.get(example_id)

    def ids(self) -> list[str]:
        return list(self._by_id)


def _example_from_record(record: dict, where: str) -> Example:
    if not isinstance(record, dict):
        raise KbError(f"{where}: record is not a JSON object")
    for key in ("id", "question", "choices"):
        if key not in record:
            raise KbError(f"{where}: missing required key {key!r}")
    choices = record["choices"]
    if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
        raise KbError(f"{where}: 'choices' must be an array of strings")
    explanations = record.get("explanations", [])
    if not isinstance(explanations, list) or not all(isinstance(x, str) for x in explanations):
        raise KbError(f"{where}: 'explanations' must be an array of strings")
    return Example(
        id=str(record["id"]),
        question=record["question"],
        choices=make_choices(choices),
        answer_label=record.get("answer"),
        explanations=tuple(explanations),
        topic=record.get("topic"),
    )


def load_examples(path: str | Path) -> ExampleSet:
    """Load and validate a knowledge-base JSONL file.

    Raises KbError naming the line number for malformed JSON, invariant
    violations, and duplicate ids.
    """
    path = Path(path)
    examples: list[Example] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{line_no}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise KbError(f"{where}: invalid JSON ({e.msg})") from e
            ex = _example_from_record(record, where)
            report = validate_example(ex)
            if not report.ok:
                raise KbError(f"{where}: invalid example {ex.id!r}: " + "; ".join(report.violations))
            if ex.id in seen:
                raise KbError(
                    f"{where}: duplicate id {ex.id!r} (first seen on line {seen[ex.id]})"
                )
            seen[ex.id] = line_no
            examples.append(ex)
    if not examples:
        raise KbError(f"{path.name}: no examples found")
    return ExampleSet(examples, source_name=path.name)


def example_to_record(ex: Example) -> dict:
    record: dict = {
        "id": ex.id,
        "question": ex.question,
        "choices": [c.text for c in ex.choices],
    }
    if ex.answer_label is not None:
        record["answer"] = ex.answer_label
    record["explanations"] = list(ex.explanations)
    if ex.topic is not None:
        record["topic"] = ex.topic
    return record


def write_examples(example_set: ExampleSet, path: str | Path) -> None:
    """Write a knowledge base back to JSONL (UTF-8, LF line endings)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in example_set:
            f.write(json.dumps(example_to_record(ex), ensure_ascii=False))
            f.write("\n")

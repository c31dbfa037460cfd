"""Silver knowledge-base construction.

For each dataset question with a gold answer, ask a generator model for one
commonsense sentence per choice (supporting or refuting it), parse the
per-label lines back out, and store them as the example's explanations with
the gold choice's sentences first.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .gateway import ChatMessage, ChatRequest, Gateway, GatewayError
from .kb_core import Choice, Example, ExampleSet
from .knowledge import ChatPrompt
from .prompting import choice_lines, count_word, label_list

logger = logging.getLogger(__name__)

SILVER_SYSTEM_TEMPLATE = (
    "You are a helpful assistant for question answering.\n"
    "You are given a question requiring commonsense knowledge to be solved, together with "
    "{count_word} possible choices (labeled {labels}) and the label corresponding to the "
    "correct answer.\n"
    "For each choice, generate a sentence with explicit commonsense knowledge that supports "
    "or refutes the choice.\n"
    "The format of the generated knowledge should be in the following form:\n"
    "{format_lines}"
)

_BUCKET_OPENER = re.compile(r"^([A-Z])\.\s*(.*)$")


@dataclass(frozen=True)
class KbBuildParams:
    temperature: float = 0.0
    max_new_tokens: int = 256
    max_explanations: int = 10

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.max_explanations < 1:
            raise ValueError("max_explanations must be >= 1")


def build_silver_prompt(
    question: str, choices: Sequence[Choice], answer_label: str | None
) -> ChatPrompt:
    """Single-shot generation prompt: system instructions plus one user turn
    carrying the question, the choices, and the gold answer label."""
    if answer_label is None:
        raise ValueError("silver generation requires the gold answer label")
    labels = tuple(c.label for c in choices)
    if answer_label not in labels:
        raise ValueError(f"answer label {answer_label!r} not among choices")
    format_lines = "\n".join(f"{label}. ..." for label in labels)
    system = SILVER_SYSTEM_TEMPLATE.format(
        count_word=count_word(len(choices)),
        labels=label_list(labels),
        format_lines=format_lines,
    )
    user = (
        f"Question:\n{question}\n"
        f"Choices:\n{choice_lines(choices)}\n"
        f"Answer:\n{answer_label}"
    )
    return (ChatMessage("system", system), ChatMessage("user", user))


def parse_silver(text: str, labels: Sequence[str]) -> dict[str, list[str]]:
    """Per-label explanation buckets from the generator's reply.

    A line starting with "X." (X a requested label) opens that label's
    bucket; later lines without an opener join the open bucket as extra
    sentences. Text before the first opener is ignored. Labels the reply
    never mentions come back as empty lists.
    """
    buckets: dict[str, list[str]] = {label: [] for label in labels}
    open_label: str | None = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        match = _BUCKET_OPENER.match(line)
        if match and match.group(1) in buckets:
            open_label = match.group(1)
            rest = match.group(2).strip()
            if rest:
                buckets[open_label].append(rest)
        elif open_label is not None:
            buckets[open_label].append(line)
    for label in labels:
        if not buckets[label]:
            logger.warning("no explanation generated for label %s", label)
    return buckets


def _flatten(
    buckets: dict[str, list[str]], labels: Sequence[str], gold: str, cap: int
) -> tuple[str, ...]:
    ordered = list(buckets.get(gold, ()))
    for label in labels:
        if label != gold:
            ordered.extend(buckets.get(label, ()))
    return tuple(ordered[:cap])


def generate_kb(
    dataset: ExampleSet, gateway: Gateway, params: KbBuildParams | None = None
) -> tuple[ExampleSet, list[dict]]:
    """Generate silver explanations for every dataset entry.

    Returns the new ExampleSet (same ids, questions, choices, answers, and
    topics; explanations replaced by the generated ones, gold bucket first,
    truncated to the cap) plus a failure manifest of {id, reason} dicts for
    entries whose generation failed or came back empty. Failed entries are
    still emitted with no explanations, so the output covers the input and
    reruns against a warm cache are byte-identical.
    """
    params = params or KbBuildParams()
    missing = [ex.id for ex in dataset if ex.answer_label is None]
    if missing:
        raise ValueError(f"examples without gold answers: {missing[:5]}")
    out = ExampleSet(source_name=dataset.source_name)
    failures: list[dict] = []
    for ex in dataset:
        prompt = build_silver_prompt(ex.question, ex.choices, ex.answer_label)
        request = ChatRequest(
            messages=prompt,
            temperature=params.temperature,
            max_new_tokens=params.max_new_tokens,
        )
        explanations: tuple[str, ...] = ()
        try:
            response = gateway.chat(request)
        except GatewayError as e:
            logger.warning("generation failed for %s: %s", ex.id, e)
            failures.append({"id": ex.id, "reason": str(e)})
        else:
            buckets = parse_silver(response.text, ex.labels)
            explanations = _flatten(
                buckets, ex.labels, ex.answer_label, params.max_explanations
            )
            if not explanations:
                failures.append({"id": ex.id, "reason": "empty generation"})
        out.add(
            Example(
                id=ex.id,
                question=ex.question,
                choices=ex.choices,
                answer_label=ex.answer_label,
                explanations=explanations,
                topic=ex.topic,
            )
        )
    return out, failures


def write_failure_manifest(failures: Sequence[dict], path: str | Path) -> None:
    """One JSON object per failed entry: {id, reason}."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for failure in failures:
            f.write(json.dumps(failure, ensure_ascii=False))
            f.write("\n")

"""Shared text-rendering helpers for prompt builders.

All prompt templates render choice counts, label lists, and question/choice
blocks the same way; keeping the primitives in one place is what makes the
byte-exactness guarantees of the individual builders hold together.
"""

from __future__ import annotations

from typing import Sequence

from .kb_core import Choice, QueryView

_COUNT_WORDS = (
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen", "twenty", "twenty-one", "twenty-two",
    "twenty-three", "twenty-four", "twenty-five", "twenty-six",
)


def count_word(n: int) -> str:
    """Spell out a small count ("three"), falling back to digits past 26."""
    if 1 <= n <= len(_COUNT_WORDS):
        return _COUNT_WORDS[n - 1]
    return str(n)


def label_list(labels: Sequence[str]) -> str:
    """Render labels as prose: "A, B, C, D and E" (no comma before "and")."""
    if not labels:
        raise ValueError("no labels to render")
    if len(labels) == 1:
        return labels[0]
    return ", ".join(labels[:-1]) + " and " + labels[-1]


def choice_lines(choices: Sequence[Choice]) -> str:
    """One "A. text" line per choice, in label order."""
    return "\n".join(f"{c.label}. {c.text}" for c in choices)


def question_block(q: QueryView) -> str:
    """The "Question:" and "Choices:" blocks shared by every user turn."""
    return f"Question:\n{q.question}\nChoices:\n{choice_lines(q.choices)}"

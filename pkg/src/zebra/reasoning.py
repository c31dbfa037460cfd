"""Multiple-choice answering by label log-probability.

Two prompt shapes share one scoring path: the zero-shot prompt presents
the question and choices alone, the informed prompt adds an Explanations
block. The model is asked for the answer label as its first token; the
chosen answer is the label with the highest log-probability, ties going
to the earliest label.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from .gateway import (
    LABEL_ABSENT_LOGPROB,
    ChatMessage,
    ChatRequest,
    Gateway,
    LogprobsUnsupportedError,
    fill_candidate_logprobs,
)
from .kb_core import QueryView, label_for_index
from .knowledge import ChatPrompt, KnowledgeList
from .prompting import label_list, question_block

logger = logging.getLogger(__name__)

QA_SYSTEM_TEMPLATE = (
    "You are a helpful assistant for question answering.\n"
    "You are given a question and {count} choices (labeled {labels}).\n"
    "Your task is to choose the label corresponding to the best answer for the question.\n"
    "Do you understand the task?"
)

IR_SYSTEM_TEMPLATE = (
    "You are a helpful assistant for question answering.\n"
    "You are given a question, {count} choices (labeled {labels}) and a list of explanations.\n"
    "Your task is to choose the label corresponding to the best answer for the question "
    "based on the given explanations.\n"
    "Do you understand the task?"
)

ACKNOWLEDGMENT = "Yes, I understand. Please provide the question and the possible choices."

ANSWER_CUE = "Answer:"

EXPLANATIONS_HEADER = "Explanations"

MODES = ("zero_shot", "zebra", "oracle")

# Token allowance for the no-logprobs fallback generation: enough to emit
# "Answer: X" style text, small enough to stay cheap.
_FALLBACK_MAX_NEW_TOKENS = 16

_STANDALONE_LETTER = re.compile(r"\b([A-Z])\b")


@dataclass(frozen=True)
class ReasoningConfig:
    qa_system_template: str = QA_SYSTEM_TEMPLATE
    ir_system_template: str = IR_SYSTEM_TEMPLATE

    def __post_init__(self) -> None:
        for name, template in (
            ("qa_system_template", self.qa_system_template),
            ("ir_system_template", self.ir_system_template),
        ):
            for slot in ("{count}", "{labels}"):
                if slot not in template:
                    raise ValueError(f"{name} must contain the {slot} slot")


@dataclass(frozen=True)
class ChoiceScores:
    """Log-probability per choice label, in choice order."""

    by_label: dict[str, float]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.by_label)

    @property
    def is_confident(self) -> bool:
        return any(v > LABEL_ABSENT_LOGPROB for v in self.by_label.values())

    def __getitem__(self, label: str) -> float:
        return self.by_label[label]


@dataclass(frozen=True)
class AnswerPrediction:
    chosen_label: str
    scores: ChoiceScores
    knowledge_used: KnowledgeList
    mode: str
    flags: tuple[str, ...] = ()


def build_qa_prompt(q: QueryView, cfg: ReasoningConfig | None = None) -> ChatPrompt:
    """Zero-shot answering prompt: system, acknowledgment, question, cue."""
    cfg = cfg or ReasoningConfig()
    system = cfg.qa_system_template.format(
        count=len(q.choices), labels=label_list(q.labels)
    )
    return (
        ChatMessage("system", system),
        ChatMessage("assistant", ACKNOWLEDGMENT),
        ChatMessage("user", question_block(q)),
        ChatMessage("assistant", ANSWER_CUE),
    )


def build_ir_prompt(
    q: QueryView, knowledge: KnowledgeList, cfg: ReasoningConfig | None = None
) -> ChatPrompt:
    """Knowledge-informed prompt: the zero-shot shape plus an Explanations
    block between the choices and the cue."""
    cfg = cfg or ReasoningConfig()
    if not knowledge:
        raise ValueError("empty knowledge; use the zero-shot prompt instead")
    system = cfg.ir_system_template.format(
        count=len(q.choices), labels=label_list(q.labels)
    )
    explanation_lines = "\n".join(knowledge)
    user = f"{question_block(q)}\n{EXPLANATIONS_HEADER}\n{explanation_lines}"
    return (
        ChatMessage("system", system),
        ChatMessage("assistant", ACKNOWLEDGMENT),
        ChatMessage("user", user),
        ChatMessage("assistant", ANSWER_CUE),
    )


def _fallback_scores(
    gateway: Gateway, prompt: ChatPrompt, labels: Sequence[str]
) -> tuple[ChoiceScores, tuple[str, ...]]:
    request = ChatRequest(
        messages=tuple(prompt), temperature=0.0, max_new_tokens=_FALLBACK_MAX_NEW_TOKENS
    )
    response = gateway.chat(request)
    found: str | None = None
    for match in _STANDALONE_LETTER.finditer(response.text):
        if match.group(1) in labels:
            found = match.group(1)
            break
    flags = ("fallback_scored",)
    observed: dict[str, float] = {}
    if found is None:
        logger.warning("fallback scoring found no valid label in %r", response.text[:80])
        flags += ("unconfident",)
    else:
        observed[found] = 0.0
    return ChoiceScores(by_label=fill_candidate_logprobs(observed, labels)), flags


def score_choices(
    gateway: Gateway, prompt: ChatPrompt, labels: Sequence[str]
) -> tuple[ChoiceScores, tuple[str, ...]]:
    """Log-probability of each label as the model's first answer token.

    One request scores all labels at once. If the gateway cannot report
    logprobs, one greedy generation is scored instead: the first standalone
    valid letter in the text gets logprob 0, everything else the absent
    sentinel, and the result is flagged as fallback-scored.
    """
    labels = tuple(labels)
    expected = tuple(label_for_index(i) for i in range(len(labels)))
    if labels != expected:
        raise ValueError(f"labels {labels!r} are not consecutive from A")
    request = ChatRequest(
        messages=tuple(prompt),
        temperature=0.0,
        max_new_tokens=1,
        want_label_logprobs=True,
        candidate_labels=labels,
    )
    try:
        response = gateway.chat(request)
    except LogprobsUnsupportedError:
        return _fallback_scores(gateway, prompt, labels)
    observed = response.label_logprobs or {}
    return ChoiceScores(by_label=fill_candidate_logprobs(observed, labels)), ()


def select_answer(
    scores: ChoiceScores,
    q: QueryView,
    knowledge: KnowledgeList,
    mode: str,
    flags: Sequence[str] = (),
) -> AnswerPrediction:
    """Argmax over the query's labels; exact ties go to the earliest label."""
    if mode not in MODES:
        raise ValueError(f"invalid mode {mode!r}")
    missing = [label for label in q.labels if label not in scores.by_label]
    if missing:
        raise ValueError(f"scores missing labels {missing}")
    chosen = q.labels[0]
    best = scores[chosen]
    for label in q.labels[1:]:
        if scores[label] > best:
            chosen = label
            best = scores[label]
    out_flags = tuple(flags)
    if not scores.is_confident and "unconfident" not in out_flags:
        out_flags += ("unconfident",)
    return AnswerPrediction(
        chosen_label=chosen,
        scores=scores,
        knowledge_used=knowledge,
        mode=mode,
        flags=out_flags,
    )


def prediction_record(
    pred: AnswerPrediction,
    query_id: str,
    gold: str | None = None,
    retrieval_ids: Sequence[str] = (),
) -> dict:
    """One JSON-ready record per answered question, stable key order."""
    return {
        "id": query_id,
        "mode": pred.mode,
        "chosen": pred.chosen_label,
        "gold": gold,
        "scores": {label: pred.scores[label] for label in pred.scores.labels},
        "knowledge": list(pred.knowledge_used),
        "retrieval": list(retrieval_ids),
        "flags": list(pred.flags),
    }

"""Example-guided knowledge generation.

Given a query, retrieve the most similar knowledge-base examples, lay them
out as few-shot dialogue turns (each example's question and choices as a
user turn, its explanations as the assistant's numbered reply), ask the
model for the query's own "List of knowledge", and parse the answer back
into a list of explanation strings.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterator, Sequence

from .gateway import ChatMessage, ChatRequest, Gateway
from .kb_core import Example, ExampleSet, QueryView, serialize_query
from .prompting import question_block
from .retrieval import EmbeddingProvider, ExampleIndex, RetrievalHit, embed_texts, search

logger = logging.getLogger(__name__)

ChatPrompt = tuple[ChatMessage, ...]

KG_SYSTEM_TEMPLATE = (
    "You are given a question and {count} choices.\n"
    "Your task is to write one or more explanations that support the most likely option.\n"
    "Note that:\n"
    "* there is always one option that is correct and more likely than the others.\n"
    "* the explanations must support only the most likely option and refute all the others.\n"
    "* the explanations must be simple and concise (max 15 words).\n"
    "Do you understand the task?"
)

ACKNOWLEDGMENT = "Yes, I understand. Please provide the question and the possible choices."

KNOWLEDGE_CUE = "List of knowledge:"

DEFAULT_K = 5

_MARKER = re.compile(r"^(?:\d+[.)]|[-*•])\s*")


@dataclass(frozen=True)
class KnowledgeList:
    """Ordered explanation strings; never empty strings, never multi-line."""

    items: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for i, item in enumerate(self.items):
            if not item.strip():
                raise ValueError(f"empty knowledge item at index {i}")
            if "\n" in item:
                raise ValueError(f"knowledge item at index {i} contains a newline")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[str]:
        return iter(self.items)

    def __bool__(self) -> bool:
        return bool(self.items)


@dataclass(frozen=True)
class KgPromptConfig:
    max_explanations_per_example: int = 10
    temperature: float = 0.0
    max_new_tokens: int = 256
    system_template: str = KG_SYSTEM_TEMPLATE

    def __post_init__(self) -> None:
        if self.max_explanations_per_example < 1:
            raise ValueError("max_explanations_per_example must be >= 1")
        if "{count}" not in self.system_template:
            raise ValueError("system_template must contain the {count} slot")


def _knowledge_turn(explanations: Sequence[str], cap: int) -> str:
    numbered = "\n".join(f"{i}. {x}" for i, x in enumerate(explanations[:cap], 1))
    return f"{KNOWLEDGE_CUE}\n{numbered}"


def build_kg_prompt(
    examples: Sequence[Example], q: QueryView, cfg: KgPromptConfig | None = None
) -> ChatPrompt:
    """Few-shot knowledge-generation prompt around the retrieved examples.

    Message layout: system text (choice count rendered from the query), the
    assistant acknowledgment, one user/assistant turn pair per example in
    the given order, the query as a final user turn, and the trailing
    assistant cue awaiting the knowledge list.
    """
    cfg = cfg or KgPromptConfig()
    if not examples:
        raise ValueError("no examples")
    for ex in examples:
        if not ex.explanations:
            raise ValueError(f"example {ex.id!r} has no explanations")
    messages = [
        ChatMessage("system", cfg.system_template.format(count=len(q.choices))),
        ChatMessage("assistant", ACKNOWLEDGMENT),
    ]
    for ex in examples:
        messages.append(ChatMessage("user", question_block(ex.as_query())))
        messages.append(
            ChatMessage(
                "assistant",
                _knowledge_turn(ex.explanations, cfg.max_explanations_per_example),
            )
        )
    messages.append(ChatMessage("user", question_block(q)))
    messages.append(ChatMessage("assistant", KNOWLEDGE_CUE))
    return tuple(messages)


def parse_knowledge(text: str, cap: int) -> KnowledgeList:
    """Extract explanation lines from a model response.

    Strips one leading enumeration or bullet marker per line, drops blank
    lines and bare cue lines, deduplicates preserving first occurrence, and
    truncates to ``cap`` items. Unparseable text yields an empty list, which
    callers treat as "no knowledge".
    """
    if cap < 0:
        raise ValueError("cap must be >= 0")
    items: list[str] = []
    seen: set[str] = set()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line == KNOWLEDGE_CUE:
            continue
        line = _MARKER.sub("", line, count=1).strip()
        if not line or line in seen:
            continue
        seen.add(line)
        items.append(line)
        if len(items) == cap:
            break
    return KnowledgeList(items=tuple(items))


@dataclass(frozen=True)
class KnowledgeGeneration:
    """Generated knowledge plus the retrieval provenance behind it."""

    query_id: str
    knowledge: KnowledgeList
    hits: tuple[RetrievalHit, ...]
    flags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "hits": [{"id": h.example_id, "score": h.score} for h in self.hits],
            "knowledge": list(self.knowledge),
            "flags": list(self.flags),
        }


def generate_knowledge(
    gateway: Gateway,
    index: ExampleIndex,
    provider: EmbeddingProvider,
    example_set: ExampleSet,
    q: QueryView,
    k: int = DEFAULT_K,
    cfg: KgPromptConfig | None = None,
) -> KnowledgeGeneration:
    """Retrieve the top-k examples for the query and generate its knowledge.

    The query is serialized and embedded, its own id is excluded from the
    search, and the retrieved examples feed the few-shot prompt. Retrieved
    examples without explanations cannot appear in the prompt and are
    dropped with a flag; if none remain, or the model's reply parses to
    nothing, the result is an empty (flagged) knowledge list.
    """
    cfg = cfg or KgPromptConfig()
    if k < 1:
        raise ValueError("k must be >= 1")
    query_vec = embed_texts(provider, [serialize_query(q)])[0]
    hits = tuple(search(index, query_vec, k, exclude=(q.id,)))
    retrieved = [example_set[h.example_id] for h in hits]
    usable = [ex for ex in retrieved if ex.explanations]
    flags: tuple[str, ...] = ()
    if len(usable) < len(retrieved):
        flags += ("exemplars_without_explanations_skipped",)
    if not usable:
        logger.warning("query %s: no retrieved example carries explanations", q.id)
        return KnowledgeGeneration(
            query_id=q.id,
            knowledge=KnowledgeList(),
            hits=hits,
            flags=flags + ("no_usable_exemplars", "empty_knowledge"),
        )
    prompt = build_kg_prompt(usable, q, cfg)
    request = ChatRequest(
        messages=prompt,
        temperature=cfg.temperature,
        max_new_tokens=cfg.max_new_tokens,
    )
    response = gateway.chat(request)
    knowledge = parse_knowledge(response.text, cap=cfg.max_explanations_per_example)
    if not knowledge:
        flags += ("empty_knowledge",)
    return KnowledgeGeneration(query_id=q.id, knowledge=knowledge, hits=hits, flags=flags)

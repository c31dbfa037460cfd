"""Benchmark evaluation in zero-shot, retrieval-augmented, and oracle modes.

One worker per question builds the mode's prompt, scores the labels, and
selects the answer; accuracy is exact-label-match over the whole dataset.
Workers may run concurrently, but records are always emitted in dataset
order and contain nothing run-dependent, so a report is a pure function of
(dataset, config, collaborators).
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .gateway import Gateway, GatewayError
from .kb_core import Example, ExampleSet
from .knowledge import KgPromptConfig, KnowledgeList, generate_knowledge
from .reasoning import (
    ReasoningConfig,
    build_ir_prompt,
    build_qa_prompt,
    prediction_record,
    score_choices,
    select_answer,
)
from .retrieval import EmbeddingProvider, ExampleIndex

logger = logging.getLogger(__name__)

MODES = ("zero_shot", "zebra", "oracle")


class EvalAborted(RuntimeError):
    """A gateway failure stopped the run; carries the records finished so far."""

    def __init__(self, message: str, partial_records: Sequence[dict]) -> None:
        super().__init__(message)
        self.partial_records = list(partial_records)


@dataclass(frozen=True)
class EvalConfig:
    mode: str
    k: int = 5
    kb_path: str | None = None
    provider: str = "hashing"
    gateway: str = "mock"
    seed: int = 0
    concurrency: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"invalid mode {self.mode!r}")
        if self.mode == "zebra":
            if self.kb_path is None:
                raise ValueError("zebra mode requires kb_path")
            if self.k < 1:
                raise ValueError("zebra mode requires k >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def echo(self) -> dict:
        # The echo is embedded in report files, which must be bit-identical
        # across concurrency limits, so concurrency stays out of it.
        return {
            "mode": self.mode,
            "k": self.k,
            "kb_path": self.kb_path,
            "provider": self.provider,
            "gateway": self.gateway,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EvalReport:
    n: int
    correct: int
    accuracy: float
    records: tuple[dict, ...]
    config: dict


def _require_gold(dataset: ExampleSet) -> None:
    missing = [ex.id for ex in dataset if ex.answer_label is None]
    if missing:
        raise ValueError(f"examples without gold answers: {missing[:5]}")


def _answer_one(
    ex: Example,
    cfg: EvalConfig,
    gateway: Gateway,
    kb: ExampleSet | None,
    index: ExampleIndex | None,
    provider: EmbeddingProvider | None,
    kg_cfg: KgPromptConfig,
    reasoning_cfg: ReasoningConfig,
) -> dict:
    q = ex.as_query()
    knowledge = KnowledgeList()
    retrieval_ids: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    if cfg.mode == "zero_shot":
        prompt = build_qa_prompt(q, reasoning_cfg)
    elif cfg.mode == "oracle":
        knowledge = KnowledgeList(items=ex.explanations)
        prompt = build_ir_prompt(q, knowledge, reasoning_cfg)
    else:
        assert kb is not None and index is not None and provider is not None
        generation = generate_knowledge(gateway, index, provider, kb, q, cfg.k, kg_cfg)
        retrieval_ids = tuple(h.example_id for h in generation.hits)
        knowledge = generation.knowledge
        if knowledge:
            prompt = build_ir_prompt(q, knowledge, reasoning_cfg)
        else:
            # No usable knowledge came back; answer exactly as zero-shot
            # would, but leave a trace of the downgrade.
            prompt = build_qa_prompt(q, reasoning_cfg)
            flags += ("knowledge_fallback",)
    scores, score_flags = score_choices(gateway, prompt, q.labels)
    pred = select_answer(scores, q, knowledge, mode=cfg.mode, flags=flags + score_flags)
    return prediction_record(pred, ex.id, gold=ex.answer_label, retrieval_ids=retrieval_ids)


def evaluate(
    dataset: ExampleSet,
    cfg: EvalConfig,
    *,
    gateway: Gateway,
    kb: ExampleSet | None = None,
    index: ExampleIndex | None = None,
    provider: EmbeddingProvider | None = None,
    kg_cfg: KgPromptConfig | None = None,
    reasoning_cfg: ReasoningConfig | None = None,
) -> EvalReport:
    """Answer every dataset question and report exact-match accuracy.

    zebra mode needs the retrieval collaborators (kb, index, provider);
    oracle mode needs every dataset entry to carry explanations. A gateway
    failure aborts with the records completed before the failing question.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _require_gold(dataset)
    if cfg.mode == "zebra" and (kb is None or index is None or provider is None):
        raise ValueError("zebra mode requires kb, index, and provider")
    if cfg.mode == "oracle":
        bare = [ex.id for ex in dataset if not ex.explanations]
        if bare:
            raise ValueError(f"oracle mode requires explanations; missing for {bare[:5]}")
    kg_cfg = kg_cfg or KgPromptConfig()
    reasoning_cfg = reasoning_cfg or ReasoningConfig()
    examples = list(dataset)

    def worker(ex: Example) -> dict:
        return _answer_one(ex, cfg, gateway, kb, index, provider, kg_cfg, reasoning_cfg)

    records: list[dict] = []
    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        futures = [pool.submit(worker, ex) for ex in examples]
        for ex, future in zip(examples, futures):
            try:
                records.append(future.result())
            except GatewayError as e:
                for pending in futures:
                    pending.cancel()
                raise EvalAborted(
                    f"gateway failure on {ex.id}: {e}", partial_records=records
                ) from e
    correct = sum(1 for r in records if r["chosen"] == r["gold"])
    return EvalReport(
        n=len(records),
        correct=correct,
        accuracy=correct / len(records),
        records=tuple(records),
        config=cfg.echo(),
    )


@dataclass(frozen=True)
class SweepRow:
    k: int
    accuracy: float
    n: int


def sweep_k(
    dataset: ExampleSet,
    ks: Sequence[int],
    cfg: EvalConfig,
    **collaborators,
) -> list[SweepRow]:
    """One evaluate run per k, sharing collaborators (and thus caches)."""
    rows = []
    for k in ks:
        report = evaluate(dataset, replace(cfg, k=k), **collaborators)
        rows.append(SweepRow(k=k, accuracy=report.accuracy, n=report.n))
    return rows


def write_report(report: EvalReport, report_path: str | Path, records_path: str | Path) -> None:
    """Report JSON plus one prediction record per JSONL line."""
    payload = {
        "config": report.config,
        "n": report.n,
        "correct": report.correct,
        "accuracy": report.accuracy,
    }
    with open(report_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)
        f.write("\n")
    write_records(report.records, records_path)


def write_records(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False))
            f.write("\n")


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["k", "accuracy", "n"])
        for row in rows:
            writer.writerow([row.k, repr(row.accuracy), row.n])

"""Full-encoder contrastive fine-tuning against a topic-labeled KB.

The loop mirrors zebra's adapter trainer step for step: batches come from
zebra's own assembler (same positive mining, in-batch negatives, caps,
and per-step seeding), the objective is the same multi-label NCE, the
learning rate decays linearly from its initial value, and the weights
with the lowest validation loss win. What differs is the trainable unit:
here the whole encoder receives gradients through torch instead of a
linear adapter over frozen vectors, so zebra's loss on identical batches
serves as the small-scale oracle for this loop's loss values.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from zebra import ExampleSet, TrainConfig, assemble_batch, load_examples, mine_positives, serialize_query, write_embeddings

from .encoders import load_encoder


class FinetuneDivergedError(RuntimeError):
    """Loss or gradient became non-finite; message carries the step index."""


@dataclass(frozen=True)
class BridgeConfig:
    """Training configuration: zebra's TrainConfig fields plus the model
    and file locations. batch_size has no default on purpose; callers must
    choose one. learning_rate may be 0, which makes the run a no-op export."""

    model_name: str
    kb_path: str
    validation_path: str
    out_path: str
    batch_size: int
    learning_rate: float = 1e-5
    max_steps: int = 500
    positive_cap: int = 64
    negative_cap: int = 200
    schedule: str = "linear"
    seed: int = 0
    eval_every: int = 50
    model_out: str | None = None

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.positive_cap < 1 or self.negative_cap < 1:
            raise ValueError("caps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule != "linear":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


_REQUIRED_KEYS = ("model_name", "kb_path", "validation_path", "out_path", "batch_size")


def load_bridge_config(source: str | Path | Mapping) -> BridgeConfig:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as f:
            payload = json.load(f)
        if not isinstance(payload, dict):
            raise ValueError(f"{Path(source).name}: config must be a JSON object")
    else:
        payload = dict(source)
    known = {f.name for f in fields(BridgeConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    missing = [key for key in _REQUIRED_KEYS if key not in payload]
    if missing:
        raise ValueError(f"missing required config keys: {missing}")
    return BridgeConfig(**payload)


@dataclass(frozen=True)
class BridgeTraceRow:
    step: int
    loss: float
    lr: float


@dataclass(frozen=True)
class FinetuneResult:
    steps: int
    loss_trace: tuple[BridgeTraceRow, ...]
    best_step: int | None
    out_path: str


def _derive_seed(seed: int, tag: str) -> int:
    # Same recipe as the adapter trainer: independent decisions never
    # share a random stream.
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _assembly_cfg(cfg: BridgeConfig, seed: int) -> TrainConfig:
    # Batch assembly consumes only the caps and the seed; the learning
    # rate slot is a placeholder because zebra requires it positive.
    return TrainConfig(
        learning_rate=1.0,
        positive_cap=cfg.positive_cap,
        negative_cap=cfg.negative_cap,
        seed=seed,
    )


def batch_nce_loss(batch, vectors: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Mean multi-label NCE over the batch, reduced in sorted-id order.

    Per positive similarity s and negatives u, the ratio is
    exp(s) / (exp(s) + sum exp(u)); the per-query loss is minus the log
    of the ratio sum. The logaddexp/logsumexp form is an exact rewrite of
    zebra's stabilization, so losses agree to float64 round-off.
    """
    ordered = sorted(batch.queries, key=lambda e: e.query_id)
    if not ordered:
        raise ValueError("batch has no usable queries")
    total = None
    for entry in ordered:
        q = vectors[entry.query_id]
        pos = torch.stack([vectors[pid] for pid in entry.positive_ids])
        s = pos @ q
        if entry.negative_ids:
            neg = torch.stack([vectors[nid] for nid in entry.negative_ids])
            denom = torch.logaddexp(s, torch.logsumexp(neg @ q, dim=0))
        else:
            denom = s
        loss = -torch.log(torch.exp(s - denom).sum())
        total = loss if total is None else total + loss
    return total / len(ordered)


def _usable_ids(example_set: ExampleSet, cfg: TrainConfig) -> list[str]:
    usable = []
    for example_id in example_set.ids():
        ex = example_set[example_id]
        if ex.topic is None or not ex.topic.strip():
            continue
        if mine_positives(example_set, example_id, cfg.positive_cap, cfg.seed):
            usable.append(example_id)
    return usable


def _encode_for(module, texts: Mapping[str, str], ids: list[str]) -> dict[str, torch.Tensor]:
    encoded = module([texts[i] for i in ids])
    return {i: encoded[n] for n, i in enumerate(ids)}


def finetune_encoder(config: BridgeConfig | Mapping | str | Path) -> FinetuneResult:
    """Train the encoder, restore the best validation weights, and export
    embeddings for every KB entry in zebra's JSONL format."""
    cfg = config if isinstance(config, BridgeConfig) else load_bridge_config(config)
    encoder = load_encoder(cfg.model_name)
    kb = load_examples(cfg.kb_path)
    val = load_examples(cfg.validation_path)
    base_cfg = _assembly_cfg(cfg, cfg.seed)

    usable = _usable_ids(kb, base_cfg)
    if len(usable) < 2:
        raise ValueError("need at least 2 usable training queries")
    if len(val) < 2:
        raise ValueError("validation set needs at least 2 entries")

    texts = {i: serialize_query(kb[i]) for i in kb.ids()}
    val_texts = {i: serialize_query(val[i]) for i in val.ids()}
    val_batch = assemble_batch(val.ids(), val, base_cfg)
    val_ids = sorted(
        {e.query_id for e in val_batch.queries}
        | {i for e in val_batch.queries for i in e.positive_ids + e.negative_ids}
    )

    optimizer = torch.optim.RAdam(encoder.parameters(), lr=cfg.learning_rate)
    trace: list[BridgeTraceRow] = []
    best_step: int | None = None
    best_val = math.inf
    best_state: dict[str, torch.Tensor] | None = None

    def validation_loss() -> float:
        encoder.eval()
        with torch.no_grad():
            vectors = _encode_for(encoder, val_texts, val_ids)
            return float(batch_nce_loss(val_batch, vectors))

    if cfg.max_steps > 0:
        order_rng = random.Random(_derive_seed(cfg.seed, "order"))
        queue: list[str] = []

        def next_batch_ids() -> list[str]:
            nonlocal queue
            while True:
                if len(queue) < cfg.batch_size:
                    refill = usable[:]
                    order_rng.shuffle(refill)
                    queue.extend(refill)
                picked = queue[: cfg.batch_size]
                queue = queue[cfg.batch_size :]
                # Epoch boundaries can leak a duplicate into one chunk;
                # redraw instead of erroring, as the adapter trainer does.
                if len(set(picked)) >= 2:
                    return list(dict.fromkeys(picked))

        for step in range(1, cfg.max_steps + 1):
            step_cfg = _assembly_cfg(cfg, _derive_seed(cfg.seed, f"step:{step}"))
            batch = assemble_batch(next_batch_ids(), kb, step_cfg)
            step_ids = sorted(
                {e.query_id for e in batch.queries}
                | {i for e in batch.queries for i in e.positive_ids + e.negative_ids}
            )
            encoder.train()
            vectors = _encode_for(encoder, texts, step_ids)
            loss = batch_nce_loss(batch, vectors)
            if not torch.isfinite(loss):
                raise FinetuneDivergedError(f"non-finite loss at step {step}")
            lr = cfg.learning_rate * (1.0 - (step - 1) / cfg.max_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss.backward()
            for param in encoder.parameters():
                if param.grad is not None and not torch.all(torch.isfinite(param.grad)):
                    raise FinetuneDivergedError(f"non-finite gradient at step {step}")
            optimizer.step()
            trace.append(BridgeTraceRow(step=step, loss=float(loss.detach()), lr=lr))
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                current = validation_loss()
                if current < best_val:
                    best_val = current
                    best_step = step
                    best_state = {
                        k: v.detach().clone() for k, v in encoder.state_dict().items()
                    }

    if best_state is not None:
        encoder.load_state_dict(best_state)

    kb_ids = kb.ids()
    out_vectors: list[np.ndarray] = []
    for start in range(0, len(kb_ids), 32):
        chunk = kb_ids[start : start + 32]
        arr = encoder.encode([texts[i] for i in chunk])
        out_vectors.extend(arr[n] for n in range(arr.shape[0]))
    write_embeddings(cfg.out_path, kb_ids, out_vectors)
    if cfg.model_out:
        torch.save(encoder.state_dict(), cfg.model_out)
    return FinetuneResult(
        steps=cfg.max_steps,
        loss_trace=tuple(trace),
        best_step=best_step,
        out_path=str(cfg.out_path),
    )

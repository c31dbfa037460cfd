"""Contrastive training of a linear retrieval adapter.

The trainable unit is a square matrix M applied to frozen base embeddings;
similarity between a query and a passage is (M b_q) . (M b_p). Training
minimizes a multi-label noise contrastive estimation loss where each query's
positives are knowledge-base peers sharing its topic (plus augmented copies
of those peers) and its negatives are the positives of the other queries in
the batch. Everything is seeded and deterministic: same config, same result.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .kb_core import Example, ExampleSet, QueryView, make_choices, serialize_query

logger = logging.getLogger(__name__)

# RAdam moment-average constants; the rectification threshold and formula
# follow the original algorithm (variance is tractable once rho_t > 4).
_BETA1 = 0.9
_BETA2 = 0.999
_EPS = 1e-8

# Above this many choices, full enumeration of the edit space is replaced
# by rejection sampling with a bounded attempt budget.
_ENUMERATION_LIMIT = 7


class TrainingDivergedError(RuntimeError):
    """Loss or gradient became non-finite; message carries the step index."""


def _derive_seed(seed: int, tag: str) -> int:
    """Stable sub-seed so independent random decisions never share a stream."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Loss


def nce_loss_from_sims(pos_sims: Sequence[float], neg_sims: Sequence[float]) -> float:
    """Multi-label NCE loss given precomputed similarities.

    loss = -log sum_j [ e^{s_j} / (e^{s_j} + sum_l e^{u_l}) ]

    where s_j are positive sims and u_l negative sims. Each ratio term is
    stabilized by subtracting its own group max before exponentiation, an
    exact rewrite. With several positives the sum of ratios may exceed 1,
    so the loss may be negative; that is the formula's behavior, not a bug.
    """
    loss, _, _ = _loss_and_sim_grads(np.asarray(pos_sims, float), np.asarray(neg_sims, float))
    return loss


def nce_loss(
    q_vec: np.ndarray,
    pos: Sequence[np.ndarray],
    neg: Sequence[np.ndarray],
) -> float:
    """Multi-label NCE loss with dot-product similarity.

    Per positive p, the ratio e^{q.p} / (e^{q.p} + sum over negatives e^{q.n});
    the loss is minus the log of the sum of ratios over all positives.
    """
    pos_sims, neg_sims = _sims(q_vec, pos, neg)
    loss, _, _ = _loss_and_sim_grads(pos_sims, neg_sims)
    return loss


def nce_grads_from_sims(
    pos_sims: Sequence[float], neg_sims: Sequence[float]
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus its analytic partials with respect to each similarity."""
    return _loss_and_sim_grads(np.asarray(pos_sims, float), np.asarray(neg_sims, float))


def _sims(
    q_vec: np.ndarray, pos: Sequence[np.ndarray], neg: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    if len(pos) == 0:
        raise ValueError("at least one positive is required")
    q = np.asarray(q_vec, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query vector must be one-dimensional")
    dim = q.shape[0]
    for name, group in (("positive", pos), ("negative", neg)):
        for i, vec in enumerate(group):
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.shape[0] != dim:
                raise ValueError(f"{name} vector {i} has dim {arr.shape[-1]}, expected {dim}")
    pos_sims = np.array([float(q @ np.asarray(p, float)) for p in pos])
    neg_sims = np.array([float(q @ np.asarray(n, float)) for n in neg])
    return pos_sims, neg_sims


def _loss_and_sim_grads(
    pos_sims: np.ndarray, neg_sims: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    if pos_sims.size == 0:
        raise ValueError("at least one positive is required")
    if neg_sims.size == 0:
        # Every ratio is exactly 1; gradient is zero everywhere.
        n = float(pos_sims.size)
        return 0.0 - math.log(n), np.zeros_like(pos_sims), np.zeros(0)
    neg_max = float(np.max(neg_sims))
    m = np.maximum(pos_sims, neg_max)
    pos_exp = np.exp(pos_sims - m)
    neg_exp = np.exp(neg_sims[None, :] - m[:, None])
    denom = pos_exp + neg_exp.sum(axis=1)
    ratios = pos_exp / denom
    total = float(ratios.sum())
    if total == 0.0:
        # Every positive is dominated so hard the ratios underflow; report
        # an infinite loss so training aborts instead of crashing on log(0).
        return math.inf, np.zeros_like(pos_sims), np.zeros_like(neg_sims)
    loss = -math.log(total)
    d_pos = -ratios * (1.0 - ratios) / total
    d_neg = (ratios[:, None] * (neg_exp / denom[:, None])).sum(axis=0) / total
    return loss, d_pos, d_neg


# ---------------------------------------------------------------------------
# Positive mining and augmentation


def mine_positives(example_set: ExampleSet, query_id: str, cap: int, seed: int) -> list[str]:
    """Ids of other examples sharing the query's topic, in set order.

    Topic comparison is exact string equality after trimming and case
    folding. When more than ``cap`` peers exist, a seeded uniform sample of
    ``cap`` is taken and returned still in set order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    query = example_set[query_id]
    if query.topic is None or not query.topic.strip():
        raise ValueError(f"untopiced query {query_id!r}")
    wanted = query.topic.strip().casefold()
    peers = [
        ex.id
        for ex in example_set
        if ex.id != query_id
        and ex.topic is not None
        and ex.topic.strip().casefold() == wanted
    ]
    if len(peers) > cap:
        rng = random.Random(_derive_seed(seed, f"mine:{query_id}"))
        keep = sorted(rng.sample(range(len(peers)), cap))
        peers = [peers[i] for i in keep]
    return peers


def _removable_indices(ex: Example) -> list[int]:
    if ex.answer_label is None:
        return list(range(len(ex.choices)))
    return [i for i, c in enumerate(ex.choices) if c.label != ex.answer_label]


def _serialize_variant(ex: Example, choice_texts: Sequence[str]) -> str:
    view = QueryView(id=ex.id, question=ex.question, choices=make_choices(list(choice_texts)))
    return serialize_query(view)


def augment_passages(ex: Example, seed: int, n_variants: int) -> list[str]:
    """Seeded passage variants of an example, for use as extra positives.

    Each variant applies one edit to the choice list, either a non-identity
    permutation or a removal of 1..(n-2) choices, and re-serializes. At
    least two choices always remain, and when the answer label is known the
    answering choice is never removed. Variants are deduplicated against
    the original passage and each other; if fewer than ``n_variants``
    distinct variants exist, all of them are returned.
    """
    if n_variants < 0:
        raise ValueError("n_variants must be >= 0")
    if n_variants == 0:
        return []
    texts = [c.text for c in ex.choices]
    n = len(texts)
    original = serialize_query(ex)
    rng = random.Random(_derive_seed(seed, f"augment:{ex.id}"))
    if n <= _ENUMERATION_LIMIT:
        candidates: list[str] = []
        seen: set[str] = {original}
        for perm in itertools.permutations(range(n)):
            if perm == tuple(range(n)):
                continue
            passage = _serialize_variant(ex, [texts[i] for i in perm])
            if passage not in seen:
                seen.add(passage)
                candidates.append(passage)
        removable = _removable_indices(ex)
        max_removals = min(len(removable), n - 2)
        for r in range(1, max_removals + 1):
            for combo in itertools.combinations(removable, r):
                dropped = set(combo)
                passage = _serialize_variant(
                    ex, [t for i, t in enumerate(texts) if i not in dropped]
                )
                if passage not in seen:
                    seen.add(passage)
                    candidates.append(passage)
        if n_variants >= len(candidates):
            return candidates
        return rng.sample(candidates, n_variants)
    return _sample_variants(ex, texts, original, rng, n_variants)


def _sample_variants(
    ex: Example, texts: list[str], original: str, rng: random.Random, n_variants: int
) -> list[str]:
    # Too many choices to enumerate every edit; draw edits until enough
    # distinct passages are found or the attempt budget runs out.
    removable = _removable_indices(ex)
    max_removals = min(len(removable), len(texts) - 2)
    seen = {original}
    out: list[str] = []
    budget = 1000 + 200 * n_variants
    for _ in range(budget):
        if len(out) >= n_variants:
            break
        if max_removals >= 1 and rng.random() < 0.5:
            r = rng.randint(1, max_removals)
            dropped = set(rng.sample(removable, r))
            variant = [t for i, t in enumerate(texts) if i not in dropped]
        else:
            variant = texts[:]
            rng.shuffle(variant)
        passage = _serialize_variant(ex, variant)
        if passage not in seen:
            seen.add(passage)
            out.append(passage)
    return out


@dataclass(frozen=True)
class AugmentationBank:
    """Pre-generated augmentation passages, keyed for embedding lookup.

    ``passages`` maps each augmentation id to its passage text so callers
    can embed augmentations alongside real examples; ``by_example`` lists
    each example's augmentation ids in generation order.
    """

    passages: dict[str, str]
    by_example: dict[str, tuple[str, ...]]

    def ids_for(self, example_id: str) -> tuple[str, ...]:
        return self.by_example.get(example_id, ())


def build_augmentation_bank(
    example_set: ExampleSet, n_variants: int, seed: int
) -> AugmentationBank:
    """Generate ``n_variants`` augmentations per example with stable ids."""
    passages: dict[str, str] = {}
    by_example: dict[str, tuple[str, ...]] = {}
    for ex in example_set:
        variants = augment_passages(ex, seed=seed, n_variants=n_variants)
        aug_ids = []
        for i, passage in enumerate(variants):
            aug_id = f"{ex.id}::aug{i}"
            if aug_id in example_set:
                raise ValueError(f"augmentation id {aug_id!r} collides with a real example id")
            passages[aug_id] = passage
            aug_ids.append(aug_id)
        by_example[ex.id] = tuple(aug_ids)
    return AugmentationBank(passages=passages, by_example=by_example)


# ---------------------------------------------------------------------------
# Batch assembly


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    max_steps: int = 500
    positive_cap: int = 64
    negative_cap: int = 200
    batch_size: int = 8
    schedule: str = "linear"
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
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


@dataclass(frozen=True, eq=False)
class BatchQuery:
    query_id: str
    positive_ids: tuple[str, ...]
    negative_ids: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    queries: tuple[BatchQuery, ...]
    skipped: tuple[str, ...] = ()


def assemble_batch(
    query_ids: Sequence[str],
    example_set: ExampleSet,
    cfg: TrainConfig,
    aug_bank: AugmentationBank | None = None,
) -> TrainingBatch:
    """Build one training batch with in-batch negatives.

    Per query: positives are its mined topic peers followed by those peers'
    augmentations, truncated at the positive cap; negatives are the union of
    the other usable queries' positives, minus the query itself and its own
    positives, seeded-sampled down to the negative cap. Queries that are
    untopiced or have no positives are skipped; a batch where every query is
    skipped is unusable.
    """
    if len(query_ids) < 2:
        raise ValueError("need at least 2 queries to form in-batch negatives")
    if len(set(query_ids)) != len(query_ids):
        raise ValueError("duplicate query ids in batch")
    positives: dict[str, list[str]] = {}
    skipped: list[str] = []
    for query_id in query_ids:
        try:
            mined = mine_positives(example_set, query_id, cfg.positive_cap, cfg.seed)
        except ValueError:
            skipped.append(query_id)
            continue
        if not mined:
            skipped.append(query_id)
            continue
        pos = list(mined)
        if aug_bank is not None:
            for peer_id in mined:
                if len(pos) >= cfg.positive_cap:
                    break
                room = cfg.positive_cap - len(pos)
                pos.extend(aug_bank.ids_for(peer_id)[:room])
        positives[query_id] = pos[: cfg.positive_cap]
    if not positives:
        raise ValueError("unusable batch: every query is untopiced or has no positives")
    entries: list[BatchQuery] = []
    for query_id in query_ids:
        if query_id not in positives:
            continue
        own = set(positives[query_id])
        own.add(query_id)
        pool: list[str] = []
        pool_seen: set[str] = set()
        for other_id in query_ids:
            if other_id == query_id or other_id not in positives:
                continue
            for candidate in positives[other_id]:
                if candidate in own or candidate in pool_seen:
                    continue
                pool_seen.add(candidate)
                pool.append(candidate)
        if len(pool) > cfg.negative_cap:
            rng = random.Random(_derive_seed(cfg.seed, f"neg:{query_id}"))
            keep = sorted(rng.sample(range(len(pool)), cfg.negative_cap))
            pool = [pool[i] for i in keep]
        entries.append(
            BatchQuery(
                query_id=query_id,
                positive_ids=tuple(positives[query_id]),
                negative_ids=tuple(pool),
            )
        )
    return TrainingBatch(queries=tuple(entries), skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# Adapter weights


@dataclass(frozen=True, eq=False)
class AdapterWeights:
    matrix: np.ndarray
    d_in: int
    d_out: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.matrix, dtype=np.float64)
        if arr.shape != (self.d_out, self.d_in):
            raise ValueError(f"matrix shape {arr.shape} != ({self.d_out}, {self.d_in})")
        if not np.all(np.isfinite(arr)):
            raise ValueError("adapter matrix contains non-finite entries")
        object.__setattr__(self, "matrix", arr)


def init_adapter(dim: int, seed: int) -> AdapterWeights:
    """Identity plus small seeded Gaussian noise, near the frozen baseline."""
    rng = np.random.default_rng(_derive_seed(seed, "init"))
    matrix = np.eye(dim) + 0.01 * rng.standard_normal((dim, dim))
    return AdapterWeights(matrix=matrix, d_in=dim, d_out=dim)


def apply_adapter(weights: AdapterWeights, vectors: np.ndarray) -> np.ndarray:
    """Map base embeddings through the adapter; accepts a vector or a matrix
    of row vectors."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        return weights.matrix @ arr
    return arr @ weights.matrix.T


def save_adapter(weights: AdapterWeights, path: str | Path) -> None:
    payload = {
        "d_in": weights.d_in,
        "d_out": weights.d_out,
        "matrix": [[float(v) for v in row] for row in weights.matrix],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f)
        f.write("\n")


def load_adapter(path: str | Path) -> AdapterWeights:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    for key in ("d_in", "d_out", "matrix"):
        if key not in payload:
            raise ValueError(f"{path.name}: missing key {key!r}")
    matrix = np.asarray(payload["matrix"], dtype=np.float64)
    return AdapterWeights(matrix=matrix, d_in=int(payload["d_in"]), d_out=int(payload["d_out"]))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TraceRow:
    step: int
    loss: float
    lr: float


@dataclass(frozen=True, eq=False)
class TrainResult:
    weights: AdapterWeights
    loss_trace: tuple[TraceRow, ...]
    best_step: int | None = None


def _batch_loss_and_grad(
    matrix: np.ndarray,
    batch: TrainingBatch,
    base: Mapping[str, np.ndarray],
) -> tuple[float, np.ndarray]:
    """Mean per-query loss and its gradient with respect to the adapter.

    Queries are reduced in sorted-id order so the result does not depend on
    batch construction order or any parallel evaluation schedule.
    """
    total_loss = 0.0
    grad = np.zeros_like(matrix)
    ordered = sorted(batch.queries, key=lambda e: e.query_id)
    if not ordered:
        raise ValueError("batch has no usable queries")
    # Divergence shows up as inf/nan here and is caught by the caller's
    # finiteness check; numpy's overflow warnings would only add noise.
    with np.errstate(over="ignore", invalid="ignore"):
        for entry in ordered:
            b_q = _lookup(base, entry.query_id)
            b_pos = np.stack([_lookup(base, pid) for pid in entry.positive_ids])
            q_adapted = matrix @ b_q
            pos_sims = (b_pos @ matrix.T) @ q_adapted
            if entry.negative_ids:
                b_neg = np.stack([_lookup(base, nid) for nid in entry.negative_ids])
                neg_sims = (b_neg @ matrix.T) @ q_adapted
            else:
                b_neg = np.zeros((0, matrix.shape[1]))
                neg_sims = np.zeros(0)
            loss, d_pos, d_neg = _loss_and_sim_grads(pos_sims, neg_sims)
            total_loss += loss
            # d(sim)/dM for sim = (M b_q).(M b_p) is (M b_p) b_q^T + (M b_q) b_p^T;
            # summing over passages with weights d_pos/d_neg collapses to two outer
            # products with w = sum of weighted passage vectors.
            w = b_pos.T @ d_pos
            if d_neg.size:
                w = w + b_neg.T @ d_neg
            grad += np.outer(matrix @ w, b_q) + np.outer(q_adapted, w)
    n = len(ordered)
    return total_loss / n, grad / n


def _lookup(base: Mapping[str, np.ndarray], key: str) -> np.ndarray:
    try:
        return base[key]
    except KeyError:
        raise ValueError(f"missing base embedding for id {key!r}") from None


def _usable_query_ids(
    example_set: ExampleSet, candidate_ids: Sequence[str], cfg: TrainConfig
) -> list[str]:
    usable = []
    for example_id in candidate_ids:
        ex = example_set[example_id]
        if ex.topic is None or not ex.topic.strip():
            continue
        if mine_positives(example_set, example_id, cfg.positive_cap, cfg.seed):
            usable.append(example_id)
    return usable


def train_adapter(
    cfg: TrainConfig,
    base: Mapping[str, np.ndarray],
    example_set: ExampleSet,
    train_ids: Sequence[str] | None = None,
    val_ids: Sequence[str] | None = None,
    aug_bank: AugmentationBank | None = None,
) -> TrainResult:
    """Train the adapter with RAdam under a linear decay-to-zero schedule.

    Each step draws the next ``batch_size`` queries from a seeded epoch
    shuffle, assembles a batch with fresh per-step sampling, and applies one
    rectified-Adam update of the mean per-query loss. When ``val_ids`` is
    given, mean validation loss is measured every ``eval_every`` steps (and
    after the last step) and the weights with the lowest validation loss are
    returned; otherwise the final weights are returned. The whole run is a
    pure function of its arguments.
    """
    candidates = list(train_ids) if train_ids is not None else example_set.ids()
    usable = _usable_query_ids(example_set, candidates, cfg)
    if len(usable) < 2:
        raise ValueError("need at least 2 usable training queries")
    dim = int(np.asarray(_lookup(base, usable[0])).shape[0])
    weights = init_adapter(dim, cfg.seed)
    matrix = weights.matrix.copy()
    if cfg.max_steps == 0:
        return TrainResult(weights=weights, loss_trace=(), best_step=None)

    val_batch: TrainingBatch | None = None
    if val_ids is not None:
        val_batch = assemble_batch(list(val_ids), example_set, cfg, aug_bank)

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
            # A batch needs two distinct queries; epoch boundaries can leak
            # a duplicate into one chunk, so redraw instead of erroring.
            if len(set(picked)) >= 2:
                return list(dict.fromkeys(picked))

    m = np.zeros_like(matrix)
    v = np.zeros_like(matrix)
    rho_inf = 2.0 / (1.0 - _BETA2) - 1.0
    trace: list[TraceRow] = []
    best_matrix = matrix.copy()
    best_val = math.inf
    best_step: int | None = None

    def eval_val(step: int) -> None:
        nonlocal best_val, best_step
        if val_batch is None:
            return
        loss, _ = _batch_loss_and_grad(matrix, val_batch, base)
        if loss < best_val:
            best_val = loss
            best_step = step
            np.copyto(best_matrix, matrix)

    for step in range(1, cfg.max_steps + 1):
        step_cfg = replace(cfg, seed=_derive_seed(cfg.seed, f"step:{step}"))
        batch = assemble_batch(next_batch_ids(), example_set, step_cfg, aug_bank)
        loss, grad = _batch_loss_and_grad(matrix, batch, base)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}")
        lr = cfg.learning_rate * (1.0 - (step - 1) / cfg.max_steps)
        trace.append(TraceRow(step=step, loss=loss, lr=lr))
        m = _BETA1 * m + (1.0 - _BETA1) * grad
        v = _BETA2 * v + (1.0 - _BETA2) * grad * grad
        m_hat = m / (1.0 - _BETA1**step)
        rho_t = rho_inf - 2.0 * step * _BETA2**step / (1.0 - _BETA2**step)
        if rho_t > 4.0:
            v_hat = np.sqrt(v / (1.0 - _BETA2**step))
            rect = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
            matrix = matrix - lr * rect * m_hat / (v_hat + _EPS)
        else:
            matrix = matrix - lr * m_hat
        if val_batch is not None and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            eval_val(step)

    if val_batch is not None and best_step is not None:
        final = AdapterWeights(matrix=best_matrix, d_in=dim, d_out=dim)
    else:
        final = AdapterWeights(matrix=matrix, d_in=dim, d_out=dim)
    logger.info("trained %d steps, final loss %.6f", cfg.max_steps, trace[-1].loss)
    return TrainResult(weights=final, loss_trace=tuple(trace), best_step=best_step)


def write_loss_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
        for row in trace:
            writer.writerow([row.step, repr(row.loss), repr(row.lr)])


def load_loss_trace(path: str | Path) -> list[TraceRow]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [
            TraceRow(step=int(r["step"]), loss=float(r["loss"]), lr=float(r["lr"]))
            for r in reader
        ]

"""Exact top-k dense retrieval over example passages.

Scores are raw dot products between query and passage embeddings; the
index is a plain matrix and search is a full scan, so results are exact
by construction. No normalization is applied anywhere: providers that
normalize internally are fine, the index never re-normalizes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np


class EmbeddingProvider(Protocol):
    """Turns batches of strings into fixed-dimension vectors.

    A provider is identified by its name and declared dimension; it must be
    deterministic if reproducible runs are wanted.
    """

    name: str
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class HashingProvider:
    """Deterministic hash-to-vector provider for tests and offline runs.

    Each text is expanded through SHA-256 into ``dim`` floats in [-1, 1).
    Same (seed, text) always yields the same vector, on any platform.
    """

    def __init__(self, dim: int, seed: int = 0, name: str = "hashing") -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.name = name

    def _vector_for(self, text: str) -> np.ndarray:
        values = np.empty(self.dim, dtype=np.float64)
        material = f"{self.name}:{self.seed}:{text}".encode("utf-8")
        block_index = 0
        filled = 0
        while filled < self.dim:
            digest = hashlib.sha256(material + b"|" + str(block_index).encode()).digest()
            for offset in range(0, 32, 8):
                if filled >= self.dim:
                    break
                (word,) = struct.unpack_from(">Q", digest, offset)
                values[filled] = word / 2**63 - 1.0
                filled += 1
            block_index += 1
        return values

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._vector_for(t) for t in texts]


def embed_texts(provider: EmbeddingProvider, texts: Sequence[str]) -> list[np.ndarray]:
    """Embed a batch, enforcing order, finiteness, and a uniform dimension."""
    if len(texts) == 0:
        raise ValueError("empty batch")
    vectors = provider.embed(texts)
    if len(vectors) != len(texts):
        raise ValueError(
            f"provider {provider.name!r} returned {len(vectors)} vectors for {len(texts)} texts"
        )
    out: list[np.ndarray] = []
    for i, vec in enumerate(vectors):
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != provider.dim:
            raise ValueError(
                f"vector {i} has dim {arr.shape} but provider {provider.name!r} declares {provider.dim}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"vector {i} contains non-finite entries")
        out.append(arr)
    return out


@dataclass(frozen=True)
class RetrievalHit:
    example_id: str
    score: float


class ExampleIndex:
    """Immutable id-aligned matrix of passage embeddings."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray) -> None:
        self._ids = tuple(ids)
        self._matrix = matrix
        self._matrix.setflags(write=False)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1])

    def __len__(self) -> int:
        return len(self._ids)


def build_index(ids: Sequence[str], vectors: Sequence[np.ndarray]) -> ExampleIndex:
    """Assemble an index, rejecting mismatched lengths, dims, and duplicate ids."""
    if len(ids) != len(vectors):
        raise ValueError(f"{len(ids)} ids but {len(vectors)} vectors")
    if len(ids) == 0:
        raise ValueError("cannot build an empty index")
    seen: set[str] = set()
    for example_id in ids:
        if example_id in seen:
            raise ValueError(f"duplicate id {example_id!r}")
        seen.add(example_id)
    dim = int(np.asarray(vectors[0]).shape[0])
    rows = np.empty((len(vectors), dim), dtype=np.float64)
    for i, vec in enumerate(vectors):
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != dim:
            raise ValueError(f"vector at position {i} has dim {arr.shape[-1]}, expected {dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"vector at position {i} contains non-finite entries")
        rows[i] = arr
    return ExampleIndex(ids, rows)


def search(
    index: ExampleIndex,
    query: np.ndarray,
    k: int,
    exclude: Iterable[str] = (),
) -> list[RetrievalHit]:
    """Return the top-k passages by dot product, excluding the given ids.

    Hits are sorted by score descending; ties keep index insertion order.
    The result has min(k, |index| - |exclude in index|) entries.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != index.dim:
        raise ValueError(f"query dim {query.shape} does not match index dim {index.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    excluded = set(exclude)
    scores = index.matrix @ query
    order = np.argsort(-scores, kind="stable")
    hits: list[RetrievalHit] = []
    for pos in order:
        example_id = index.ids[pos]
        if example_id in excluded:
            continue
        hits.append(RetrievalHit(example_id=example_id, score=float(scores[pos])))
        if len(hits) == k:
            break
    return hits


def write_embeddings(path: str | Path, ids: Sequence[str], vectors: Sequence[np.ndarray]) -> None:
    """Write the embedding interchange file: one {"id", "vector"} object per line."""
    if len(ids) != len(vectors):
        raise ValueError(f"{len(ids)} ids but {len(vectors)} vectors")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for example_id, vec in zip(ids, vectors):
            record = {"id": example_id, "vector": [float(v) for v in np.asarray(vec)]}
            f.write(json.dumps(record, ensure_ascii=False))
            f.write("\n")


def load_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Load an embedding JSONL file; all lines must share one vector length."""
    path = Path(path)
    ids: list[str] = []
    rows: list[list[float]] = []
    dim: int | None = None
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path.name}:{line_no}: invalid JSON ({e.msg})") from e
            if "id" not in record or "vector" not in record:
                raise ValueError(f"{path.name}:{line_no}: expected keys 'id' and 'vector'")
            vector = record["vector"]
            if dim is None:
                dim = len(vector)
            elif len(vector) != dim:
                raise ValueError(
                    f"{path.name}:{line_no}: vector length {len(vector)} != {dim} from line 1"
                )
            ids.append(str(record["id"]))
            rows.append(vector)
    if dim is None:
        raise ValueError(f"{path.name}: no embeddings found")
    return ids, np.asarray(rows, dtype=np.float64)


def load_embedding_map(path: str | Path) -> dict[str, np.ndarray]:
    """Embedding file as an id -> vector mapping."""
    ids, matrix = load_embeddings(path)
    return {example_id: matrix[i] for i, example_id in enumerate(ids)}

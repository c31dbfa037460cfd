"""Batch embedding export in zebra's interchange format.

Input is a TSV of ``id<TAB>text`` lines; output is written through
zebra's own embedding writer, so whatever this module produces is by
construction loadable on the other side. Batch order is preserved and
the run is deterministic for a fixed model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from zebra import write_embeddings

from .encoders import load_encoder


@dataclass(frozen=True)
class ExportResult:
    count: int
    dim: int
    path: str


def read_texts(path: str | Path) -> list[tuple[str, str]]:
    """Parse the TSV strictly: exactly two non-empty fields per line.

    A tab inside the id (or the text) produces a third field and is
    rejected with its line number rather than silently resegmented.
    """
    path = Path(path)
    pairs: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                raise ValueError(f"{path.name}:{lineno}: empty line")
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(
                    f"{path.name}:{lineno}: expected 'id<TAB>text', got {len(fields)} fields"
                )
            text_id, text = fields
            if not text_id or not text:
                raise ValueError(f"{path.name}:{lineno}: empty id or text")
            if text_id in seen:
                raise ValueError(f"{path.name}:{lineno}: duplicate id {text_id!r}")
            seen.add(text_id)
            pairs.append((text_id, text))
    if not pairs:
        raise ValueError(f"{path.name}: no texts")
    return pairs


def export_embeddings(
    texts_file: str | Path,
    model_name: str,
    out_path: str | Path,
    batch_size: int = 32,
) -> ExportResult:
    """Encode every text and write the embedding JSONL, order preserved."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = read_texts(texts_file)
    encoder = load_encoder(model_name)
    vectors: list[np.ndarray] = []
    for start in range(0, len(pairs), batch_size):
        chunk = [text for _, text in pairs[start : start + batch_size]]
        arr = encoder.encode(chunk)
        if arr.shape != (len(chunk), encoder.dim):
            raise ValueError(
                f"encoder returned shape {arr.shape}, expected ({len(chunk)}, {encoder.dim})"
            )
        vectors.extend(arr[i] for i in range(arr.shape[0]))
    write_embeddings(out_path, [text_id for text_id, _ in pairs], vectors)
    return ExportResult(count=len(pairs), dim=encoder.dim, path=str(out_path))

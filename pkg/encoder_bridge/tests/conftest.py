from __future__ import annotations

import pytest

from zebra import serialize_query, write_examples

from .toyset import make_toy_kb


@pytest.fixture()
def toy_paths(tmp_path):
    """Toy KB and validation files on disk, plus the matching texts TSV."""
    kb = make_toy_kb()
    val = make_toy_kb(n_per_topic=3, seed=8, prefix="v")
    kb_path = tmp_path / "kb.jsonl"
    val_path = tmp_path / "val.jsonl"
    write_examples(kb, kb_path)
    write_examples(val, val_path)
    texts_path = tmp_path / "texts.tsv"
    lines = [f"{i}\t{serialize_query(kb[i])}" for i in kb.ids()]
    texts_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"kb": kb, "kb_path": kb_path, "val_path": val_path, "texts_path": texts_path}

"""Text encoders behind one tiny interface.

Two families are supported, selected by a prefixed model name:

``toy:dim=16,buckets=256,seed=0``
    A deterministic hashed bag-of-tokens encoder: each token maps to a
    bucket by sha256, buckets map to learned embedding rows, and a text
    is the mean of its token rows. Small, CPU-only, float64, and fully
    reproducible, which makes it the unit under test for the training
    loop.

``hf:<checkpoint>``
    A transformers checkpoint with attention-masked mean pooling over the
    last hidden state. Loaded lazily so the package works without the
    transformers extra installed.

Both are torch modules, so the fine-tuning loop treats them uniformly.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np
import torch


class ModelLoadError(RuntimeError):
    """The requested model name cannot be resolved or loaded."""


_TOKEN_RE = re.compile(r"[a-z0-9]+")

_TOY_DEFAULTS = {"dim": 16, "buckets": 256, "seed": 0}


def _tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _bucket(token: str, buckets: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % buckets


class ToyEncoder(torch.nn.Module):
    """Hashed bag-of-tokens encoder with a learned bucket table.

    The table starts from a seeded Gaussian scaled by 1/sqrt(dim), so two
    instances built from the same spec string encode identically. A text
    with no alphanumeric tokens encodes to the zero vector.
    """

    def __init__(self, dim: int, buckets: int, seed: int):
        super().__init__()
        if dim < 1 or buckets < 1:
            raise ModelLoadError(f"toy encoder needs dim >= 1 and buckets >= 1, got {dim}, {buckets}")
        rng = np.random.default_rng(seed)
        init = rng.standard_normal((buckets, dim)) / np.sqrt(dim)
        self.table = torch.nn.Parameter(torch.from_numpy(init))
        self._dim = dim
        self._buckets = buckets

    @property
    def dim(self) -> int:
        return self._dim

    def forward(self, texts: list[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            ids = [_bucket(t, self._buckets) for t in _tokens(text)]
            if ids:
                rows.append(self.table[ids].mean(dim=0))
            else:
                rows.append(torch.zeros(self._dim, dtype=self.table.dtype))
        return torch.stack(rows)

    def encode(self, texts: list[str]) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return self.forward(list(texts)).numpy().copy()


class HfEncoder(torch.nn.Module):
    """Mean-pooled transformers checkpoint; float64 outputs for parity
    with the rest of the pipeline."""

    def __init__(self, checkpoint: str):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise ModelLoadError(f"transformers is not installed: {e}") from e
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
            self.model = AutoModel.from_pretrained(checkpoint)
        except Exception as e:
            raise ModelLoadError(f"cannot load checkpoint {checkpoint!r}: {e}") from e
        self._dim = int(self.model.config.hidden_size)

    @property
    def dim(self) -> int:
        return self._dim

    def forward(self, texts: list[str]) -> torch.Tensor:
        batch = self.tokenizer(texts, padding=True, truncation=True, return_tensors="pt")
        hidden = self.model(**batch).last_hidden_state
        mask = batch["attention_mask"].unsqueeze(-1).to(hidden.dtype)
        pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return pooled.to(torch.float64)

    def encode(self, texts: list[str]) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return self.forward(list(texts)).numpy().copy()


def _parse_toy_spec(spec: str) -> dict[str, int]:
    params = dict(_TOY_DEFAULTS)
    if not spec:
        return params
    for part in spec.split(","):
        key, sep, value = part.partition("=")
        if not sep or key not in params:
            raise ModelLoadError(f"bad toy parameter {part!r} (expected dim=, buckets=, seed=)")
        try:
            params[key] = int(value)
        except ValueError:
            raise ModelLoadError(f"toy parameter {key} needs an integer, got {value!r}") from None
    return params


def load_encoder(model_name: str):
    """Resolve a model name to an encoder instance."""
    if model_name == "toy" or model_name.startswith("toy:"):
        _, _, spec = model_name.partition(":")
        params = _parse_toy_spec(spec)
        return ToyEncoder(dim=params["dim"], buckets=params["buckets"], seed=params["seed"])
    if model_name.startswith("hf:"):
        return HfEncoder(model_name[3:])
    raise ModelLoadError(
        f"unknown model family in {model_name!r} (expected 'toy:...' or 'hf:...')"
    )

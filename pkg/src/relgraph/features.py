"""Row featurization shared by the tabular baseline and the node encoder."""

from __future__ import annotations

import re
import zlib

import numpy as np

TEXT_DIM = 64
TIME_BUCKETS = 16
_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def hash_text(texts, dim: int = TEXT_DIM) -> np.ndarray:
    """Hashed bag-of-tokens, log-scaled counts. crc32 keeps it stable across processes."""
    out = np.zeros((len(texts), dim), dtype=np.float64)
    for i, text in enumerate(texts):
        for tok in tokenize(text or ""):
            out[i, zlib.crc32(tok.encode("utf-8")) % dim] += 1.0
    return np.log1p(out)


def time_bucket(delta_seconds: np.ndarray) -> np.ndarray:
    """floor(log2(1 + dt/1h)) clipped to [0, 15]; hour-scale resolution near the seed time."""
    dt = np.maximum(np.asarray(delta_seconds, dtype=np.float64), 0.0)
    return np.minimum(np.floor(np.log2(1.0 + dt / 3600.0)), TIME_BUCKETS - 1).astype(np.int64)


def time_one_hot(delta_seconds: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros((len(delta_seconds), TIME_BUCKETS))
    b = time_bucket(np.where(valid, delta_seconds, 0))
    rows = np.flatnonzero(valid)
    out[rows, b[rows]] = 1.0
    return out


class TableFeaturizer:
    """Encodes raw feature columns of one table into a dense block plus categorical codes.

    Dense block: for each numeric or timestamp column a standardized value and a
    missing flag; for each text column the hashed bag of tokens. Categorical
    columns become integer codes: 0 for null, 1 for unseen, 2.. for the vocabulary.
    """

    def __init__(self, columns, fit_rows: np.ndarray | None = None):
        self.numeric: list[tuple[str, float, float]] = []
        self.text: list[str] = []
        self.categorical: list[tuple[str, dict]] = []
        for col in columns:
            vals = col.values if fit_rows is None else [col.values[i] for i in fit_rows]
            if col.semantic_type in ("numeric", "timestamp"):
                x = np.array([np.nan if v is None else float(v) for v in vals], dtype=np.float64)
                ok = ~np.isnan(x)
                mean = float(x[ok].mean()) if ok.any() else 0.0
                std = float(x[ok].std()) if ok.sum() > 1 else 0.0
                self.numeric.append((col.name, mean, std if std > 0 else 1.0))
            elif col.semantic_type == "text":
                self.text.append(col.name)
            elif col.semantic_type == "categorical":
                vocab = sorted({v for v in vals if v is not None})
                self.categorical.append((col.name, {v: i + 2 for i, v in enumerate(vocab)}))

    @property
    def dense_dim(self) -> int:
        return 2 * len(self.numeric) + TEXT_DIM * len(self.text)

    @property
    def vocab_sizes(self) -> list[int]:
        return [len(v) + 2 for _, v in self.categorical]

    def transform(self, columns, rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        by_name = {c.name: c for c in columns}
        n = len(next(iter(by_name.values())).values) if by_name else 0
        rows = np.arange(n) if rows is None else np.asarray(rows)
        blocks = []
        for name, mean, std in self.numeric:
            vals = by_name[name].values
            x = np.array([np.nan if vals[i] is None else float(vals[i]) for i in rows], dtype=np.float64)
            miss = np.isnan(x)
            blocks.append(np.where(miss, 0.0, (x - mean) / std)[:, None])
            blocks.append(miss.astype(np.float64)[:, None])
        for name in self.text:
            vals = by_name[name].values
            blocks.append(hash_text([vals[i] for i in rows]))
        dense = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(rows), 0))
        codes = np.zeros((len(rows), len(self.categorical)), dtype=np.int64)
        for j, (name, vocab) in enumerate(self.categorical):
            vals = by_name[name].values
            codes[:, j] = [0 if vals[i] is None else vocab.get(vals[i], 1) for i in rows]
        return dense, codes

    def state(self) -> dict:
        return {
            "numeric": [list(x) for x in self.numeric],
            "text": list(self.text),
            "categorical": [[name, sorted(vocab, key=vocab.get)] for name, vocab in self.categorical],
        }

    @classmethod
    def from_state(cls, state: dict) -> "TableFeaturizer":
        f = cls([])
        f.numeric = [tuple(x) for x in state["numeric"]]
        f.text = list(state["text"])
        f.categorical = [(name, {v: i + 2 for i, v in enumerate(vocab)}) for name, vocab in state["categorical"]]
        return f

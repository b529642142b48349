"""Token datasets, batching, and multiple-choice items.

A TokenDataset cuts a token stream into contiguous non-overlapping windows
of seq_len + 1 ids; inputs are ids[:-1] and targets ids[1:] (shift by
one). A stream of L tokens yields floor((L - 1) / seq_len) windows. The
batch iterator walks a seeded permutation of windows and reshuffles at
every epoch wrap, so batch order is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import BadRecord, EmptyDataset, InvalidConfig


class TokenDataset:
    def __init__(self, ids, seq_len: int):
        if seq_len < 1:
            raise InvalidConfig(f"seq_len must be >= 1, got {seq_len}")
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        self.seq_len = seq_len
        self.n_windows = (len(self.ids) - 1) // seq_len if len(self.ids) else 0
        if self.n_windows < 1:
            raise EmptyDataset(
                f"{len(self.ids)} tokens cannot fill one window of {seq_len + 1}"
            )

    def __len__(self) -> int:
        return self.n_windows

    def window(self, i: int):
        start = i * self.seq_len
        chunk = self.ids[start : start + self.seq_len + 1]
        return chunk[:-1], chunk[1:]

    def batch(self, indices):
        xs, ys = zip(*(self.window(int(i)) for i in indices))
        return np.stack(xs), np.stack(ys)

    def batch_iter(self, batch_size: int, seed: int):
        """Endless batches over a per-epoch reshuffled window permutation."""
        if batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {batch_size}")
        rng = np.random.default_rng(seed)
        pool: list = []
        while True:
            while len(pool) < batch_size:
                pool.extend(rng.permutation(self.n_windows).tolist())
            take, pool = pool[:batch_size], pool[batch_size:]
            yield self.batch(take)


def split_tokens(ids, train_fraction: float = 0.9):
    """Contiguous head/tail split of a token stream (train, held-out)."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    cut = int(len(ids) * train_fraction)
    return ids[:cut], ids[cut:]


@dataclass
class MCQItem:
    question: str
    options: list
    answer: int

    def validate(self, lineno: int = 0) -> None:
        where = f"line {lineno}: " if lineno else ""
        if not self.options:
            raise BadRecord(f"{where}item has no options")
        if not 0 <= self.answer < len(self.options):
            raise BadRecord(
                f"{where}answer {self.answer} outside 0..{len(self.options) - 1}"
            )


def load_mcq(path) -> list:
    """Read JSONL items {question, options, answer}; errors name the line."""
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                item = MCQItem(
                    question=str(doc["question"]),
                    options=[str(o) for o in doc["options"]],
                    answer=int(doc["answer"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise BadRecord(f"{path}:{lineno}: bad item ({e})") from None
            item.validate(lineno)
            items.append(item)
    if not items:
        raise EmptyDataset(f"{path}: no items")
    return items

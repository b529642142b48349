"""Greedy decoding with a per-layer key/value cache.

The cache stores one append-only [batch, heads, seen, head_dim] pair per
attention layer, so each new token costs one single-position forward
instead of recomputing the whole prefix. Cached and cache-free decoding
produce token-identical output; ties at the argmax resolve to the lowest
token id in both paths.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..tensor import Tensor


class KVCache:
    def __init__(self):
        self._store: dict = {}

    @property
    def position(self) -> int:
        """Tokens already cached (identical across layers by construction)."""
        if not self._store:
            return 0
        k, _ = next(iter(self._store.values()))
        return k.shape[2]

    def length(self, layer) -> int:
        entry = self._store.get(id(layer))
        return 0 if entry is None else entry[0].shape[2]

    def append(self, layer, k: Tensor, v: Tensor):
        """Append this step's keys/values; returns full-history tensors."""
        entry = self._store.get(id(layer))
        if entry is None:
            knew, vnew = k.data, v.data
        else:
            knew = np.concatenate([entry[0], k.data], axis=2)
            vnew = np.concatenate([entry[1], v.data], axis=2)
        self._store[id(layer)] = (knew, vnew)
        return Tensor(knew), Tensor(vnew)


def generate(model, prompt_ids, max_new_tokens: int, use_cache: bool = True) -> np.ndarray:
    """Greedily extend prompt_ids by up to max_new_tokens ids.

    Decoding stops early when the context window fills. Runs with the tape
    off and the model in eval mode; the caller's training flag is restored.
    """
    ids = np.asarray(prompt_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            if use_cache and max_new_tokens > 0:
                cache = KVCache()
                logits = model.forward(ids, cache=cache)
                for step in range(max_new_tokens):
                    nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
                    ids = np.concatenate([ids, nxt[:, None]], axis=1)
                    if ids.shape[1] >= model.config.max_seq_len or step == max_new_tokens - 1:
                        break
                    logits = model.forward(nxt[:, None], cache=cache)
            elif not use_cache:
                for _ in range(max_new_tokens):
                    logits = model.forward(ids)
                    nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
                    ids = np.concatenate([ids, nxt[:, None]], axis=1)
                    if ids.shape[1] >= model.config.max_seq_len:
                        break
    finally:
        model.train(was_training)
    return ids[0] if squeeze else ids

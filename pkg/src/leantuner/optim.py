"""Optimizers and trainable-parameter selection.

AdamW keeps bias-corrected first and second moments per parameter and
applies weight decay decoupled from the adaptive update:

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)

Decay is skipped for biases and layer-norm parameters. Moment buffers are
allocated lazily on the first step, and step_count increments exactly once
per optimizer step no matter how many backward calls accumulated into the
gradients. State round-trips through the same tensor container used for
model checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, MissingGradient
from .tensor import DTYPE, Tensor

_NO_DECAY_SUFFIXES = (".bias", ".gamma", ".beta")


def trainable_params(model, mode: str):
    """Named parameters the given fine-tuning mode actually updates.

    "full" selects every parameter that requires gradients; "lora" selects
    exactly the adapter factors. The two sets are what full fine-tuning and
    adapter fine-tuning are allowed to move, and nothing else.
    """
    if mode == "full":
        return [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if mode == "lora":
        return [
            (n, p)
            for n, p in model.named_parameters()
            if n.endswith(("lora_a", "lora_b")) and p.requires_grad
        ]
    raise InvalidConfig(f"unknown fine-tuning mode {mode!r}")


def _wants_decay(name: str) -> bool:
    return not name.endswith(_NO_DECAY_SUFFIXES)


class AdamW:
    def __init__(
        self,
        named_params,
        lr: float,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(named_params)
        if not self.params:
            raise InvalidConfig("optimizer received no parameters")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            T.touch((p,))
            if p.grad is None:
                raise MissingGradient(f"no gradient for trainable parameter {name}")
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and _wants_decay(name):
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(DTYPE, copy=False)

    def state_tensors(self) -> dict:
        out = {}
        for name in self._m:
            out[name + ".m"] = self._m[name]
            out[name + ".v"] = self._v[name]
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        self._m.clear()
        self._v.clear()
        for key, arr in tensors.items():
            if key.endswith(".m"):
                self._m[key[:-2]] = np.array(arr, dtype=DTYPE)
            elif key.endswith(".v"):
                self._v[key[:-2]] = np.array(arr, dtype=DTYPE)
        self.step_count = int(step_count)

    def save_state(self, path) -> None:
        from .checkpoint import save_tensors

        save_tensors(path, self.state_tensors(), {"step_count": str(self.step_count)})

    def load_state(self, path) -> None:
        from .checkpoint import load_tensors

        tensors, meta = load_tensors(path)
        self.load_state_tensors(tensors, int(meta.get("step_count", "0")))


class SGD:
    """Plain stochastic gradient descent, the comparison baseline."""

    def __init__(self, named_params, lr: float):
        self.params = list(named_params)
        if not self.params:
            raise InvalidConfig("optimizer received no parameters")
        self.lr = float(lr)
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params:
            T.touch((p,))
            if p.grad is None:
                raise MissingGradient(f"no gradient for trainable parameter {name}")
            p.data -= (self.lr * p.grad).astype(DTYPE, copy=False)

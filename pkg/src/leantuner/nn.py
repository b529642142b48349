"""Neural network layers built on the tensor core.

Module is a minimal container: assigning a Tensor to an attribute registers
a parameter, assigning a Module registers a child. named_parameters walks
the tree in definition order, which is also the order the shard manifest
partitions. Leaf layers announce their parameters through tensor.touch()
right before using them so an active shard runtime can page segments in.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from . import tensor as T
from .errors import SequenceTooLong, ShapeMismatch
from .tensor import DTYPE, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._modules.pop(name, None)
            self._params[name] = value
        elif isinstance(value, Module):
            self._params.pop(name, None)
            self._modules[name] = value
        object.__setattr__(self, name, value)

    # -- tree walking ---------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield (prefix.rstrip("."), self)
        for name, mod in self._modules.items():
            yield from mod.named_modules(prefix + name + ".")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def _touch(self):
        T.touch(self._params.values())

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for i, mod in enumerate(modules):
            setattr(self, str(i), mod)

    def __getitem__(self, i: int) -> Module:
        return self._modules[str(i)]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


def _init_weight(shape, std: float = 0.02) -> np.ndarray:
    return T.get_rng().normal(0.0, std, size=shape).astype(DTYPE)


class Linear(Module):
    """y = x @ weight.T + bias, weight stored [out_features, in_features]."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_init_weight((out_features, in_features)), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_features, dtype=DTYPE), requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    @classmethod
    def from_weights(cls, weight: np.ndarray, bias=None, requires_grad: bool = True):
        """Build a Linear around existing [out, in] weights without RNG use."""
        layer = cls.__new__(cls)
        Module.__init__(layer)
        layer.out_features, layer.in_features = weight.shape
        layer.weight = Tensor(weight, requires_grad=requires_grad)
        if bias is not None:
            layer.bias = Tensor(bias, requires_grad=requires_grad)
        else:
            object.__setattr__(layer, "bias", None)
        return layer

    def forward(self, x: Tensor) -> Tensor:
        self._touch()
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    """Learned id-to-vector table, rows gathered by integer id."""

    def __init__(self, num_embeddings: int, dim: int):
        super().__init__()
        self.num_embeddings = num_embeddings
        self.dim = dim
        self.weight = Tensor(_init_weight((num_embeddings, dim)), requires_grad=True)

    def forward(self, ids: np.ndarray) -> Tensor:
        self._touch()
        return ops.embedding_lookup(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=DTYPE), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        self._touch()
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout; identity when evaluating or in deterministic mode."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ShapeMismatch(f"dropout probability {p} outside [0, 1)")
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0 or T.is_deterministic():
            return x
        keep = 1.0 - self.p
        mask = (T.get_rng().random(x.shape) < keep).astype(DTYPE) / DTYPE(keep)
        return ops.mul(x, Tensor(mask))


class CausalSelfAttention(Module):
    """Multi-head self attention with a causal mask.

    The three input projections are separate logical layers (q_proj, k_proj,
    v_proj); checkpoints that store them fused in GPT-2 layout are split on
    load. Scores are scaled by 1/sqrt(head_dim); masked positions receive a
    large negative additive constant, which underflows to an exact zero
    weight after the stable softmax.
    """

    def __init__(self, d_model: int, n_heads: int, max_seq_len: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ShapeMismatch(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.max_seq_len = max_seq_len
        self.q_proj = Linear(d_model, d_model)
        self.k_proj = Linear(d_model, d_model)
        self.v_proj = Linear(d_model, d_model)
        self.out_proj = Linear(d_model, d_model)
        # Additive mask, upper triangle forbidden. Plain buffer, not a param.
        neg = np.full((max_seq_len, max_seq_len), -1e9, dtype=DTYPE)
        object.__setattr__(self, "_mask", np.triu(neg, k=1))

    def _split_heads(self, x: Tensor, batch: int, seq: int) -> Tensor:
        x = ops.reshape(x, (batch, seq, self.n_heads, self.head_dim))
        return ops.transpose(x, (0, 2, 1, 3))

    def forward(self, x: Tensor, cache=None) -> Tensor:
        batch, seq, _ = x.shape
        past = 0 if cache is None else cache.length(self)
        total = past + seq
        if total > self.max_seq_len:
            raise SequenceTooLong(f"sequence of {total} exceeds max {self.max_seq_len}")

        q = self._split_heads(self.q_proj(x), batch, seq)
        k = self._split_heads(self.k_proj(x), batch, seq)
        v = self._split_heads(self.v_proj(x), batch, seq)
        if cache is not None:
            k, v = cache.append(self, k, v)

        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        scores = ops.scale(scores, 1.0 / math.sqrt(self.head_dim))
        mask = self._mask[past:total, :total]
        scores = ops.add(scores, Tensor(mask))
        att = ops.softmax(scores, axis=-1)
        out = ops.matmul(att, v)
        out = ops.transpose(out, (0, 2, 1, 3))
        out = ops.reshape(out, (batch, seq, self.d_model))
        return self.out_proj(out)


class MLP(Module):
    """Position-wise feed-forward: expand 4x, GELU, project back."""

    def __init__(self, d_model: int):
        super().__init__()
        self.fc = Linear(d_model, 4 * d_model)
        self.proj = Linear(4 * d_model, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(ops.gelu(self.fc(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, max_seq_len: int):
        super().__init__()
        self.ln1 = LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads, max_seq_len)
        self.ln2 = LayerNorm(d_model)
        self.mlp = MLP(d_model)

    def forward(self, x: Tensor, cache=None) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x), cache=cache))
        return ops.add(x, self.mlp(self.ln2(x)))

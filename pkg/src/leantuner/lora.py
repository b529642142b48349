"""Low-rank adapters over frozen linear layers.

A LoRALinear wraps an existing Linear: the wrapped weights are frozen and
the layer's output becomes base(x) + scaling * (dropout(x) @ A.T) @ B.T,
with A [r, in] drawn from N(0, 0.02^2) and B [out, r] zeros. Zero-init B
makes a freshly attached adapter bit-exact with the base layer, so
attaching adapters never perturbs the model before training starts.
scaling = alpha / r.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .errors import InvalidConfig, NoTargetsMatched
from .nn import Dropout, Linear, Module
from .tensor import DTYPE, Tensor

DEFAULT_TARGETS = ("q_proj", "v_proj")


@dataclass
class LoRAConfig:
    r: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple = DEFAULT_TARGETS

    def validate(self) -> None:
        if self.r < 1:
            raise InvalidConfig(f"lora rank must be >= 1, got {self.r}")
        if self.alpha <= 0:
            raise InvalidConfig(f"lora alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"lora dropout {self.dropout} outside [0, 1)")
        if not self.targets:
            raise InvalidConfig("lora targets must not be empty")


class LoRALinear(Module):
    def __init__(self, base: Linear, r: int, alpha: float, dropout: float = 0.0):
        super().__init__()
        base.weight.requires_grad = False
        if base.bias is not None:
            base.bias.requires_grad = False
        self.base = base
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        self.dropout = Dropout(dropout)
        self.lora_a = Tensor(
            T.get_rng().normal(0.0, 0.02, size=(r, base.in_features)).astype(DTYPE),
            requires_grad=True,
        )
        self.lora_b = Tensor(
            np.zeros((base.out_features, r), dtype=DTYPE), requires_grad=True
        )

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        T.touch((self.lora_a, self.lora_b))
        down = ops.linear(self.dropout(x), self.lora_a)
        up = ops.linear(down, self.lora_b)
        return ops.add(y, ops.scale(up, self.scaling))

    def merged_weight(self) -> np.ndarray:
        return self.base.weight.data + DTYPE(self.scaling) * (
            self.lora_b.data @ self.lora_a.data
        )


def attach_lora(model: Module, config: LoRAConfig) -> int:
    """Freeze the model and wrap every targeted Linear; returns the count.

    Targets are matched by the child attribute name inside its parent
    (q_proj, v_proj, ...). Raises NoTargetsMatched when nothing matched,
    which usually means a typo in the target list.
    """
    config.validate()
    for _, p in model.named_parameters():
        p.requires_grad = False
    replaced = 0
    for _, module in model.named_modules():
        for child_name in list(module._modules):
            child = module._modules[child_name]
            if child_name in config.targets and isinstance(child, Linear):
                setattr(
                    module,
                    child_name,
                    LoRALinear(child, config.r, config.alpha, config.dropout),
                )
                replaced += 1
    if replaced == 0:
        raise NoTargetsMatched(f"no linear layer matched targets {config.targets}")
    return replaced


def lora_parameters(model: Module):
    """(name, tensor) pairs for the adapter factors, in definition order."""
    return [
        (name, p)
        for name, p in model.named_parameters()
        if name.endswith("lora_a") or name.endswith("lora_b")
    ]


def trainable_param_count(model: Module) -> int:
    return sum(p.size for _, p in lora_parameters(model))


def merge_lora(layer: LoRALinear) -> Linear:
    """Collapse an adapter into a plain Linear with identical outputs."""
    bias = layer.base.bias.data.copy() if layer.base.bias is not None else None
    return Linear.from_weights(layer.merged_weight(), bias, requires_grad=False)


def merge_all_lora(model: Module) -> int:
    """Replace every LoRALinear in the tree with its merged Linear."""
    merged = 0
    for _, module in model.named_modules():
        for child_name in list(module._modules):
            child = module._modules[child_name]
            if isinstance(child, LoRALinear):
                setattr(module, child_name, merge_lora(child))
                merged += 1
    return merged

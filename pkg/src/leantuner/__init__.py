"""Self-contained LLM fine-tuning engine for small machines.

Four layers, each usable on its own:

- tensor/ops: numpy-backed tensors with reverse-mode autodiff on a tape
- nn/lora: transformer building blocks plus low-rank adapters
- optim: AdamW and SGD over named parameters
- models: a GPT-2 family with tokenizers, generation, and checkpoints

plus the system side: segment-based parameter offload (memory), battery-aware
throttling (energy), and a micro-batched training loop (train) behind a CLI.
"""

from . import ops
from .errors import EngineError
from .lora import LoRAConfig, attach_lora, lora_parameters, merge_all_lora, trainable_param_count
from .memory import ByteBudget, SegmentCount, ShardManifest, ShardRuntime, build_manifest
from .nn import Module
from .optim import SGD, AdamW, trainable_params
from .tensor import Tensor, backward, is_deterministic, no_grad, set_deterministic, set_seed, zero_grad
from .train import TrainConfig, evaluate_mcq, evaluate_ppl, train_model

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ByteBudget",
    "EngineError",
    "LoRAConfig",
    "Module",
    "SGD",
    "SegmentCount",
    "ShardManifest",
    "ShardRuntime",
    "Tensor",
    "TrainConfig",
    "attach_lora",
    "backward",
    "build_manifest",
    "evaluate_mcq",
    "evaluate_ppl",
    "is_deterministic",
    "lora_parameters",
    "merge_all_lora",
    "no_grad",
    "ops",
    "set_deterministic",
    "set_seed",
    "trainable_param_count",
    "trainable_params",
    "train_model",
    "zero_grad",
]

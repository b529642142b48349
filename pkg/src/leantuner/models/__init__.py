from .gpt2 import (
    GPT2_MEDIUM,
    GPT2_SMALL,
    GPT2Model,
    ModelConfig,
    load_adapters,
    load_checkpoint,
    model_from_checkpoint,
    save_adapters,
    save_checkpoint,
)
from .generate import KVCache, generate
from .tokenizer import BPETokenizer, ByteTokenizer, load_tokenizer

__all__ = [
    "GPT2_MEDIUM",
    "GPT2_SMALL",
    "GPT2Model",
    "ModelConfig",
    "KVCache",
    "BPETokenizer",
    "ByteTokenizer",
    "generate",
    "load_adapters",
    "load_checkpoint",
    "load_tokenizer",
    "model_from_checkpoint",
    "save_adapters",
    "save_checkpoint",
]

"""GPT-2 style decoder-only language models.

The module tree exposes three logical attention projections per block; on
disk, checkpoints keep the published GPT-2 layout (fused c_attn matrix,
Conv1D-transposed weights). A versioned mapping table shipped with the
package (assets/gpt2_checkpoint_map.json) drives both directions, so
save(load(f)) round-trips byte-identically and checkpoints exported by
other GPT-2 tooling load after the same normalization.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass

import numpy as np

from .. import ops
from .. import tensor as T
from ..checkpoint import load_tensors, save_tensors, take_tensor
from ..errors import InvalidConfig, MissingTensor, SequenceTooLong, ShapeMismatch
from ..lora import LoRAConfig, attach_lora
from ..nn import Block, Embedding, LayerNorm, Linear, Module, ModuleList
from ..tensor import DTYPE, Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    max_seq_len: int = 1024
    tie_embeddings: bool = True

    def validate(self) -> None:
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, field) < 1:
                raise InvalidConfig(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def param_count(self) -> int:
        d, v, p, n = self.d_model, self.vocab_size, self.max_seq_len, self.n_layers
        per_block = 4 * (d * d + d) + 2 * 2 * d + (4 * d * d + 4 * d) + (4 * d * d + d)
        total = v * d + p * d + n * per_block + 2 * d
        if not self.tie_embeddings:
            total += v * d
        return total


GPT2_SMALL = ModelConfig(vocab_size=50257, d_model=768, n_layers=12, n_heads=12)
GPT2_MEDIUM = ModelConfig(vocab_size=50257, d_model=1024, n_layers=24, n_heads=16)


class GPT2Model(Module):
    """Token + position embeddings, pre-norm blocks, final norm, LM head.

    With tie_embeddings the output head reuses the token embedding matrix,
    which is both the GPT-2 convention and a large parameter saving.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.tok_emb = Embedding(config.vocab_size, config.d_model)
        self.pos_emb = Embedding(config.max_seq_len, config.d_model)
        self.blocks = ModuleList(
            Block(config.d_model, config.n_heads, config.max_seq_len)
            for _ in range(config.n_layers)
        )
        self.ln_f = LayerNorm(config.d_model)
        if not config.tie_embeddings:
            self.lm_head = Linear(config.d_model, config.vocab_size, bias=False)

    def forward(self, ids: np.ndarray, cache=None) -> Tensor:
        ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
        if ids.ndim != 2:
            raise ShapeMismatch(f"ids must be [batch, seq], got shape {ids.shape}")
        past = 0 if cache is None else cache.position
        seq = ids.shape[1]
        if past + seq > self.config.max_seq_len:
            raise SequenceTooLong(
                f"sequence of {past + seq} exceeds max {self.config.max_seq_len}"
            )
        pos = np.arange(past, past + seq)
        x = ops.add(self.tok_emb(ids), self.pos_emb(pos))
        for block in self.blocks:
            x = block(x, cache=cache)
        x = self.ln_f(x)
        if self.config.tie_embeddings:
            T.touch((self.tok_emb.weight,))
            return ops.linear(x, self.tok_emb.weight)
        return self.lm_head(x)

    def loss(self, ids: np.ndarray, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
        return ops.cross_entropy(self.forward(ids), targets, ignore_index)


# ---------------------------------------------------------------------------
# Checkpoint layout mapping
# ---------------------------------------------------------------------------


def _load_map() -> dict:
    ref = importlib.resources.files("leantuner") / "assets" / "gpt2_checkpoint_map.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def _iter_rules(config: ModelConfig):
    """Expand per-layer templates into concrete (disk, engine, transform)."""
    table = _load_map()
    for rule in table["rules"]:
        if rule.get("when") == "untied" and config.tie_embeddings:
            continue
        if rule.get("per_layer"):
            for layer in range(config.n_layers):
                yield (
                    rule["disk"].format(layer=layer),
                    [e.format(layer=layer) for e in rule["engine"]],
                    rule["transform"],
                )
        else:
            yield rule["disk"], list(rule["engine"]), rule["transform"]


def _to_disk(transform: str, arrays: list) -> np.ndarray:
    if transform == "copy":
        return arrays[0]
    if transform == "transpose":
        return np.ascontiguousarray(arrays[0].T)
    if transform == "split3_transpose":
        return np.ascontiguousarray(np.concatenate([a.T for a in arrays], axis=1))
    if transform == "split3":
        return np.concatenate(arrays)
    raise InvalidConfig(f"unknown checkpoint transform {transform!r}")


def _disk_shape(transform: str, engine_shapes: list) -> tuple:
    if transform == "copy":
        return tuple(engine_shapes[0])
    if transform == "transpose":
        out, inn = engine_shapes[0]
        return (inn, out)
    if transform == "split3_transpose":
        out, inn = engine_shapes[0]
        return (inn, len(engine_shapes) * out)
    if transform == "split3":
        return (sum(s[0] for s in engine_shapes),)
    raise InvalidConfig(f"unknown checkpoint transform {transform!r}")


def _from_disk(transform: str, arr: np.ndarray, n_parts: int) -> list:
    if transform == "copy":
        return [arr]
    if transform == "transpose":
        return [np.ascontiguousarray(arr.T)]
    if transform == "split3_transpose":
        cols = arr.shape[1] // n_parts
        return [
            np.ascontiguousarray(arr[:, i * cols : (i + 1) * cols].T)
            for i in range(n_parts)
        ]
    if transform == "split3":
        size = arr.shape[0] // n_parts
        return [arr[i * size : (i + 1) * size].copy() for i in range(n_parts)]
    raise InvalidConfig(f"unknown checkpoint transform {transform!r}")


def _config_metadata(config: ModelConfig) -> dict:
    return {
        "format": "gpt2-layout-v1",
        "vocab_size": config.vocab_size,
        "d_model": config.d_model,
        "n_layers": config.n_layers,
        "n_heads": config.n_heads,
        "max_seq_len": config.max_seq_len,
        "tie_embeddings": "true" if config.tie_embeddings else "false",
    }


def config_from_metadata(meta: dict) -> ModelConfig:
    try:
        return ModelConfig(
            vocab_size=int(meta["vocab_size"]),
            d_model=int(meta["d_model"]),
            n_layers=int(meta["n_layers"]),
            n_heads=int(meta["n_heads"]),
            max_seq_len=int(meta["max_seq_len"]),
            tie_embeddings=meta.get("tie_embeddings", "true") == "true",
        )
    except KeyError as e:
        raise InvalidConfig(f"checkpoint metadata lacks model dimensions ({e})") from None


def save_checkpoint(model: GPT2Model, path) -> None:
    params = dict(model.named_parameters())
    disk = {}
    for disk_name, engine_names, transform in _iter_rules(model.config):
        arrays = [params[n].data for n in engine_names]
        disk[disk_name] = _to_disk(transform, arrays)
    save_tensors(path, disk, _config_metadata(model.config))


def load_checkpoint(model: GPT2Model, path) -> None:
    """Populate model parameters from a GPT-2 layout checkpoint.

    Tensors the mapping does not mention (mask buffers and similar) are
    ignored; tensors the model needs but the file lacks raise MissingTensor
    naming the offender, and stored shapes must match exactly.
    """
    tensors, _ = load_tensors(path)
    params = dict(model.named_parameters())
    for disk_name, engine_names, transform in _iter_rules(model.config):
        expected = _disk_shape(transform, [params[n].shape for n in engine_names])
        arr = take_tensor(tensors, disk_name, expected, path)
        for engine_name, new in zip(
            engine_names, _from_disk(transform, arr, len(engine_names))
        ):
            p = params[engine_name]
            p.data = np.ascontiguousarray(new, dtype=DTYPE)


def model_from_checkpoint(path, config: ModelConfig | None = None) -> GPT2Model:
    """Build a model sized from checkpoint metadata (or config) and load it."""
    _, meta = load_tensors(path)
    if config is None:
        config = config_from_metadata(meta)
    model = GPT2Model(config)
    load_checkpoint(model, path)
    return model


# ---------------------------------------------------------------------------
# Adapter checkpoints
# ---------------------------------------------------------------------------


def save_adapters(model: Module, path, config: LoRAConfig) -> None:
    tensors = {
        name: p.data
        for name, p in model.named_parameters()
        if name.endswith(("lora_a", "lora_b"))
    }
    if not tensors:
        raise MissingTensor("model has no adapter parameters to save")
    meta = {
        "format": "lora-adapter-v1",
        "r": config.r,
        "alpha": config.alpha,
        "dropout": config.dropout,
        "targets": ",".join(config.targets),
    }
    save_tensors(path, tensors, meta)


def load_adapters(model: Module, path) -> LoRAConfig:
    """Attach adapters per the file's recorded config and load their values."""
    tensors, meta = load_tensors(path)
    config = LoRAConfig(
        r=int(meta.get("r", "8")),
        alpha=float(meta.get("alpha", "32")),
        dropout=float(meta.get("dropout", "0.0")),
        targets=tuple(t for t in meta.get("targets", "").split(",") if t)
        or LoRAConfig().targets,
    )
    already = any(n.endswith("lora_a") for n, _ in model.named_parameters())
    if not already:
        attach_lora(model, config)
    params = dict(model.named_parameters())
    adapter_names = [n for n in params if n.endswith(("lora_a", "lora_b"))]
    for name in adapter_names:
        arr = take_tensor(tensors, name, params[name].shape, path)
        params[name].data = np.ascontiguousarray(arr, dtype=DTYPE)
    return config

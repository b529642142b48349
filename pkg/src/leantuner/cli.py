"""Command-line interface: finetune, eval, generate.

Settings resolve in three layers: built-in defaults, then a key=value
config file (--config), then explicit flags. The fully resolved settings
are echoed to the output directory as resolved_config.txt, in the same
key=value format, so re-running with that file reproduces the run (and in
deterministic mode reproduces the metrics file byte for byte).

Exit status is 0 only when every artifact was fully written; on failure
the diagnostic names the stage that died, e.g. [finetune:data].
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import TokenDataset, load_mcq, split_tokens
from .energy import (
    FileProbe,
    FixedSource,
    PowerModel,
    SimulatedBattery,
    ThrottleController,
    ThrottlePolicy,
)
from .errors import EmptyDataset, EngineError, InvalidConfig
from .lora import LoRAConfig, attach_lora
from .memory import ByteBudget, SegmentCount, build_manifest
from .models import (
    GPT2Model,
    ModelConfig,
    generate,
    load_adapters,
    load_tokenizer,
    model_from_checkpoint,
    save_adapters,
    save_checkpoint,
)
from .train import MetricsRecord, MetricsSink, TrainConfig, evaluate_mcq, evaluate_ppl, train_model

# key: (type, default, help). Types: int, float, str, bool.
_COMMON_MODEL_KEYS = {
    "init_checkpoint": (str, None, "checkpoint to start from"),
    "vocab_size": (int, None, "vocabulary size (default: tokenizer's)"),
    "d_model": (int, 768, "model width"),
    "n_layers": (int, 12, "transformer blocks"),
    "n_heads": (int, 12, "attention heads"),
    "max_seq_len": (int, 1024, "context window"),
    "tie_embeddings": (bool, True, "tie output head to token embeddings"),
}

_SPEC = {
    "finetune": {
        "data": (str, None, "training text file"),
        "out": (str, None, "output directory"),
        "tokenizer": (str, "byte", "'byte' or a vocab/merges directory"),
        "mode": (str, "full", "'full' or 'lora'"),
        "steps": (int, 200, "macro optimizer steps"),
        "batch_size": (int, 8, "sequences per macro batch"),
        "micro_batch_size": (int, None, "sequences per micro batch"),
        "grad_accum": (int, None, "micro batches per macro batch"),
        "seq_len": (int, 128, "tokens per training window"),
        "lr": (float, 1e-5, "learning rate"),
        "weight_decay": (float, 0.01, "decoupled weight decay"),
        "seed": (int, 0, "RNG seed"),
        "deterministic": (bool, False, "replayable runs; volatile metrics nulled"),
        "eval_every": (int, 0, "held-out eval cadence (0: final step only)"),
        **_COMMON_MODEL_KEYS,
        "lora_r": (int, 8, "adapter rank"),
        "lora_alpha": (float, 32.0, "adapter scaling numerator"),
        "lora_dropout": (float, 0.1, "adapter-path dropout"),
        "lora_targets": (str, "q_proj,v_proj", "comma-separated projection names"),
        "shard_segments": (int, None, "enable sharding with this segment count"),
        "shard_budget_mb": (float, None, "enable sharding with this resident budget"),
        "spill_dir": (str, None, "segment spill directory (or $LEANTUNER_SPILL_DIR)"),
        "throttle_k": (int, 1, "battery check cadence in steps"),
        "throttle_mu": (float, 60.0, "battery percent threshold"),
        "throttle_rho": (float, 0.5, "frequency reduction when throttled"),
        "battery_file": (str, None, "battery percent file to probe"),
        "battery_fixed": (float, None, "fixed battery percent source"),
        "sim_battery": (str, None, "simulated battery 'init:active_drain:idle_drain'"),
        "active_watts": (float, None, "power model: compute draw"),
        "idle_watts": (float, 0.0, "power model: sleep draw"),
    },
    "eval": {
        "model": (str, None, "model checkpoint"),
        "adapter": (str, None, "adapter checkpoint to attach"),
        "data": (str, None, "held-out text file for loss/perplexity"),
        "mcq": (str, None, "multiple-choice JSONL for accuracy"),
        "tokenizer": (str, "byte", "'byte' or a vocab/merges directory"),
        "seq_len": (int, 128, "tokens per eval window"),
        "batch_size": (int, 8, "eval batch size"),
        "out": (str, None, "optional output directory for metrics"),
    },
    "generate": {
        "model": (str, None, "model checkpoint"),
        "adapter": (str, None, "adapter checkpoint to attach"),
        "tokenizer": (str, "byte", "'byte' or a vocab/merges directory"),
        "prompt": (str, None, "prompt text"),
        "max_new_tokens": (int, 50, "tokens to append"),
        "greedy_no_cache": (bool, False, "recompute instead of KV cache"),
    },
}

_REQUIRED = {
    "finetune": ("data", "out"),
    "eval": ("model",),
    "generate": ("model", "prompt"),
}


class _Failure(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _read_config_file(path, spec: dict) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in spec:
                raise InvalidConfig(f"{path}:{lineno}: unknown key {key!r}")
            typ = spec[key][0]
            try:
                values[key] = _parse_bool(raw) if typ is bool else typ(raw)
            except ValueError as e:
                raise InvalidConfig(f"{path}:{lineno}: {e}") from None
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leantuner", description="LLM fine-tuning for small machines"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in _SPEC.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key=value settings file")
        for key, (typ, _default, help_text) in spec.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                group = p.add_mutually_exclusive_group()
                group.add_argument(
                    flag, dest=key, action="store_const", const=True, help=help_text
                )
                group.add_argument(
                    "--no-" + key.replace("_", "-"),
                    dest=key,
                    action="store_const",
                    const=False,
                )
                p.set_defaults(**{key: None})
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=help_text)
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    spec = _SPEC[command]
    resolved = {key: default for key, (_t, default, _h) in spec.items()}
    if args.config:
        try:
            resolved.update(_read_config_file(args.config, spec))
        except OSError as e:
            raise _Failure("config", str(e)) from None
        except InvalidConfig as e:
            raise _Failure("config", str(e)) from None
    for key in spec:
        given = getattr(args, key)
        if given is not None:
            resolved[key] = given
    for key in _REQUIRED[command]:
        if resolved.get(key) in (None, ""):
            raise _Failure("config", f"--{key.replace('_', '-')} is required")
    return resolved


def _echo_resolved(command: str, resolved: dict, out_dir: Path) -> None:
    lines = [f"# leantuner {command}: resolved settings"]
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_model(cfg: dict, stage: str, tokenizer) -> GPT2Model:
    try:
        if cfg.get("init_checkpoint"):
            return model_from_checkpoint(cfg["init_checkpoint"])
        vocab = cfg.get("vocab_size") or tokenizer.vocab_size
        config = ModelConfig(
            vocab_size=vocab,
            d_model=cfg["d_model"],
            n_layers=cfg["n_layers"],
            n_heads=cfg["n_heads"],
            max_seq_len=cfg["max_seq_len"],
            tie_embeddings=cfg["tie_embeddings"],
        )
        return GPT2Model(config)
    except (OSError, EngineError) as e:
        raise _Failure(stage, str(e)) from None


def _cmd_finetune(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg["grad_accum"]:
        if cfg["batch_size"] % cfg["grad_accum"] != 0:
            raise _Failure(
                "config",
                f"grad_accum {cfg['grad_accum']} does not divide"
                f" batch_size {cfg['batch_size']}",
            )
        micro = cfg["batch_size"] // cfg["grad_accum"]
        if cfg["micro_batch_size"] not in (None, micro):
            raise _Failure(
                "config",
                "micro_batch_size and grad_accum disagree; set only one",
            )
        cfg["micro_batch_size"] = micro
    cfg["grad_accum"] = None
    _echo_resolved("finetune", cfg, out_dir)

    try:
        tokenizer = load_tokenizer(cfg["tokenizer"])
    except (OSError, EngineError) as e:
        raise _Failure("tokenizer", str(e)) from None

    try:
        text = Path(cfg["data"]).read_text(encoding="utf-8")
        ids = np.asarray(tokenizer.encode(text), dtype=np.int64)
        train_ids, test_ids = split_tokens(ids, 0.9)
        train_ds = TokenDataset(train_ids, cfg["seq_len"])
        try:
            test_ds = TokenDataset(test_ids, cfg["seq_len"])
        except EmptyDataset:
            print("held-out split too small for a window; skipping eval", file=sys.stderr)
            test_ds = None
    except (OSError, EngineError) as e:
        raise _Failure("data", str(e)) from None

    T.set_seed(cfg["seed"])
    T.set_deterministic(cfg["deterministic"])
    model = _load_model(cfg, "model", tokenizer)

    lora_cfg = None
    if cfg["mode"] == "lora":
        lora_cfg = LoRAConfig(
            r=cfg["lora_r"],
            alpha=cfg["lora_alpha"],
            dropout=cfg["lora_dropout"],
            targets=tuple(t.strip() for t in cfg["lora_targets"].split(",") if t.strip()),
        )
        try:
            attach_lora(model, lora_cfg)
        except EngineError as e:
            raise _Failure("model", str(e)) from None

    manifest = None
    if cfg["shard_segments"] or cfg["shard_budget_mb"]:
        policy = (
            SegmentCount(cfg["shard_segments"])
            if cfg["shard_segments"]
            else ByteBudget(int(cfg["shard_budget_mb"] * 1024 * 1024))
        )
        try:
            manifest = build_manifest(model, policy, spill_dir=cfg["spill_dir"])
        except EngineError as e:
            raise _Failure("shard", str(e)) from None

    throttle = None
    if cfg["battery_file"] or cfg["battery_fixed"] is not None or cfg["sim_battery"]:
        if cfg["sim_battery"]:
            try:
                init, active, idle = (float(x) for x in cfg["sim_battery"].split(":"))
            except ValueError:
                raise _Failure(
                    "config", "sim_battery must be 'init:active_drain:idle_drain'"
                ) from None
            source = SimulatedBattery(init, active, idle)
        elif cfg["battery_file"]:
            source = FileProbe(cfg["battery_file"])
        else:
            source = FixedSource(cfg["battery_fixed"])
        policy = ThrottlePolicy(
            check_every=cfg["throttle_k"],
            threshold_percent=cfg["throttle_mu"],
            reduction=cfg["throttle_rho"],
        )
        try:
            throttle = ThrottleController(policy, source)
        except EngineError as e:
            raise _Failure("config", str(e)) from None

    power_model = None
    if cfg["active_watts"] is not None:
        power_model = PowerModel(cfg["active_watts"], cfg["idle_watts"])

    train_cfg = TrainConfig(
        steps=cfg["steps"],
        mode=cfg["mode"],
        batch_size=cfg["batch_size"],
        micro_batch_size=cfg["micro_batch_size"],
        seq_len=cfg["seq_len"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        deterministic=cfg["deterministic"],
        eval_every=cfg["eval_every"],
    )
    try:
        with MetricsSink(
            out_dir / "metrics.jsonl", redact_volatile=cfg["deterministic"]
        ) as sink:
            train_model(
                model,
                train_cfg,
                train_ds,
                test_ds,
                sink=sink,
                manifest=manifest,
                throttle=throttle,
                power_model=power_model,
            )
    except EngineError as e:
        raise _Failure("train", str(e)) from None
    finally:
        if manifest is not None:
            manifest.close()

    try:
        if cfg["mode"] == "lora":
            save_adapters(model, out_dir / "adapter.safetensors", lora_cfg)
        else:
            save_checkpoint(model, out_dir / "model.safetensors")
    except (OSError, EngineError) as e:
        raise _Failure("save", str(e)) from None
    return 0


def _cmd_eval(cfg: dict) -> int:
    if not cfg["data"] and not cfg["mcq"]:
        raise _Failure("config", "need --data and/or --mcq to evaluate")
    try:
        tokenizer = load_tokenizer(cfg["tokenizer"])
    except (OSError, EngineError) as e:
        raise _Failure("tokenizer", str(e)) from None
    try:
        model = model_from_checkpoint(cfg["model"])
        if cfg["adapter"]:
            load_adapters(model, cfg["adapter"])
    except (OSError, EngineError) as e:
        raise _Failure("model", str(e)) from None

    test_loss = ppl = accuracy = None
    try:
        if cfg["data"]:
            text = Path(cfg["data"]).read_text(encoding="utf-8")
            ids = np.asarray(tokenizer.encode(text), dtype=np.int64)
            ds = TokenDataset(ids, cfg["seq_len"])
            test_loss, ppl = evaluate_ppl(model, ds, cfg["batch_size"])
        if cfg["mcq"]:
            items = load_mcq(cfg["mcq"])
            accuracy = evaluate_mcq(model, items, tokenizer)
    except (OSError, EngineError) as e:
        raise _Failure("eval", str(e)) from None

    result = {"test_loss": test_loss, "ppl": ppl, "accuracy": accuracy}
    print(json.dumps(result))
    if cfg["out"]:
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        _echo_resolved("eval", cfg, out_dir)
        with MetricsSink(out_dir / "metrics.jsonl") as sink:
            sink.write(
                MetricsRecord(step=0, test_loss=test_loss, ppl=ppl, accuracy=accuracy)
            )
    return 0


def _cmd_generate(cfg: dict) -> int:
    try:
        tokenizer = load_tokenizer(cfg["tokenizer"])
    except (OSError, EngineError) as e:
        raise _Failure("tokenizer", str(e)) from None
    try:
        model = model_from_checkpoint(cfg["model"])
        if cfg["adapter"]:
            load_adapters(model, cfg["adapter"])
    except (OSError, EngineError) as e:
        raise _Failure("model", str(e)) from None
    prompt_ids = tokenizer.encode(cfg["prompt"])
    if not prompt_ids:
        raise _Failure("config", "prompt encodes to zero tokens")
    try:
        out_ids = generate(
            model,
            prompt_ids,
            cfg["max_new_tokens"],
            use_cache=not cfg["greedy_no_cache"],
        )
    except EngineError as e:
        raise _Failure("generate", str(e)) from None
    print(tokenizer.decode(out_ids))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    command = args.command
    try:
        cfg = _resolve(command, args)
        if command == "finetune":
            return _cmd_finetune(cfg)
        if command == "eval":
            return _cmd_eval(cfg)
        return _cmd_generate(cfg)
    except _Failure as e:
        print(f"error [{command}:{e.stage}] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Training loop, evaluation, and metrics emission.

One macro step is: drop gradients, run the macro batch as one or more
micro batches whose losses are scaled by their share of the batch (so the
accumulated gradient equals the full-batch gradient), take exactly one
optimizer step, then let the throttle controller insert its delay. The
reported train loss is the sum of the scaled micro losses, which is the
macro-batch mean loss regardless of the accumulation factor.
"""

from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .data import TokenDataset
from .energy import apply_throttle, estimate_power
from .errors import InvalidConfig
from .memory import ShardRuntime, probe_rss
from .optim import AdamW, trainable_params

METRIC_KEYS = (
    "step",
    "train_loss",
    "test_loss",
    "ppl",
    "accuracy",
    "rss_bytes",
    "power",
    "wall_ms",
)

# Fields that record host measurements rather than functions of the seed.
VOLATILE_KEYS = ("rss_bytes", "power", "wall_ms")


@dataclass
class TrainConfig:
    steps: int
    mode: str = "full"
    batch_size: int = 8
    micro_batch_size: int | None = None
    seq_len: int = 128
    lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = False
    eval_every: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        micro = self.micro_batch_size
        if micro is not None:
            if micro < 1 or micro > self.batch_size:
                raise InvalidConfig(
                    f"micro_batch_size {micro} outside 1..{self.batch_size}"
                )
            if self.batch_size % micro != 0:
                raise InvalidConfig(
                    f"batch_size {self.batch_size} not divisible by"
                    f" micro_batch_size {micro}"
                )
        if self.mode not in ("full", "lora"):
            raise InvalidConfig(f"mode must be 'full' or 'lora', got {self.mode!r}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be > 0, got {self.lr}")

    @property
    def accumulation_steps(self) -> int:
        micro = self.micro_batch_size or self.batch_size
        return self.batch_size // micro


@dataclass
class MetricsRecord:
    step: int
    train_loss: float | None = None
    test_loss: float | None = None
    ppl: float | None = None
    accuracy: float | None = None
    rss_bytes: int | None = None
    power: float | None = None
    wall_ms: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}


class MetricsSink:
    """JSONL writer, one flushed line per record; absent values are null.

    With redact_volatile, host measurements (rss, power, wall time) are
    written as null so that runs with identical resolved configs produce
    byte-identical files.
    """

    def __init__(self, path, redact_volatile: bool = False):
        self.path = path
        self.redact_volatile = redact_volatile
        self._f = open(path, "w", encoding="utf-8")

    def write(self, record: MetricsRecord) -> None:
        doc = record.to_dict()
        if self.redact_volatile:
            for key in VOLATILE_KEYS:
                doc[key] = None
        self._f.write(json.dumps(doc) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def read_metrics(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def train_model(
    model,
    config: TrainConfig,
    train_ds: TokenDataset,
    test_ds: TokenDataset | None = None,
    *,
    sink: MetricsSink | None = None,
    manifest=None,
    throttle=None,
    power_model=None,
) -> list:
    """Run config.steps macro steps; returns the per-step MetricsRecords.

    Optional collaborators: a shard manifest (parameters demand-paged from
    disk for the whole run), a throttle controller (sleep injection), and a
    power model (per-step energy estimates in the records).
    """
    config.validate()
    T.set_deterministic(config.deterministic)
    named = trainable_params(model, config.mode)
    optimizer = AdamW(
        named,
        lr=config.lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    params = [p for _, p in named]
    micro = config.micro_batch_size or config.batch_size
    accum = config.accumulation_steps
    batches = train_ds.batch_iter(config.batch_size, config.seed)
    records = []

    runtime = ShardRuntime(model, manifest) if manifest is not None else contextlib.nullcontext()
    model.train()
    with runtime:
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            T.zero_grad(params)
            x, y = next(batches)
            train_loss = 0.0
            for j in range(accum):
                xs = x[j * micro : (j + 1) * micro]
                ys = y[j * micro : (j + 1) * micro]
                loss = model.loss(xs, ys)
                if accum > 1:
                    loss = ops.scale(loss, micro / config.batch_size)
                T.backward(loss)
                train_loss += loss.item()
            optimizer.step()
            compute_seconds = time.perf_counter() - t0

            delay = 0.0
            if throttle is not None:
                if hasattr(throttle.source, "advance"):
                    throttle.source.advance(compute_seconds, 0.0)
                throttle.record_step_time(compute_seconds)
                delay = throttle.check(step)
                apply_throttle(delay)
                if hasattr(throttle.source, "advance"):
                    throttle.source.advance(0.0, delay)

            test_loss = ppl = None
            if test_ds is not None and (
                step == config.steps
                or (config.eval_every and step % config.eval_every == 0)
            ):
                test_loss, ppl = evaluate_ppl(model, test_ds)
                model.train()

            record = MetricsRecord(
                step=step,
                train_loss=train_loss,
                test_loss=test_loss,
                ppl=ppl,
                rss_bytes=probe_rss(),
                power=(
                    estimate_power(compute_seconds, delay, power_model)
                    if power_model is not None
                    else None
                ),
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
            records.append(record)
            if sink is not None:
                sink.write(record)
    return records


def evaluate_ppl(model, dataset: TokenDataset, batch_size: int = 8) -> tuple:
    """Mean token NLL over every window, and its exponential.

    The perplexity is exp() of the returned loss by construction, applied
    to the identical float.
    """
    was_training = model.training
    model.eval()
    total = 0.0
    count = 0
    try:
        with T.no_grad():
            for start in range(0, len(dataset), batch_size):
                idx = range(start, min(start + batch_size, len(dataset)))
                x, y = dataset.batch(idx)
                loss = model.loss(x, y)
                tokens = y.size
                total += loss.item() * tokens
                count += tokens
    finally:
        model.train(was_training)
    mean = total / count
    return mean, math.exp(mean)


def _option_logprob(model, prompt_ids: list, option_ids: list) -> float:
    """Mean per-token log likelihood of the option continuation."""
    seq = np.asarray(prompt_ids + option_ids, dtype=np.int64)
    max_len = model.config.max_seq_len
    if len(seq) > max_len:
        seq = seq[-max_len:]
    logits = model.forward(seq[None, :-1]).data[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    n = len(option_ids)
    rows = np.arange(len(seq) - 1 - n, len(seq) - 1)
    return float(np.mean(logp[rows, seq[-n:]]))


def evaluate_mcq(model, items, tokenizer) -> float:
    """Accuracy of likelihood-ranked options; ties go to the first option.

    Each option is scored as a continuation of the question (with a space
    between) by its mean per-token log likelihood, and the argmax option is
    the prediction. No text is generated or parsed.
    """
    was_training = model.training
    model.eval()
    correct = 0
    try:
        with T.no_grad():
            for item in items:
                prompt = tokenizer.encode(item.question)
                scores = [
                    _option_logprob(model, prompt, tokenizer.encode(" " + opt))
                    for opt in item.options
                ]
                if int(np.argmax(scores)) == item.answer:
                    correct += 1
    finally:
        model.train(was_training)
    return correct / len(items)


def first_step_below(records, threshold: float) -> int | None:
    """Earliest macro step whose train loss dips under threshold."""
    for r in records:
        loss = r.train_loss if isinstance(r, MetricsRecord) else r.get("train_loss")
        step = r.step if isinstance(r, MetricsRecord) else r.get("step")
        if loss is not None and loss < threshold:
            return step
    return None

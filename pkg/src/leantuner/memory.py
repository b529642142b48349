"""Contiguous-segment parameter sharding with disk offload.

The manifest partitions the model's parameters, in definition order, into
disjoint covering segments. Parameters of one leaf layer always share a
segment (an op only ever touches one layer's parameters at a time, so a
single segment is the working set). While a ShardRuntime is active the
parameters live on disk and segments are paged in on demand through the
tensor access hook: forward touches from the layers themselves, backward
touches from the tape walker, optimizer touches per parameter. Eviction is
least-recently-used; gradients of offloaded trainable parameters are
persisted next to their segment and restored with it.

Offload and reload move raw little-endian float32 bytes, so a round-trip
is bit-identical and a sharded pass computes exactly the unsharded loss.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import psutil

from . import tensor as T
from .errors import BudgetTooSmall, InvalidConfig
from .tensor import DTYPE, Tensor

SPILL_DIR_ENV = "LEANTUNER_SPILL_DIR"


@dataclass
class SegmentCount:
    """Partition into roughly this many equal-byte segments."""

    count: int


@dataclass
class ByteBudget:
    """Cap resident parameter bytes at this budget."""

    limit: int


class Segment:
    __slots__ = (
        "index",
        "names",
        "tensors",
        "shapes",
        "nbytes",
        "state",
        "path",
        "grad_path",
        "grad_names",
        "tick",
    )

    def __init__(self, index: int, names, tensors, spill_dir: Path):
        self.index = index
        self.names = list(names)
        self.tensors = list(tensors)
        self.shapes = [t.shape for t in tensors]
        self.nbytes = sum(t.nbytes for t in tensors)
        self.state = "memory"
        self.path = spill_dir / f"segment_{index:04d}.bin"
        self.grad_path = spill_dir / f"segment_{index:04d}.grad.bin"
        self.grad_names = None
        self.tick = 0


class ShardManifest:
    def __init__(self, segments, budget_bytes: int, spill_dir: Path, owns_dir: bool):
        self.segments = segments
        self.budget_bytes = budget_bytes
        self.spill_dir = spill_dir
        self._owns_dir = owns_dir
        self._clock = 0
        self.resident_bytes = sum(s.nbytes for s in segments)
        self.peak_resident_bytes = self.resident_bytes
        self.total_bytes = self.resident_bytes
        for seg in segments:
            for t in seg.tensors:
                t.shard_segment = seg
        self._write_sidecar()

    # -- construction ---------------------------------------------------------

    @classmethod
    def build(cls, model, policy, spill_dir=None, strict: bool = False):
        """Greedy fill of leaf-layer parameter groups, in model order."""
        groups = []
        for mod_name, mod in model.named_modules():
            prefix = mod_name + "." if mod_name else ""
            direct = [(prefix + n, p) for n, p in mod._params.items()]
            if direct:
                groups.append(direct)
        if not groups:
            raise InvalidConfig("model has no parameters to shard")
        total = sum(p.nbytes for g in groups for _, p in g)

        if isinstance(policy, SegmentCount):
            if policy.count < 1:
                raise InvalidConfig(f"segment count must be >= 1, got {policy.count}")
            target = math.ceil(total / policy.count)
        elif isinstance(policy, ByteBudget):
            if policy.limit < 1:
                raise InvalidConfig(f"byte budget must be >= 1, got {policy.limit}")
            target = policy.limit
        else:
            raise InvalidConfig(f"unknown shard policy {policy!r}")

        if spill_dir is None:
            spill_dir = os.environ.get(SPILL_DIR_ENV)
        owns_dir = spill_dir is None
        spill_dir = Path(
            tempfile.mkdtemp(prefix="leantuner-spill-") if owns_dir else spill_dir
        )
        spill_dir.mkdir(parents=True, exist_ok=True)

        segments = []
        cur_names: list = []
        cur_tensors: list = []
        cur_bytes = 0

        def flush():
            nonlocal cur_names, cur_tensors, cur_bytes
            if cur_tensors:
                segments.append(Segment(len(segments), cur_names, cur_tensors, spill_dir))
                cur_names, cur_tensors, cur_bytes = [], [], 0

        for group in groups:
            gbytes = sum(p.nbytes for _, p in group)
            if gbytes > target:
                if strict:
                    raise BudgetTooSmall(
                        f"layer group {group[0][0]} needs {gbytes} bytes,"
                        f" over the {target}-byte segment target"
                    )
                warnings.warn(
                    f"layer group {group[0][0]} ({gbytes} bytes) exceeds the"
                    f" segment target ({target} bytes); it gets its own segment",
                    stacklevel=2,
                )
                flush()
                cur_names = [n for n, _ in group]
                cur_tensors = [p for _, p in group]
                flush()
                continue
            if cur_bytes + gbytes > target:
                flush()
            cur_names.extend(n for n, _ in group)
            cur_tensors.extend(p for _, p in group)
            cur_bytes += gbytes
        flush()

        if isinstance(policy, SegmentCount):
            budget = max(seg.nbytes for seg in segments)
        else:
            budget = policy.limit
        return cls(segments, budget, spill_dir, owns_dir)

    def _write_sidecar(self) -> None:
        doc = {
            "version": 1,
            "budget_bytes": self.budget_bytes,
            "total_bytes": self.total_bytes,
            "segments": [
                {
                    "index": seg.index,
                    "file": seg.path.name,
                    "nbytes": seg.nbytes,
                    "tensors": [
                        {"name": n, "shape": list(s)}
                        for n, s in zip(seg.names, seg.shapes)
                    ],
                }
                for seg in self.segments
            ],
        }
        with open(self.spill_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)

    # -- residency ------------------------------------------------------------

    def _touch_clock(self, seg: Segment) -> None:
        self._clock += 1
        seg.tick = self._clock

    def release(self, seg: Segment) -> None:
        """Persist the segment (and any grads) to disk and free its buffers."""
        if seg.state != "memory":
            return
        with open(seg.path, "wb") as f:
            for t in seg.tensors:
                f.write(t.data.tobytes())
            f.flush()
            os.fsync(f.fileno())
        grad_names = [n for n, t in zip(seg.names, seg.tensors) if t.grad is not None]
        if grad_names:
            with open(seg.grad_path, "wb") as f:
                for n, t in zip(seg.names, seg.tensors):
                    if t.grad is not None:
                        f.write(t.grad.tobytes())
                f.flush()
                os.fsync(f.fileno())
        seg.grad_names = grad_names or None
        for t in seg.tensors:
            t.data = None
            t.grad = None
        seg.state = "disk"
        self.resident_bytes -= seg.nbytes

    def _load(self, seg: Segment, count_peak: bool = True) -> None:
        raw = seg.path.read_bytes()
        offset = 0
        for t, shape in zip(seg.tensors, seg.shapes):
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = n * 4
            t.data = (
                np.frombuffer(raw[offset : offset + nbytes], dtype=DTYPE)
                .reshape(shape)
                .copy()
            )
            offset += nbytes
        if seg.grad_names:
            graw = seg.grad_path.read_bytes()
            offset = 0
            with_grad = set(seg.grad_names)
            for name, t in zip(seg.names, seg.tensors):
                if name in with_grad:
                    nbytes = t.data.nbytes
                    t.grad = (
                        np.frombuffer(graw[offset : offset + nbytes], dtype=DTYPE)
                        .reshape(t.data.shape)
                        .copy()
                    )
                    offset += nbytes
            seg.grad_names = None
        seg.state = "memory"
        self.resident_bytes += seg.nbytes
        if count_peak and self.resident_bytes > self.peak_resident_bytes:
            self.peak_resident_bytes = self.resident_bytes

    def acquire(self, seg: Segment, required=frozenset()) -> None:
        """Make the segment resident, evicting LRU segments to fit the budget.

        Acquiring a segment that is already resident only refreshes its LRU
        stamp; it never double-counts. Eviction skips segments in required
        (the set the current operation needs simultaneously).
        """
        if seg.state == "memory":
            self._touch_clock(seg)
            return
        candidates = sorted(
            (
                s
                for s in self.segments
                if s.state == "memory" and s is not seg and s not in required
            ),
            key=lambda s: s.tick,
        )
        for victim in candidates:
            if self.resident_bytes + seg.nbytes <= self.budget_bytes:
                break
            self.release(victim)
        if self.resident_bytes + seg.nbytes > self.budget_bytes:
            warnings.warn(
                f"segment {seg.index} ({seg.nbytes} bytes) does not fit the"
                f" {self.budget_bytes}-byte budget; loading it anyway",
                stacklevel=2,
            )
        self._load(seg)
        self._touch_clock(seg)

    def ensure(self, tensors, mode: str = "use") -> None:
        """Access-hook entry point: page in (or forget grads of) segments."""
        needed = []
        for t in tensors:
            seg = getattr(t, "shard_segment", None)
            if seg is not None and seg not in needed:
                needed.append(seg)
        if mode == "clear_grad":
            for seg in needed:
                seg.grad_names = None
            return
        required = set(needed)
        for seg in needed:
            self.acquire(seg, required=required)

    def offload_all(self) -> None:
        for seg in self.segments:
            self.release(seg)

    def restore_all(self) -> None:
        """Bring everything back resident.

        Budget and peak tracking are deliberately ignored: this is the exit
        path back to normal (unsharded) execution, not part of the paged
        run whose footprint the peak is measuring.
        """
        for seg in self.segments:
            if seg.state != "memory":
                self._load(seg, count_peak=False)

    def reset_peak(self) -> None:
        self.peak_resident_bytes = self.resident_bytes

    def close(self) -> None:
        """Restore parameters and delete this manifest's spill files."""
        self.restore_all()
        for seg in self.segments:
            for t in seg.tensors:
                t.shard_segment = None
            seg.path.unlink(missing_ok=True)
            seg.grad_path.unlink(missing_ok=True)
        (self.spill_dir / "manifest.json").unlink(missing_ok=True)
        if self._owns_dir:
            try:
                self.spill_dir.rmdir()
            except OSError:
                pass


def build_manifest(model, policy, spill_dir=None, strict: bool = False) -> ShardManifest:
    return ShardManifest.build(model, policy, spill_dir=spill_dir, strict=strict)


class ShardRuntime:
    """Context manager that puts a model into demand-paged execution.

    On entry every segment is offloaded and the access hook is installed;
    on exit parameters (with their gradients) are restored resident and the
    hook removed. Only one runtime can be active per process, because the
    tape and the hook are process-global.
    """

    def __init__(self, model, manifest: ShardManifest):
        self.model = model
        self.manifest = manifest

    def __enter__(self):
        if T._param_access_hook is not None:
            raise InvalidConfig("a shard runtime is already active in this process")
        T.set_param_access_hook(self._hook)
        self.manifest.offload_all()
        self.manifest.reset_peak()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest.restore_all()
        T.set_param_access_hook(None)
        return False

    def _hook(self, tensors, mode):
        self.manifest.ensure(tensors, mode)


def sharded_pass(model, manifest: ShardManifest, ids, targets, compute_grads: bool = True):
    """One forward (and optionally backward) pass under demand paging.

    Returns the scalar loss. Gradients, when computed, end up on the
    trainable parameters exactly as in the unsharded case.
    """
    with ShardRuntime(model, manifest):
        if compute_grads:
            loss = model.loss(ids, targets)
            T.backward(loss)
        else:
            with T.no_grad():
                loss = model.loss(ids, targets)
        return loss.item()


def probe_rss() -> int:
    """Resident set size of this process in bytes, from the OS."""
    return int(psutil.Process().memory_info().rss)


def probe_allocator() -> int:
    """Bytes held by live tensor buffers, from the engine's own tracking."""
    return T.allocator_estimate()

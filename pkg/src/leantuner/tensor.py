"""Tensor values, the gradient tape, and reverse-mode differentiation.

The engine computes in float32 throughout. A Tensor owns a contiguous
row-major numpy buffer, an optional gradient buffer of the same shape, and
an optional handle to the tape node that produced it. Operations (see
leantuner.ops) run their forward kernel eagerly and, when gradients are
enabled and at least one input requires them, append one node to the
process-global tape. backward() replays that tape in strict reverse
insertion order, which is a valid topological order because the tape is
append-only while the graph is built.

Gradients accumulate: backward() adds into existing .grad buffers and never
overwrites them. Calling backward twice on two losses therefore leaves the
sum of both gradients in .grad, which is exactly the contract micro-batch
gradient accumulation relies on. backward() consumes the nodes it traversed
so the activations saved for one micro-batch are released before the next
one runs; zero_grad() additionally drops gradients and clears the tape.
"""

from __future__ import annotations

import contextlib
import weakref

import numpy as np

from .errors import NonFiniteValue, NoTape, NotScalar

DTYPE = np.float32
INT_DTYPE = np.int64

# ---------------------------------------------------------------------------
# Engine-global switches and counters
# ---------------------------------------------------------------------------

_grad_enabled = True
_debug_validation = False
_deterministic = False
_rng = np.random.default_rng(0)

# Sum of bytes held by live Tensor data and grad buffers. An estimate from
# the allocator's point of view: aliasing views count once per owner.
_live_bytes = {"value": 0}

# Installed by the shard runtime while a sharded pass is active. Receives an
# iterable of Tensors about to be read or written so offloaded parameter
# buffers can be made resident first.
_param_access_hook = None


def set_seed(seed: int) -> None:
    """Reseed the engine RNG used for initialization and dropout."""
    global _rng
    _rng = np.random.default_rng(seed)


def get_rng() -> np.random.Generator:
    return _rng


def set_deterministic(flag: bool) -> None:
    """In deterministic mode dropout is disabled and runs are replayable."""
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


def set_debug_validation(flag: bool) -> None:
    """Enable NaN/Inf screening of every op output (debug builds and tests)."""
    global _debug_validation
    _debug_validation = bool(flag)


def check_finite(op: str, arr: np.ndarray) -> None:
    if _debug_validation and not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite value in output of {op}")


def allocator_estimate() -> int:
    """Bytes currently held by live tensor data and grad buffers."""
    return _live_bytes["value"]


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_param_access_hook(hook) -> None:
    """Install (or clear, with None) the resident-parameter hook."""
    global _param_access_hook
    _param_access_hook = hook


def touch(tensors, mode: str = "use") -> None:
    """Notify the shard runtime about these tensors.

    mode "use": values (and grads) are about to be read or written, so
    offloaded segments must be paged in first. mode "clear_grad": grads are
    being dropped; offloaded gradient state must be discarded without
    paging anything in.
    """
    if _param_access_hook is not None:
        _param_access_hook(tensors, mode)


def _release_tracked(cell) -> None:
    _live_bytes["value"] -= cell["bytes"]
    cell["bytes"] = 0


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A float32 n-dimensional value, optionally differentiable.

    Invariants:
      * data is contiguous, row-major, float32 (or None while offloaded)
      * grad, when present, has exactly data's shape and dtype
      * requires_grad False implies node is None
    """

    def __init__(self, data, requires_grad: bool = False):
        self._cell = {"bytes": 0}
        weakref.finalize(self, _release_tracked, self._cell)
        self._data = None
        self._grad = None
        # np.ascontiguousarray would promote 0-d scalars to shape (1,).
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None
        # Set by the shard manifest for parameters it manages.
        self.shard_segment = None

    # -- tracked buffer properties ------------------------------------------

    @property
    def data(self):
        return self._data

    @data.setter
    def data(self, arr):
        delta = (arr.nbytes if arr is not None else 0) - (
            self._data.nbytes if self._data is not None else 0
        )
        self._cell["bytes"] += delta
        _live_bytes["value"] += delta
        self._data = arr

    @property
    def grad(self):
        return self._grad

    @grad.setter
    def grad(self, arr):
        delta = (arr.nbytes if arr is not None else 0) - (
            self._grad.nbytes if self._grad is not None else 0
        )
        self._cell["bytes"] += delta
        _live_bytes["value"] += delta
        self._grad = arr

    # -- shape and value access ----------------------------------------------

    @property
    def shape(self) -> tuple:
        return tuple(self._data.shape)

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def nbytes(self) -> int:
        return int(self._data.nbytes) if self._data is not None else 0

    def item(self) -> float:
        if self._data.size != 1:
            raise NotScalar(f"item() needs a single value, got shape {self.shape}")
        return float(self._data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self._data

    def detach(self) -> "Tensor":
        return Tensor(self._data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add into the grad buffer, allocating it on first use."""
        if self._grad is None:
            self.grad = np.zeros_like(self._data)
        np.add(self._grad, g.astype(DTYPE, copy=False), out=self._grad)

    def __repr__(self) -> str:
        flags = "grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, {flags})"

    # -- operator sugar (delegates to leantuner.ops) --------------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, ops.as_tensor(other))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, ops.as_tensor(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, ops.as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, shape: tuple):
        from . import ops

        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule.

    backward_fn(g) returns per-input gradient arrays aligned with inputs
    (None for inputs that do not require gradients). Rules read live values
    through the input/output Tensor handles rather than private copies where
    possible, so parameters that were offloaded to disk and reloaded are
    still seen correctly.
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    def __init__(self):
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


TAPE = Tape()


def record(op: str, inputs, output: Tensor, backward_fn) -> Tensor:
    """Mark output differentiable and append a node if recording is on."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        node = TapeNode(op, tuple(inputs), output, backward_fn)
        output.node = node
        TAPE.nodes.append(node)
    return output


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into .grad for every reachable tensor.

    Traverses the tape in strict reverse insertion order, accumulating into
    .grad (never overwriting, so gradients from successive backward calls
    sum). The traversed prefix of the tape is consumed afterwards, releasing
    the values ops saved for their backward rules.
    """
    if loss.size != 1:
        raise NotScalar(f"backward() needs a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise NoTape("backward() on a tensor that is not on the tape")

    # Per-call upstream gradients keyed by output tensor identity (all the
    # tensors involved are kept alive by the tape nodes themselves for the
    # duration of the walk). Seeding only the loss means nodes from
    # unrelated subgraphs are skipped with no effect.
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    seen_loss = False
    for node in reversed(TAPE.nodes):
        if node is loss.node:
            seen_loss = True
        g_out = pending.pop(id(node.output), None)
        if g_out is None:
            continue
        touch(node.inputs)
        node.output.accumulate_grad(g_out)
        grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is None:
                # Leaf (parameter or explicit input): materialize now.
                inp.accumulate_grad(g)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + g
            else:
                pending[id(inp)] = g

    if not seen_loss:
        raise NoTape("loss is no longer on the tape (already consumed?)")
    TAPE.clear()


def zero_grad(params) -> None:
    """Drop gradients for params and reset the tape."""
    params = list(params)
    touch(params, mode="clear_grad")
    for p in params:
        p.grad = None
    TAPE.clear()

"""Dense tensor engine with eager reverse-mode autodiff.

Everything in this package is built on the small op set defined here: dense
row-major float tensors, a tape that records operations as they execute, a
seeded RNG with stream splitting, Xavier-style initialization, and integer
quantized arithmetic.

Float32 is the working precision. Float64 exists solely so gradient checks
and oracle comparisons can be run in a tighter regime; any op whose inputs
include a float64 tensor produces float64.

Tensors are immutable after construction (the backing array is flagged
read-only). Tapes and RNGs are single-owner mutable state.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked out; no distribution exists."""


class TapeError(RuntimeError):
    """Backward was asked to do something the tape contract forbids."""


class AccumulatorOverflowError(OverflowError):
    """A quantized product could exceed the integer accumulator range."""


_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_values(values, dtype=None) -> np.ndarray:
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense row-major array of floats, optionally linked into a tape.

    ``trainable`` marks a leaf whose gradient should be collected by
    ``backward``. ``tape`` is set on tensors produced by recorded ops.
    """

    __slots__ = ("values", "trainable", "tape")

    def __init__(self, values, dtype=None, trainable: bool = False):
        arr = _as_values(values, dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        arr.flags.writeable = False
        self.values = arr
        self.trainable = trainable
        self.tape: Optional["Tape"] = None

    # -- metadata ----------------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.values)

    def tolist(self):
        return self.values.tolist()

    def astype(self, dtype) -> "Tensor":
        """Precision change for setup/verification code; not recorded."""
        return Tensor(self.values.astype(dtype), trainable=self.trainable)

    def detach(self) -> "Tensor":
        """Same values, no tape linkage, not trainable."""
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype.name})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def cumsum(self, axis):
        return cumsum(self, axis)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def eye(n, dtype=np.float32) -> Tensor:
    return Tensor(np.eye(n, dtype=dtype))


def assign_(t: Tensor, values) -> Tensor:
    """Overwrite a parameter's storage in place, keeping its identity.

    Optimizer updates and checkpoint loading go through here so that
    shared-parameter groups and optimizer state stay attached to the
    same tensor object. Shape and dtype must match exactly.
    """
    new = np.asarray(values, dtype=t.values.dtype)
    if new.shape != t.values.shape:
        raise ShapeError(f"assign shape {new.shape} != {t.values.shape}")
    t.values.flags.writeable = True
    try:
        np.copyto(t.values, new)
    finally:
        t.values.flags.writeable = False
    return t


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    out_id: int
    out: Tensor  # strong ref keeps out_id unique for the tape's lifetime
    inputs: tuple
    grad_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Eagerly built record of differentiable operations.

    Use as a context manager; ops executed while the tape is active are
    recorded whenever an input is trainable or was itself produced on this
    tape. Records are appended in execution order, so topological order
    holds by construction.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _participates(t, tape: Tape) -> bool:
    return isinstance(t, Tensor) and (t.trainable or t.tape is tape)


def _emit(out: Tensor, inputs: tuple, grad_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(_participates(t, tape) for t in inputs):
        out.tape = tape
        tape.records.append(_Record(id(out), out, inputs, grad_fn))
    return out


class GradTable:
    """Gradients keyed by the tensor object they belong to."""

    def __init__(self, grads: dict):
        self._grads = grads  # id(tensor) -> Tensor

    def __getitem__(self, t: Tensor) -> Tensor:
        try:
            return self._grads[id(t)]
        except KeyError:
            raise KeyError("no gradient recorded for this tensor") from None

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self):
        return len(self._grads)


def backward(loss: Tensor) -> GradTable:
    """Reverse sweep from a scalar loss over its tape.

    Returns gradients for every trainable leaf (and tape-born tensor) that
    the loss depends on. Shared parameters accumulate one summed gradient.
    """
    if not isinstance(loss, Tensor) or loss.values.ndim != 0:
        raise TapeError("backward expects a scalar (0-d) loss tensor")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not attached to a tape")

    acc: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g_out = acc.pop(rec.out_id, None)
        if g_out is None:
            continue
        holders.pop(rec.out_id, None)
        grads_in = rec.grad_fn(g_out)
        for t, g in zip(rec.inputs, grads_in):
            if g is None or not _participates(t, tape):
                continue
            k = id(t)
            if k in acc:
                acc[k] = acc[k] + g
            else:
                acc[k] = g
            holders[k] = t

    table = {k: Tensor(g, dtype=holders[k].dtype) for k, g in acc.items()}
    return GradTable(table)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.values + b.values)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.values - b.values)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    av, bv = a.values, b.values
    out = Tensor(av * bv)

    def grad_fn(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _emit(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    av, bv = a.values, b.values
    out = Tensor(av / bv)

    def grad_fn(g):
        ga = _unbroadcast(g / bv, a.shape)
        gb = _unbroadcast(-g * av / (bv * bv), b.shape)
        return ga, gb

    return _emit(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.values)
    return _emit(out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    ov = np.exp(a.values)
    out = Tensor(ov)
    return _emit(out, (a,), lambda g: (g * ov,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise ValueError("log requires strictly positive inputs")
    av = a.values
    out = Tensor(np.log(av))
    return _emit(out, (a,), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0):
        raise ValueError("sqrt requires non-negative inputs")
    ov = np.sqrt(a.values)
    out = Tensor(ov)
    return _emit(out, (a,), lambda g: (g * (0.5 / ov),))


def power(a: Tensor, p) -> Tensor:
    """a**p for a constant exponent p."""
    p = float(p)
    av = a.values
    out = Tensor(av ** p)
    return _emit(out, (a,), lambda g: (g * (p * av ** (p - 1.0)),))


def relu(a: Tensor) -> Tensor:
    av = a.values
    out = Tensor(np.maximum(av, 0))
    return _emit(out, (a,), lambda g: (g * (av > 0),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    av = a.values
    ov = np.where(av > 0, av, alpha * np.expm1(av)).astype(av.dtype)
    out = Tensor(ov)

    def grad_fn(g):
        return (g * np.where(av > 0, 1.0, alpha * np.exp(av)).astype(av.dtype),)

    return _emit(out, (a,), grad_fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _coerce_pair(a, b)
    av, bv = a.values, b.values
    out = Tensor(np.maximum(av, bv))

    def grad_fn(g):
        take_a = av >= bv
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _emit(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# Shape and indexing ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = Tensor(a.values.reshape(shape))
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Matrix transpose (swap the last two axes) unless axes is given."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 axes")
        out = Tensor(np.swapaxes(a.values, -1, -2))
        return _emit(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.values, axes))
    return _emit(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, tuple(tensors), grad_fn)


def take(a: Tensor, key) -> Tensor:
    """Indexing/slicing; integer-array keys gather rows (used for lookups)."""
    out = Tensor(a.values[key])
    shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit(out, (a,), grad_fn)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Row lookup a[idx] for an integer index array of any shape."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows needs integer indices")
    return take(a, idx)


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = Tensor(np.cumsum(a.values, axis=axis))

    def grad_fn(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return _emit(out, (a,), grad_fn)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(a.dtype, copy=False),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=False),)

    return _emit(out, (a,), grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


_matmul_route = None


@contextmanager
def matmul_routing(fn):
    """Let fn intercept matmul calls while the context is open.

    fn(a, b) may return a replacement Tensor or None to fall through to
    the ordinary float product. Alternate arithmetic (e.g. integer
    quantization) hooks in here without touching the call sites.
    """
    global _matmul_route
    if _matmul_route is not None:
        raise RuntimeError("matmul routing is already active")
    _matmul_route = fn
    try:
        yield
    finally:
        _matmul_route = None


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (batched) operands follow numpy semantics."""
    a, b = _coerce_pair(a, b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands need at least 2 axes")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"inner extents differ: {av.shape} @ {bv.shape}")
    if _matmul_route is not None:
        routed = _matmul_route(a, b)
        if routed is not None:
            return routed
    out = Tensor(np.matmul(av, bv))

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), grad_fn)


def softmax_rows(x: Tensor, additive_mask: Optional[Tensor] = None) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by row-max subtraction.

    ``additive_mask`` entries must be finite or -inf; -inf forces the output
    entry to exactly 0. A row with every entry masked has no distribution
    and raises DegenerateRowError. The gradient flows to both the logits and
    any finite mask entries (additive priors may be learnable).
    """
    mask_t: Optional[Tensor] = None
    if additive_mask is not None:
        mask_t = additive_mask if isinstance(additive_mask, Tensor) else Tensor(
            np.asarray(additive_mask, dtype=x.dtype))
        mv = mask_t.values
        if np.any(np.isnan(mv)) or np.any(np.isposinf(mv)):
            raise ValueError("mask entries must be finite or -inf")
        logits = x.values + mv
    else:
        logits = x.values

    if logits.shape[-1] == 0:
        raise DegenerateRowError("softmax over zero-width rows")
    row_max = np.max(logits, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise DegenerateRowError("softmax row with every entry masked")
    shifted = logits - row_max
    e = np.exp(shifted)  # exp(-inf) == 0 exactly
    denom = e.sum(axis=-1, keepdims=True)
    y = e / denom
    out = Tensor(y.astype(x.dtype, copy=False))

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        gl = ((g - dot) * y).astype(x.dtype, copy=False)
        gx = _unbroadcast(gl, x.shape)
        if mask_t is None:
            return (gx,)
        return gx, _unbroadcast(gl, mask_t.shape)

    inputs = (x,) if mask_t is None else (x, mask_t)
    return _emit(out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Seeded random stream with deterministic splitting.

    Same seed + same call sequence gives a bit-identical stream. ``split``
    derives an independent child stream; the spawn counter makes repeated
    splits distinct.
    """

    def __init__(self, seed: int, _seq: Optional[np.random.SeedSequence] = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self) -> "Rng":
        child = self._seq.spawn(1)[0]
        return Rng(self.seed, _seq=child)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = self._gen.random(shape)
        return low + (high - low) * u

    def gaussian(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller transform over the uniform stream."""
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = self._gen.random(half)
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], log is safe
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def xavier_init(d_in: int, d_out: int, gain: float = 1.0,
                dist: str = "uniform", rng: Optional[Rng] = None,
                dtype=np.float32) -> Tensor:
    """Fan-balanced init: eta = gain*sqrt(6/(d_in+d_out)).

    uniform draws from [-eta, eta]; gaussian draws with variance eta^2.
    """
    if d_in < 1 or d_out < 1:
        raise ValueError("xavier_init needs d_in, d_out >= 1")
    if gain <= 0:
        raise ValueError("xavier_init needs gain > 0")
    if rng is None:
        raise ValueError("xavier_init needs an explicit rng")
    eta = gain * np.sqrt(6.0 / (d_in + d_out))
    if dist == "uniform":
        vals = rng.uniform((d_in, d_out), -eta, eta)
    elif dist == "gaussian":
        vals = rng.gaussian((d_in, d_out), std=eta)
    else:
        raise ValueError(f"unknown init dist: {dist!r}")
    return Tensor(vals.astype(dtype), trainable=True)


def depth_scaled_gain(a: float, depth: int, exponent: float) -> float:
    """Gain grown with total depth: a * depth**exponent."""
    return a * depth ** exponent


def layer_position_gain(a: float, layer_index: int, exponent: float) -> float:
    """Gain shrunk with layer position: a / layer_index**exponent."""
    return a / layer_index ** exponent


# ---------------------------------------------------------------------------
# Quantized arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantSpec:
    """Uniform quantizer: step size s and integer width p bits."""

    step: float
    bits: int

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("quantization step must be positive")
        if self.bits < 2:
            raise ValueError("quantizer needs at least 2 bits")

    @property
    def q_min(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def q_max(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass
class QuantStats:
    """Counts how often the quantizer had to saturate."""

    count: int = 0
    saturated: int = 0


def quantize(x, spec: QuantSpec, stats: Optional[QuantStats] = None):
    """Round x/s to the nearest integer (ties to even), saturating to range."""
    arr = np.asarray(x, dtype=np.float64)
    r = np.round(arr / spec.step)
    out_of_range = (r < spec.q_min) | (r > spec.q_max)
    r = np.clip(r, spec.q_min, spec.q_max).astype(np.int64)
    if stats is not None:
        stats.count += arr.size
        stats.saturated += int(np.count_nonzero(out_of_range))
    if np.isscalar(x) or arr.ndim == 0:
        return int(r)
    return r


def dequantize(r, spec: QuantSpec):
    """Map integers back to floats: s * r."""
    arr = np.asarray(r, dtype=np.float64)
    out = spec.step * arr
    if np.isscalar(r) or arr.ndim == 0:
        return float(out)
    return out


def quantized_matmul(a: Tensor, b: Tensor, spec_a: QuantSpec, spec_b: QuantSpec,
                     stats_a: Optional[QuantStats] = None,
                     stats_b: Optional[QuantStats] = None) -> Tensor:
    """Integer-accumulated product of quantized operands, then dequantized.

    The accumulator is 64-bit; before multiplying, the worst-case magnitude
    k * 2^(p_a-1) * 2^(p_b-1) is checked against the accumulator range and
    an AccumulatorOverflowError is raised if it could wrap.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("quantized_matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    k = a.shape[1]
    worst = k * (1 << (spec_a.bits - 1)) * (1 << (spec_b.bits - 1))
    if worst > np.iinfo(np.int64).max:
        raise AccumulatorOverflowError(
            f"k={k} at {spec_a.bits}+{spec_b.bits} bits can overflow the accumulator")
    qa = quantize(a.values, spec_a, stats_a)
    qb = quantize(b.values, spec_b, stats_b)
    acc = qa @ qb  # exact in int64 given the guard above
    out = (spec_a.step * spec_b.step) * acc.astype(np.float64)
    dtype = np.result_type(a.dtype, b.dtype)
    return Tensor(out.astype(dtype))

"""Dense float64 tensors with tape-based reverse-mode differentiation, Adam, and named RNG streams.

The autodiff here is deliberately small: it supports exactly the primitives the
score network, the phoneme classifier, the duration predictor and the speaker
encoder are built from. A :class:`Tape` records every primitive applied to a
watched tensor; :meth:`Tape.gradient` walks the record once in reverse.

Example
-------
>>> tape = Tape()
>>> with tape:
...     x = tape.watch(np.array([1.0, 2.0]))
...     y = (x * x).sum()
>>> tape.gradient(y, [x])[0]
array([2., 4.])
"""
from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "DivergenceError",
    "grad",
    "value_and_grad",
    "AdamState",
    "adam_step",
    "Rng",
    "randn",
    "as_tensor",
    "concat",
    "pad_time",
    "log_softmax",
    "transpose",
    "gather_last",
    "global_norm",
    "silu",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
]


class TapeError(RuntimeError):
    """Raised when a gradient request is malformed (non-scalar target, unwatched source)."""


class DivergenceError(FloatingPointError):
    """Raised when a non-finite value reaches an optimizer or loss."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may be tracked by a tape.

    Arithmetic on tensors tracked by the active tape is recorded; everything else
    is evaluated eagerly with no bookkeeping.
    """

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.tape is None else f", tracked#{self.index}"
        return f"Tensor(shape={self.shape}{tracked})"

    # arithmetic
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(as_tensor(other)))

    def __rsub__(self, other):
        return _add(as_tensor(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, _reciprocal(other))
        return _mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return _mul(as_tensor(other), _reciprocal(self))

    def __matmul__(self, other):
        return _matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return _matmul(as_tensor(other), self)

    def __pow__(self, p: float):
        return _power(self, float(p))

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: int
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitive operations on watched tensors.

    Nodes are appended in evaluation order, which is already a topological order,
    so the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.shapes: list[tuple[int, ...]] = []
        self.last_visits = 0

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def watch(self, value) -> Tensor:
        data = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        self.shapes.append(data.shape)
        return Tensor(data, self, len(self.shapes) - 1)

    def _record(self, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
        self.shapes.append(data.shape)
        out = len(self.shapes) - 1
        self.nodes.append(_Node(out, tuple(p.index if p.tape is self else -1 for p in parents), vjp))
        return Tensor(data, self, out)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.data.size != 1:
            raise TapeError(f"gradient target must be scalar, got shape {target.shape}")
        for s in sources:
            if not isinstance(s, Tensor) or s.tape is not self:
                raise TapeError("gradient source is not watched on this tape")
        adj: dict[int, np.ndarray] = {}
        if target.tape is self:
            adj[target.index] = np.ones_like(target.data)
        visits = 0
        for node in reversed(self.nodes):
            visits += 1
            g = adj.pop(node.out, None)
            if g is None:
                continue
            for pidx, pg in zip(node.parents, node.vjp(g)):
                if pidx < 0 or pg is None:
                    continue
                if pidx in adj:
                    adj[pidx] = adj[pidx] + pg
                else:
                    adj[pidx] = pg
        self.last_visits = visits
        return [adj.get(s.index, np.zeros(self.shapes[s.index])) for s in sources]


def _tracked(*xs: Tensor) -> "Tape | None":
    tape = _active_tape()
    if tape is None:
        return None
    for x in xs:
        if x.tape is tape:
            return tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    need_a, need_b = a.tape is tape, b.tape is tape
    return tape._record(
        out, (a, b), lambda g: (_unbroadcast(g, sa) if need_a else None, _unbroadcast(g, sb) if need_b else None)
    )


def _neg(a: Tensor) -> Tensor:
    tape = _tracked(a)
    if tape is None:
        return Tensor(-a.data)
    return tape._record(-a.data, (a,), lambda g: (-g,))


def _mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data
    need_a, need_b = a.tape is tape, b.tape is tape
    return tape._record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        ),
    )


def _reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (-g * out * out,))


def _power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    ad = a.data
    return tape._record(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    # a: (..., n, k), b: (k, m) -- batched left operand only
    if b.ndim != 2:
        raise ValueError("right matmul operand must be 2-D")
    out = a.data @ b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data
    need_a, need_b = a.tape is tape, b.tape is tape

    def vjp(g):
        ga = g @ bd.T if need_a else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need_b else None
        return ga, gb

    return tape._record(out, (a, b), vjp)


def _unary(a: Tensor, out: np.ndarray, dfdx: Callable[[], np.ndarray]) -> Tensor:
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (g * dfdx(),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, lambda: 1.0 - out * out)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _unary(a, out, lambda: (a.data > 0).astype(np.float64))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig
    return _unary(a, out, lambda: sig * (1.0 + a.data * (1.0 - sig)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda: out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, lambda: 0.5 / out)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return tape._record(np.asarray(out), (a,), vjp)


def _reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    old = a.shape
    return tape._record(out, (a,), lambda g: (g.reshape(old),))


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return tape._record(np.array(out), (a,), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    out = np.concatenate([t.data for t in ts], axis=axis)
    tape = _tracked(*ts)
    if tape is None:
        return Tensor(out)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return tape._record(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def pad_time(a, before: int, after: int, axis: int = -2) -> Tensor:
    """Zero-pad one axis; used to build kernel-3 temporal convolutions from shifts."""
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    n = a.shape[axis]

    def vjp(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)

    return tape._record(out, (a,), vjp)


def transpose(a) -> Tensor:
    """Transpose of a 2-D tensor."""
    a = as_tensor(a)
    out = a.data.T.copy()
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    return tape._record(out, (a,), lambda g: (g.T,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    p = np.exp(out)
    return tape._record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def gather_last(a, idx: np.ndarray) -> Tensor:
    """Pick ``a[..., idx[...]]`` along the last axis (label lookup for log-likelihoods)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return tape._record(out, (a,), vjp)


def global_norm(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data))
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    ad = a.data
    return tape._record(np.asarray(out), (a,), lambda g: (g * ad / out,))


def value_and_grad(fn: Callable[..., Tensor]) -> Callable[..., tuple[float, list[np.ndarray]]]:
    """Wrap ``fn(*tensors) -> scalar Tensor`` so it returns ``(value, grads)`` for every argument."""

    def wrapped(*arrays):
        tape = Tape()
        with tape:
            xs = [tape.watch(a) for a in arrays]
            y = as_tensor(fn(*xs))
        return float(y.data), tape.gradient(y, xs)

    return wrapped


def grad(fn: Callable[..., Tensor], *arrays) -> list[np.ndarray]:
    """Gradients of scalar ``fn`` with respect to each positional array."""
    return value_and_grad(fn)(*arrays)[1]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated.

    Parameters without a gradient entry are carried over unchanged.
    """
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r}; step rejected")
    step = state.step + 1
    new = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, dict(state.m), dict(state.v))
    b1, b2 = new.beta1, new.beta2
    c1 = 1.0 - b1**step
    sc2 = np.sqrt(1.0 - b2**step)
    out = dict(params)
    for name, g in grads.items():
        m = new.m.get(name)
        v = new.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        new.m[name], new.v[name] = m, v
        denom = np.sqrt(v)
        denom /= sc2
        denom += new.eps
        out[name] = params[name] - (new.lr / c1) * m / denom
    return out, new


class Rng:
    """Seeded source of independent, named Philox streams.

    ``Rng(7).stream("noise", 3)`` always yields the same generator, and no other
    name path shares its key, so adding a consumer never perturbs another one.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)

    def stream(self, *names) -> np.random.Generator:
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for n in names:
            words.append(zlib.crc32(str(n).encode()) if not isinstance(n, (int, np.integer)) else int(n) & 0xFFFFFFFF)
            words.append(len(str(n)))
        key = np.random.SeedSequence(words).generate_state(2, np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *names) -> "Rng":
        return Rng(int(self.stream("__child__", *names).integers(0, 2**63)))


def randn(shape, gen: np.random.Generator) -> np.ndarray:
    return gen.standard_normal(shape)


def checksum(params: dict[str, np.ndarray]) -> int:
    """CRC32 over names and little-endian payloads, in sorted name order."""
    crc = 0
    for name in sorted(params):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(params[name], dtype="<f8").tobytes(), crc)
    return crc


def watch_all(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tape.watch(v) for k, v in params.items()}


def constants(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def iter_names(params: dict, prefix: str) -> Iterable[str]:
    return (k for k in params if k.startswith(prefix))

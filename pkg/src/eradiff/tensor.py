"""Dense float tensors with tape-recorded reverse-mode differentiation.

Storage is a row-major numpy array (float32 or float64).  Primitives applied
inside a ``with Tape():`` block are recorded in execution order;
``backward(loss)`` replays the tape in exact reverse order and accumulates
gradients into every ``requires_grad`` leaf.  There is no broadcasting beyond
scalar*tensor, no views, no graph rewriting: each primitive is a plain
function with an explicit backward rule, and every rule is checked against
central finite differences in the test suite.

Tensors are immutable once created except for gradient accumulation; the one
sanctioned exception is the optimizer, which updates parameter storage in
place between forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Primitive inputs with incompatible shapes."""


class GradientError(RuntimeError):
    """Invalid backward request (non-scalar loss, nothing recorded, NaN grads)."""


class Tensor:
    """N-dimensional float array with optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_recorded", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._recorded = False
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        """Explicit NaN/Inf check; values are never silently sanitized."""
        if not self.is_finite():
            raise FloatingPointError(f"{context}: non-finite values present")
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


@dataclass
class TapeEntry:
    """One recorded primitive: enough to replay its backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitives; backward replays it in reverse."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def op_names(self) -> list[str]:
        return [e.op for e in self.entries]


_ACTIVE: list[Tape] = []


def _record(op, inputs, out, backward_fn):
    if _ACTIVE and any(i.requires_grad or i._recorded for i in inputs):
        tape = _ACTIVE[-1]
        out._recorded = True
        out._tape = tape
        tape.entries.append(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf with d(loss)/d(leaf).

    Repeated calls without ``zero_grad`` accumulate.  The loss must be a
    scalar produced through recorded primitives.
    """
    if loss.shape != ():
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._recorded or loss._tape is None:
        raise GradientError("loss was not produced inside an active Tape")
    tape = loss._tape
    flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for entry in reversed(tape.entries):
        grad_out = flowing.pop(id(entry.output), None)
        if grad_out is None:
            continue
        input_grads = entry.backward(grad_out)
        for inp, g in zip(entry.inputs, input_grads):
            if g is None:
                continue
            if inp.requires_grad:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            if inp._recorded and inp._tape is tape:
                key = id(inp)
                flowing[key] = g if key not in flowing else flowing[key] + g


def _check_same_dtype(op: str, tensors: Sequence[Tensor]) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape} must match")
    out = Tensor(a.data + b.data)
    return _record("add", (a, b), out, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape} must match")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), out, lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    k = float(factor)
    out = Tensor(x.data * x.dtype.type(k))
    return _record("scale", (x,), out, lambda g: (g * x.dtype.type(k),))


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    _check_same_dtype("matmul", (a, b))
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-d operands, got {a.shape} and {b.shape}")
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape}{'^T' if transpose_a else ''} @ "
            f"{b.shape}{'^T' if transpose_b else ''}"
        )
    out = Tensor(am @ bm)

    def bwd(g):
        ga = g @ bm.T
        gb = am.T @ g
        if transpose_a:
            ga = ga.T
        if transpose_b:
            gb = gb.T
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d: needs a 2-d tensor, got {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))
    return _record("transpose2d", (x,), out, lambda g: (np.ascontiguousarray(g.T),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map: (N, K) @ (K, M) + bias (M,)."""
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype("linear", inputs)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data[None, :]
    out = Tensor(y)
    xd, wd = x.data, w.data

    def bwd(g):
        gx = g @ wd.T
        gw = xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record("linear", inputs, out, bwd)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-d convolution on a single (C, H, W) sample, kernels (Cout, Cin, kh, kw)."""
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype("conv2d", inputs)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} must be (C,H,W), weight {w.shape} (Cout,Cin,kh,kw)")
    cin, h, wd_ = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} must be ({cout},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wd_ + 2 * pad - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {x.shape} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((cin, kh, kw, hout, wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * hout : stride, j : j + stride * wout : stride]
    cols2 = cols.reshape(cin * kh * kw, hout * wout)
    wmat = w.data.reshape(cout, cin * kh * kw)
    y = wmat @ cols2
    if b is not None:
        y = y + b.data[:, None]
    out = Tensor(y.reshape(cout, hout, wout))

    def bwd(g):
        gmat = g.reshape(cout, hout * wout)
        gw = (gmat @ cols2.T).reshape(w.shape)
        gcols = (wmat.T @ gmat).reshape(cin, kh, kw, hout, wout)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * hout : stride, j : j + stride * wout : stride] += gcols[:, i, j]
        gx = gxp[:, pad : pad + h, pad : pad + wd_] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return _record("conv2d", inputs, out, bwd)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)
    xd = x.data
    return _record("silu", (x,), out, lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def group_norm_lite(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a (C, H, W) map with learnable scale/shift."""
    _check_same_dtype("group_norm_lite", (x, gamma, beta))
    if x.data.ndim != 3:
        raise ShapeError(f"group_norm_lite: input must be (C,H,W), got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm_lite: scale/shift must be ({c},), got {gamma.shape}/{beta.shape}")
    n = x.shape[1] * x.shape[2]
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data[:, None, None] * xhat + beta.data[:, None, None])
    gd = gamma.data

    def bwd(g):
        gxhat = g * gd[:, None, None]
        s1 = gxhat.sum(axis=(1, 2), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(1, 2), keepdims=True)
        gx = inv / n * (n * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return _record("group_norm_lite", (x, gamma, beta), out, bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.data.ndim < 1:
        raise ShapeError("softmax_lastdim: needs at least one axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax_lastdim", (x,), out, bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if len(parts) < 2:
        raise ShapeError("concat_channels: needs at least two tensors")
    _check_same_dtype("concat_channels", parts)
    if any(p.data.ndim != 3 for p in parts):
        raise ShapeError(f"concat_channels: all inputs must be (C,H,W), got {[p.shape for p in parts]}")
    hw = {p.shape[1:] for p in parts}
    if len(hw) > 1:
        raise ShapeError(f"concat_channels: spatial shapes differ: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat_channels", parts, out, lambda g: tuple(np.split(g, splits, axis=0)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape).copy())
    in_shape = x.shape
    return _record("reshape", (x,), out, lambda g: (g.reshape(in_shape),))


def slice_(x: Tensor, key: tuple[slice, ...]) -> Tensor:
    if not isinstance(key, tuple) or any(not isinstance(k, slice) for k in key):
        raise ShapeError("slice: key must be a tuple of slices")
    if len(key) > x.data.ndim:
        raise ShapeError(f"slice: {len(key)} slices for {x.data.ndim}-d tensor")
    out = Tensor(x.data[key].copy())
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _record("slice", (x,), out, bwd)


def sum_(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    in_shape, dt = x.shape, x.dtype
    return _record("sum", (x,), out, lambda g: (np.full(in_shape, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    in_shape, dt, n = x.shape, x.dtype, x.size
    return _record("mean", (x,), out, lambda g: (np.full(in_shape, g / n, dtype=dt),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_nearest2x: input must be (C,H,W), got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=1).repeat(2, axis=2))
    c, h, w = x.shape
    return _record(
        "upsample_nearest2x",
        (x,),
        out,
        lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),),
    )


PRIMITIVE_KINDS = (
    "add", "mul", "matmul", "conv2d", "linear", "silu", "group_norm_lite",
    "softmax_lastdim", "concat_channels", "reshape", "slice", "sum", "mean",
    "scale", "transpose2d", "upsample_nearest2x",
)

_DISPATCH = {
    "add": lambda inputs, **p: add(*inputs),
    "mul": lambda inputs, **p: mul(*inputs),
    "matmul": lambda inputs, **p: matmul(*inputs, **p),
    "conv2d": lambda inputs, **p: conv2d(*inputs, **p),
    "linear": lambda inputs, **p: linear(*inputs),
    "silu": lambda inputs, **p: silu(*inputs),
    "group_norm_lite": lambda inputs, **p: group_norm_lite(*inputs, **p),
    "softmax_lastdim": lambda inputs, **p: softmax_lastdim(*inputs),
    "concat_channels": lambda inputs, **p: concat_channels(inputs),
    "reshape": lambda inputs, **p: reshape(*inputs, **p),
    "slice": lambda inputs, **p: slice_(*inputs, **p),
    "sum": lambda inputs, **p: sum_(*inputs),
    "mean": lambda inputs, **p: mean(*inputs),
    "scale": lambda inputs, **p: scale(*inputs, **p),
    "transpose2d": lambda inputs, **p: transpose2d(*inputs),
    "upsample_nearest2x": lambda inputs, **p: upsample_nearest2x(*inputs),
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Uniform dispatch over the primitive set (see PRIMITIVE_KINDS)."""
    if kind not in _DISPATCH:
        raise ValueError(f"unknown primitive kind {kind!r}; valid kinds: {PRIMITIVE_KINDS}")
    return _DISPATCH[kind](tuple(inputs), **params)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _eval_scalar(f, x: Tensor) -> float:
    y = f(x)
    if isinstance(y, Tensor):
        return y.item()
    return float(y)


def finite_difference_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Evaluates f twice at x first; any bitwise mismatch means f is not
    deterministic and the estimate would be meaningless.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    y1, y2 = _eval_scalar(f, x), _eval_scalar(f, x)
    if y1 != y2 and not (np.isnan(y1) and np.isnan(y2)):
        raise GradientError(f"function is not deterministic: {y1!r} != {y2!r}")
    flat = x.data.reshape(-1)
    grad = np.empty_like(flat, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _eval_scalar(f, x)
        flat[i] = orig - h
        down = _eval_scalar(f, x)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return Tensor(grad.reshape(x.shape).astype(x.dtype))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus shared hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step_count=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place.

    Rejects non-finite gradients before touching any parameter or moment.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError("adam_step: non-finite gradient; no parameters were mutated")
    state.step_count += 1
    t = state.step_count
    dt = params[0].dtype.type if params else np.float64
    b1, b2 = dt(state.beta1), dt(state.beta2)
    bc1 = dt(1.0 - state.beta1**t)
    bc2 = dt(1.0 - state.beta2**t)
    lr, eps = dt(state.lr), dt(state.eps)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (dt(1) - b1) * g
        v *= b2
        v += (dt(1) - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

"""Dense tensors with tape-based reverse-mode differentiation.

The model needs matrices, a few scalars, and one rearrangement op, so this
stays deliberately small: no broadcasting beyond row-vector biases, no
views, no GPU. float64 is the default so gradient checks have headroom;
float32 is selectable per tensor for faster training runs.

A :class:`Tape` is a single-threaded unit of work. Activate one with
``with Tape() as tape:``, run the forward pass inside, then call
:func:`backward`. Independent tapes may run on separate threads; tensors
that are not attached to a tape are immutable by convention and safe to
share.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_REL_GUARD = 1e-12  # denominator guard in the relative-error formula


class Tensor:
    """Dense n-d real array, optionally attached to the active tape.

    ``data`` is a C-contiguous float32/float64 ndarray. ``grad`` is filled
    by :func:`backward` (overwritten, not accumulated, on each call) and
    always matches ``data`` in shape. ``node`` points at the tape entry
    that produced this tensor, or None for leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # light operator sugar; the op functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Entry:
    __slots__ = ("op", "inputs", "output", "rule")

    def __init__(self, op: str, inputs: tuple, output: Tensor, rule: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.rule = rule  # rule(g) -> grads aligned with inputs (None = skip)


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_TAPES = _TapeStack()


class Tape:
    """Ordered record of operations; execution order is topological order."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self
        return False

    def record(self, op: str, inputs: tuple, output: Tensor, rule: Callable) -> None:
        entry = _Entry(op, inputs, output, rule)
        self.entries.append(entry)
        output.node = entry


def active_tape() -> Tape | None:
    stack = _TAPES.stack
    return stack[-1] if stack else None


def _finish(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule: Callable) -> Tensor:
    out = Tensor(out_data)
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, tuple(inputs), out, rule)
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns a gradient map covering every requires_grad leaf that appears
    on the tape (zeros for leaves not reachable from the loss) and writes
    the same arrays into each leaf's ``grad`` buffer. Deterministic: the
    accumulation order is fixed by tape order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, contrib in zip(entry.inputs, entry.rule(g)):
            if contrib is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            if acc is None:
                grads[id(inp)] = np.array(contrib, copy=True)
            else:
                acc += contrib
    result: dict[Tensor, np.ndarray] = {}
    for entry in tape.entries:
        for inp in entry.inputs:
            if inp.requires_grad and id(inp) not in produced and inp not in result:
                g = grads.get(id(inp))
                if g is None:
                    g = np.zeros_like(inp.data)
                inp.grad = g
                result[inp] = g
    return result


# ------------------------------------------------------------------- ops

def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_2d(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{op} expects 2-d operands, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def rule(g):
        return (g @ b.data.T, a.data.T @ g)

    return _finish("matmul", (a, b), out, rule)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _finish("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _finish("reshape", (a,), a.data.reshape(shape).copy(), lambda g: (g.reshape(old),))


def _bias_like(b: Tensor, a: Tensor) -> bool:
    # b broadcasts over the rows of a: shape (n,) or (1, n) against (m, n)
    return (
        a.data.ndim == 2
        and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1]))
        and b.shape != a.shape
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))
    if _bias_like(b, a):
        def rule(g):
            return (g, g.sum(axis=0).reshape(b.shape))

        return _finish("add", (a, b), a.data + b.data.reshape(1, -1), rule)
    raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _finish("sub", (a, b), a.data - b.data, lambda g: (g, -g))
    if _bias_like(b, a):
        def rule(g):
            return (g, -g.sum(axis=0).reshape(b.shape))

        return _finish("sub", (a, b), a.data - b.data.reshape(1, -1), rule)
    raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: elementwise shapes disagree: {a.shape} * {b.shape}")
    return _finish("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish("sum_all", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _finish("mean", (a,), np.asarray(a.data.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_sum(a: Tensor) -> Tensor:
    _check_2d("row_sum", a)
    shape = a.shape
    return _finish(
        "row_sum", (a,), a.data.sum(axis=1, keepdims=True), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("concat_rows", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: column counts disagree: {a.shape} vs {b.shape}")
    m = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _finish("concat_rows", (a, b), out, lambda g: (g[:m], g[m:]))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _finish("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation, smooth everywhere
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _finish("gelu", (a,), out, rule)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _finish("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    _check_2d("softmax_rows", a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax_rows: input has non-finite entries")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _finish("softmax_rows", (a,), s, rule)


def logsumexp_rows(a: Tensor) -> Tensor:
    _check_2d("logsumexp_rows", a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    z = e.sum(axis=1, keepdims=True)
    out = m + np.log(z)

    def rule(g):
        return (g * (e / z),)

    return _finish("logsumexp_rows", (a,), out, rule)


def layernorm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check_2d("layernorm_rows", x)
    n = x.shape[1]
    if gain.data.size != n or bias.data.size != n:
        raise ShapeError(f"layernorm_rows: gain/bias size must be {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gvec = gain.data.reshape(1, -1)
    out = xhat * gvec + bias.data.reshape(1, -1)

    def rule(g):
        gg = g * gvec
        gx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        return (gx, (g * xhat).sum(axis=0).reshape(gain.shape), g.sum(axis=0).reshape(bias.shape))

    return _finish("layernorm_rows", (x, gain, bias), out, rule)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit norm; smooth via sqrt(|row|^2 + eps^2)."""
    _check_2d("l2_normalize_rows", x)
    ss = (x.data**2).sum(axis=1, keepdims=True)
    n = np.sqrt(ss + eps * eps)
    y = x.data / n

    def rule(g):
        return (g / n - y * (y * g).sum(axis=1, keepdims=True) / n,)

    return _finish("l2_normalize_rows", (x,), y, rule)


def binary_cross_entropy(p: Tensor, targets) -> Tensor:
    """Mean BCE of probabilities ``p`` against 0/1 ``targets``.

    ``p`` entries are clamped to [1e-12, 1 - 1e-12] before the logs; the
    gradient uses the clamped values.
    """
    y = np.asarray(targets, dtype=p.data.dtype).reshape(p.shape)
    eps = 1e-12
    pc = np.clip(p.data, eps, 1.0 - eps)
    k = p.data.size
    out = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()

    def rule(g):
        return (g * (pc - y) / (pc * (1.0 - pc)) / k,)

    return _finish("binary_cross_entropy", (p,), np.asarray(out), rule)


# ------------------------------------------------------------ init helpers

def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value: float, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


# -------------------------------------------------- finite-difference check

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> float:
    """Max symmetric relative error between tape gradients and central differences.

    ``f`` must be scalar-valued and smooth near ``x``. Relative error per
    coordinate is |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if not isinstance(eps, (int, float)) or not eps > 0:
        raise ContractError(f"finite_difference_check: eps must be > 0, got {eps!r}")
    x.requires_grad = True
    with Tape() as tape:
        out = f(x)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("finite_difference_check: f must return a scalar tensor")
        grads = backward(out, tape)
    analytic = grads.get(x)
    if analytic is None:  # x unused by f
        analytic = np.zeros_like(x.data)
    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    a = analytic.ravel()
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + _REL_GUARD)
    return float(rel.max()) if rel.size else 0.0


def op_gradient_checks(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference error for every differentiable op on small random inputs.

    Inputs keep dims <= 8 and avoid kinks (relu away from 0, BCE
    probabilities inside (0.1, 0.9)).
    """
    rng = np.random.default_rng(seed)

    def r(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def c(*shape):
        # fixed (non-grad) cofactor so each probe function is deterministic
        return Tensor(rng.standard_normal(shape))

    b_mm = c(4, 3)
    gain = Tensor(rng.standard_normal((1, 5)) * 0.3 + 1.0, requires_grad=True)
    bias = Tensor(rng.standard_normal((1, 5)) * 0.1, requires_grad=True)
    x_ln = r(3, 5)
    p_bce = Tensor(rng.uniform(0.1, 0.9, (6, 1)), requires_grad=True)
    y_bce = rng.integers(0, 2, (6, 1)).astype(float)
    x_relu = Tensor(np.where(np.abs(z := rng.standard_normal((3, 4))) < 0.2, z + 0.5, z), requires_grad=True)
    second = c(3, 4)
    bias_row = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    wide = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    m43, m26, m31, m64, m35, m34 = c(4, 3), c(2, 6), c(3, 1), c(6, 4), c(3, 5), c(3, 4)

    cases: list[tuple[str, Callable[[Tensor], Tensor], Tensor]] = [
        ("matmul", lambda t: mean(matmul(t, b_mm)), r(5, 4)),
        ("transpose", lambda t: mean(mul(transpose(t), m43)), r(3, 4)),
        ("reshape", lambda t: mean(mul(reshape(t, (2, 6)), m26)), r(3, 4)),
        ("add", lambda t: mean(add(t, second)), r(3, 4)),
        ("add_bias", lambda t: mean(add(wide, t)), bias_row),
        ("sub", lambda t: mean(sub(t, second)), r(3, 4)),
        ("mul", lambda t: mean(mul(t, second)), r(3, 4)),
        ("scale", lambda t: mean(scale(t, -2.5)), r(3, 4)),
        ("sum_all", lambda t: sum_all(mul(t, t)), r(2, 3)),
        ("mean", lambda t: mean(mul(t, t)), r(2, 3)),
        ("row_sum", lambda t: mean(mul(row_sum(t), m31)), r(3, 4)),
        ("concat_rows", lambda t: mean(mul(concat_rows(t, second), m64)), r(3, 4)),
        ("relu", lambda t: mean(relu(t)), x_relu),
        ("gelu", lambda t: mean(gelu(t)), r(3, 4)),
        ("sigmoid", lambda t: mean(sigmoid(t)), r(3, 4)),
        ("softmax_rows", lambda t: mean(mul(softmax_rows(t), m34)), r(3, 4)),
        ("logsumexp_rows", lambda t: mean(logsumexp_rows(t)), r(3, 4)),
        ("layernorm_rows:x", lambda t: mean(mul(layernorm_rows(t, gain, bias), m35)), x_ln),
        ("layernorm_rows:gain", lambda t: mean(layernorm_rows(x_ln, t, bias)), gain),
        ("layernorm_rows:bias", lambda t: mean(layernorm_rows(x_ln, gain, t)), bias),
        ("l2_normalize_rows", lambda t: mean(mul(l2_normalize_rows(t), m34)), r(3, 4)),
        ("binary_cross_entropy", lambda t: binary_cross_entropy(t, y_bce), p_bce),
    ]
    return {name: finite_difference_check(fn, x, eps) for name, fn, x in cases}

"""Small reverse-mode autodiff engine on top of numpy.

Operations are recorded on the active :class:`Tape` (if any) and replayed in
reverse order by :meth:`Tape.backward`. Outside a tape every op is a plain
forward computation, which is what inference and finite-difference checks use.

    with Tape() as tape:
        loss = bce(sigmoid(conv1d(x, w, b)), y)
    tape.backward(loss)
    w.grad  # d loss / d w
"""

import threading
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericFailure

PROB_CLAMP = 1e-7

_state = threading.local()


def _readonly(arr):
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array with an optional gradient slot.

    Parameters are tensors created with ``requires_grad=True``; the optimizer
    swaps in a new ``data`` array instead of writing into the old one.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the Tensor side

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _readonly(np.array(data, dtype=np.float64))
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = _readonly(np.asarray(arr, dtype=np.float64))
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        if isinstance(other, Tensor):
            raise InvalidArgument("division is only defined by constants")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


Op = namedtuple("Op", "name out inputs backward")


class Tape:
    """Ordered record of executed ops, replayed backwards by :meth:`backward`."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def backward(self, root):
        """Accumulate d root / d leaf into ``leaf.grad`` for every recorded leaf."""
        if root.data.size != 1:
            raise InvalidArgument(f"backward needs a scalar, got shape {root.shape}")
        grads = {id(root): np.ones_like(root.data)}
        produced = set()
        tensors = {id(root): root}
        for op in reversed(self.ops):
            produced.add(id(op.out))
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                tensors[key] = t
                grads[key] = grads[key] + gi if key in grads else gi
        for key, g in grads.items():
            if key in produced:
                continue
            t = tensors[key]
            t.grad = g if t.grad is None else t.grad + g


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _result(name, arr, inputs, backward):
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(Op(name, out, inputs, backward))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x):
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis=0):
    """Softmax along ``axis``; the default normalizes each column of a (C, T) map."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result("softmax", p, (x,), backward)


def log_prob(p):
    """Natural log of a probability clamped to [PROB_CLAMP, 1 - PROB_CLAMP]."""
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1.0 - PROB_CLAMP)
    return _result("log_prob", np.log(pc), (p,), lambda g: (np.where(inside, g / pc, 0.0),))


# -- reductions -------------------------------------------------------------


def total(x):
    return _result("sum", np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.data.size
    return _result("mean", np.mean(x.data), (x,), lambda g: (np.full(x.shape, g / n),))


def l1_distance(a, b):
    """Mean absolute elementwise difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"l1_distance shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff) / n
    return _result("l1", np.mean(np.abs(diff)), (a, b), lambda g: (g * sign, -g * sign))


def bce(p, y):
    """Mean binary cross-entropy of probabilities ``p`` against targets ``y``."""
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise InvalidArgument(f"bce shapes differ: {p.shape} vs {y.shape}")
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1.0 - PROB_CLAMP)
    t = y.data
    n = pc.size
    loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))

    def backward(g):
        dp = np.where(inside, (-t / pc + (1.0 - t) / (1.0 - pc)) * (g / n), 0.0)
        return dp, None

    return _result("bce", loss, (p, y), backward)


def topk_mean(x, k):
    """Mean of the ``k`` largest entries along the last axis.

    Ties go to the lowest index, so the selection (and the gradient) is
    deterministic.
    """
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise InvalidArgument(f"top-k needs 1 <= k <= {n}, got k={k}")
    idx = np.argsort(-x.data, axis=-1, kind="stable")[..., :k]
    vals = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        dx = np.zeros(x.shape)
        np.put_along_axis(dx, idx, np.expand_dims(g, -1) / k, axis=-1)
        return (dx,)

    return _result("topk_mean", vals.mean(axis=-1), (x,), backward)


# -- structural -------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_columns(x, idx):
    """Select (with repetition) columns of a (C, T) tensor."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        dx = np.zeros(x.shape)
        np.add.at(dx, (slice(None), idx), g)
        return (dx,)

    return _result("take_columns", x.data[:, idx], (x,), backward)


def gather(x, rows, cols):
    """Pick ``x[rows[i], cols[i]]`` for each i as a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        dx = np.zeros(x.shape)
        np.add.at(dx, (rows, cols), g)
        return (dx,)

    return _result("gather", x.data[rows, cols], (x,), backward)


def matmul_right(x, m):
    """``x @ m`` for a constant matrix ``m``; used for fixed resampling maps."""
    m = np.asarray(m, dtype=np.float64)
    return _result("matmul_right", x.data @ m, (x,), lambda g: (g @ m.T,))


# -- temporal ops -----------------------------------------------------------


def conv1d(x, w, b, stride=1, padding=0):
    """1-D cross-correlation of a (C_in, T) input with (C_out, C_in, K) weights."""
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise InvalidArgument(f"conv1d expects (C_in, T) and (C_out, C_in, K), got {x.shape}, {w.shape}")
    c_in, length = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise InvalidArgument(f"conv1d channel mismatch: input has {c_in}, weights expect {w_in}")
    if b.shape != (c_out,):
        raise InvalidArgument(f"conv1d bias shape {b.shape} != ({c_out},)")
    if k < 1 or stride < 1 or padding < 0 or length + 2 * padding < k:
        raise InvalidArgument(f"conv1d invalid geometry T={length} K={k} stride={stride} padding={padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    t_out = (length + 2 * padding - k) // stride + 1
    # cols[i, j, t] = xp[i, t * stride + j]
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride][:, :t_out]
    cols = cols.transpose(0, 2, 1).reshape(c_in * k, t_out)
    wm = w.data.reshape(c_out, c_in * k)
    out = wm @ cols + b.data[:, None]

    def backward(g):
        dw = (g @ cols.T).reshape(w.shape)
        db = g.sum(axis=1)
        dcols = (wm.T @ g).reshape(c_in, k, t_out)
        dxp = np.zeros(xp.shape)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            dxp[:, j:j + span:stride] += dcols[:, j, :]
        dx = dxp[:, padding:padding + length] if padding else dxp
        return dx, dw, db

    return _result("conv1d", out, (x, w, b), backward)


def scaled_length(length, s):
    if not s > 0:
        raise InvalidArgument(f"scale factor must be positive, got {s}")
    return max(1, int(round(s * length)))


def interp_matrix(length, out_length):
    """(length, out_length) matrix whose columns hold endpoint-aligned linear weights."""
    m = np.zeros((length, out_length))
    if length == 1:
        m[0, :] = 1.0
    elif out_length == 1:
        m[:, 0] = 1.0 / length
    else:
        pos = np.arange(out_length) * (length - 1) / (out_length - 1)
        lo = np.minimum(np.floor(pos).astype(int), length - 2)
        frac = pos - lo
        cols = np.arange(out_length)
        m[lo, cols] = 1.0 - frac
        m[lo + 1, cols] += frac
    return m


def resize_linear(x, s):
    """Rescale the time axis of a (C, T) tensor by ``s`` with linear interpolation."""
    length = x.shape[-1]
    out_length = scaled_length(length, s)
    if out_length == length:
        return x
    return matmul_right(x, interp_matrix(length, out_length))


def upsample_nearest(x, factor, length):
    """Repeat each column ``factor`` times and truncate to ``length`` columns."""
    idx = np.arange(length) // factor
    if idx[-1] >= x.shape[-1]:
        raise InvalidArgument(f"cannot upsample {x.shape[-1]} columns by {factor} to {length}")
    return take_columns(x, idx)


# -- optimization -----------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimize_step(params, grads, state):
    """One Adam update, replacing each ``param.data`` with the new value.

    Raises NumericFailure (leaving params and state untouched) on non-finite
    gradients.
    """
    if len(params) != len(grads):
        raise InvalidArgument("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for parameter {p.name or '?'}")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if state.lr == 0:
            continue
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = _readonly(p.data - update)
    return params, state


class Adam:
    def __init__(self, params, lr, **kw):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, **kw)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        optimize_step(self.params, grads, self.state)


def grad_check(fn, params, eps=1e-5):
    """Largest relative gap between tape gradients and central differences.

    ``fn`` takes no arguments and returns a scalar tensor built from
    ``params``. Each entry's error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    with Tape() as tape:
        out = fn()
    if not np.isfinite(out.data).all():
        raise NumericFailure("function value is not finite")
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, a in zip(params, analytic):
        base = p.data
        for idx in np.ndindex(*p.shape):
            values = []
            for step in (eps, -eps):
                bumped = base.copy()
                bumped[idx] += step
                p.data = _readonly(bumped)
                v = fn().data
                if not np.isfinite(v).all():
                    p.data = base
                    raise NumericFailure(f"function value is not finite at {p.name or '?'}{list(idx)}")
                values.append(float(v))
            p.data = base
            numeric = (values[0] - values[1]) / (2 * eps)
            err = abs(a[idx] - numeric) / max(1e-8, abs(a[idx]) + abs(numeric))
            worst = max(worst, err)
    return worst

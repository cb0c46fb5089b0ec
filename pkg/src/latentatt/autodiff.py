"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` only while one is open
and at least one input requires a gradient. Outside a tape every operation
is a plain numpy computation, which is what search and evaluation use.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(w * w)
    ...     tape.backward(loss)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np

from .errors import BoundsError, ContractError, DimensionError, EmptySupportError, NonFiniteError

_TAPES: list["Tape"] = []


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one training step.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records. The tape is meant to be discarded after :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward):
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                    continue
                if x._tape is self:
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else prev + gx
                else:
                    x.grad = gx.copy() if x.grad is None else x.grad + gx


def backward(loss: Tensor):
    """Backpropagate from a scalar ``loss`` recorded on an open or closed tape."""
    if loss._tape is None:
        raise ContractError("loss is not on a tape")
    loss._tape.backward(loss)


def recording():
    return bool(_TAPES) and _TAPES[-1] is not None


class no_grad:
    """Suspend recording on the active tape inside the block."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    if _TAPES and _TAPES[-1] is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def validate(x: Tensor, name="tensor"):
    """Raise :class:`NonFiniteError` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _wrap(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a):
    a = _wrap(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- shape ------------------------------------------------------------------


def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    n = len(tensors)
    return _make(
        out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def take(a, index):
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = _wrap(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise BoundsError(str(exc)) from None

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out, dtype=np.float64), (a,), back)


def gather_row(h, t):
    """Row ``t`` (0-based) of a 2-D tensor."""
    h = _wrap(h)
    if h.ndim != 2:
        raise DimensionError("gather_row expects a 2-D tensor")
    if not 0 <= t < h.shape[0]:
        raise BoundsError(f"row {t} out of range for {h.shape[0]} rows")
    return take(h, t)


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


# -- normalisation ----------------------------------------------------------


def _prepare_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise DimensionError(f"mask shape {mask.shape} does not fit {shape}") from None
    if not np.all(mask.any(axis=-1)):
        raise EmptySupportError("every entry of a softmax row is masked out")
    return mask


def _masked_logits(z, mask, temperature):
    scaled = np.where(mask, z / temperature, -np.inf)
    shift = scaled.max(axis=-1, keepdims=True)
    return scaled - shift


def masked_softmax(logits, mask=None, temperature=1.0):
    """Softmax over the last axis restricted to ``mask``; zero elsewhere.

    Masked entries are removed before exponentiation, so ``temperature``
    only rescales the admissible logits.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    logits = _wrap(logits)
    mask = _prepare_mask(mask, logits.shape)
    e = np.exp(_masked_logits(logits.data, mask, temperature))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _make(y, (logits,), back)


def masked_log_softmax(logits, mask=None, temperature=1.0):
    """Log of :func:`masked_softmax`; masked entries are ``-inf`` with zero gradient."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    logits = _wrap(logits)
    mask = _prepare_mask(mask, logits.shape)
    s = _masked_logits(logits.data, mask, temperature)
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    out = s - lse
    probs = np.exp(out)

    def back(g):
        g = np.where(mask, g, 0.0)
        total = g.sum(axis=-1, keepdims=True)
        return ((g - probs * total) / temperature,)

    return _make(out, (logits,), back)


def log_softmax(logits):
    return masked_log_softmax(logits, None, 1.0)


def weighted_sum(weights, values):
    """Contract ``weights[..., T]`` with ``values[..., T, E]`` to ``[..., E]``.

    Leading dimensions broadcast, so one encoder output can serve many rows.
    """
    weights, values = _wrap(weights), _wrap(values)
    if values.ndim < 2 or weights.shape[-1] != values.shape[-2]:
        raise DimensionError(f"weighted_sum shapes {weights.shape} and {values.shape} do not agree")
    out = np.matmul(weights.data[..., None, :], values.data)[..., 0, :]

    def back(g):
        gw = np.matmul(values.data, g[..., :, None])[..., 0]
        gv = weights.data[..., :, None] * g[..., None, :]
        return (_unbroadcast(gw, weights.shape), _unbroadcast(gv, values.shape))

    return _make(out, (weights, values), back)


# -- fused layers -----------------------------------------------------------


def lstm_layer(x, w_in, w_rec, bias):
    """Run a unidirectional LSTM over ``x[B, T, D]`` from a zero state.

    Gate order is (input, forget, cell, output). Returns hidden states
    ``[B, T, H]``. Backward is hand-written backpropagation through time,
    recorded as one tape node.
    """
    x, w_in, w_rec, bias = (_wrap(v) for v in (x, w_in, w_rec, bias))
    B, T, D = x.shape
    H = w_rec.shape[1]
    if w_in.shape != (4 * H, D) or w_rec.shape != (4 * H, H) or bias.shape != (4 * H,):
        raise DimensionError("lstm_layer parameter shapes are inconsistent")
    gx = x.data @ w_in.data.T + bias.data
    acts = np.empty((B, T, 4 * H))
    cells = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    wr_t = w_rec.data.T
    for t in range(T):
        z = gx[:, t] + h @ wr_t
        a = acts[:, t]
        a[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        h = a[:, 3 * H :] * np.tanh(c)
        cells[:, t] = c
        hs[:, t] = h

    def back(g):
        dz = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        w = w_rec.data
        for t in reversed(range(T)):
            a = acts[:, t]
            i, f, cc, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = np.tanh(cells[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            c_prev = cells[:, t - 1] if t > 0 else np.zeros((B, H))
            d = dz[:, t]
            d[:, :H] = dc * cc * i * (1.0 - i)
            d[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            d[:, 2 * H : 3 * H] = dc * i * (1.0 - cc * cc)
            d[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ w
        h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
        dz2 = dz.reshape(B * T, 4 * H)
        g_win = dz2.T @ x.data.reshape(B * T, D)
        g_wrec = dz2.T @ h_prev.reshape(B * T, H)
        g_bias = dz2.sum(axis=0)
        g_x = dz @ w_in.data
        return (g_x, g_win, g_wrec, g_bias)

    return _make(hs, (x, w_in, w_rec, bias), back)


def masked_max_pool(x, lengths, factor):
    """Max-pool ``x[B, T, D]`` over time by ``factor`` using only valid frames.

    Sequence ``b`` has ``lengths[b]`` valid frames; its pooled length is
    ``ceil(lengths[b] / factor)`` and a ragged tail window pools over what
    remains. Windows with no valid frame produce zeros.
    """
    x = _wrap(x)
    lengths = np.asarray(lengths, dtype=int)
    B, T, D = x.shape
    if factor == 1:
        return x
    Tp = -(-T // factor)
    pad = Tp * factor - T
    valid = np.arange(T)[None, :] < lengths[:, None]
    filled = np.where(valid[:, :, None], x.data, -np.inf)
    if pad:
        filled = np.concatenate([filled, np.full((B, pad, D), -np.inf)], axis=1)
    windows = filled.reshape(B, Tp, factor, D)
    arg = windows.argmax(axis=2)
    out = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]
    empty = ~np.isfinite(out)
    out = np.where(empty, 0.0, out)

    def back(g):
        gw = np.zeros((B, Tp, factor, D))
        np.put_along_axis(gw, arg[:, :, None, :], np.where(empty, 0.0, g)[:, :, None, :], axis=2)
        return (gw.reshape(B, Tp * factor, D)[:, :T],)

    return _make(out, (x,), back)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0."""
    x = _wrap(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)

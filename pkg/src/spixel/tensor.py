"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every differentiable primitive computes its forward value eagerly on numpy
and, when a Tape is active and any input requires gradients, appends a
record (output id, input ids, backward rule) to the tape. Records are
appended in execution order, so the tape is already topologically sorted;
the backward sweep walks it once in reverse, accumulating gradients
additively across fan-out.

Broadcasting is deliberately restricted to the bias patterns the layers
need; everything else requires exact shape agreement so backward rules stay
auditable.

Usage:

    with Tape() as tape:
        loss = softmax_cross_entropy(linear(x, w, b), targets)
        tape.backward(loss)
    # w.grad, b.grad now hold d loss / d param
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError, TapeError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A shape-typed float64 buffer, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], object]] = []
        self._tensors: list[Tensor] = []
        self._ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def _node(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._tensors)
            self._ids[id(t)] = nid
            self._tensors.append(t)
            t.node_id = nid
        return nid

    def add(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        in_ids = tuple(self._node(t) for t in inputs)
        self._records.append((self._node(output), in_ids, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; accumulates into .grad fields."""
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        loss_id = self._ids.get(id(loss))
        if loss_id is None:
            raise TapeError("loss is not connected to this tape")
        grads: list[np.ndarray | None] = [None] * len(self._tensors)
        grads[loss_id] = np.ones_like(loss.data)
        for out_id, in_ids, fn in reversed(self._records):
            g = grads[out_id]
            if g is None:
                continue
            for in_id, gi in zip(in_ids, fn(g)):
                if gi is None:
                    continue
                if grads[in_id] is None:
                    grads[in_id] = gi.copy() if gi.base is not None or gi is g else gi
                else:
                    grads[in_id] = grads[in_id] + gi
        for t, g in zip(self._tensors, grads):
            if t.requires_grad and g is not None:
                t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Backward on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape; call inside 'with Tape():'")
    tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.add(out, inputs, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: x (n, f) + b (f,)."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias: x {x.data.shape}, b {b.data.shape}")
    out = Tensor(x.data + b.data[None, :])
    return _record(out, (x, b), lambda g: (g, g.sum(axis=0)))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated with respect to c)."""
    c = float(c)
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with x (n, f_in), w (f_in, f_out), b (f_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: shapes {x.data.shape} and {w.data.shape}")
    y = x.data @ w.data
    if b is None:
        out = Tensor(y)
        return _record(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} vs out dim {w.data.shape[1]}")
    out = Tensor(y + b.data)
    return _record(out, (x, w, b),
                   lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    return _record(out, (x,), lambda g: (g * (x.data > 0.0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = Tensor(np.where(x.data > 0.0, x.data, slope * x.data))
    return _record(out, (x,), lambda g: (g * np.where(x.data > 0.0, 1.0, slope),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    y = np.where(x.data > 0.0, x.data, alpha * np.expm1(x.data))
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * np.where(x.data > 0.0, 1.0, y + alpha),))


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, k: int, s: int, h_out: int, w_out: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=np.float64)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a:a + s * (h_out - 1) + 1:s,
                                  b:b + s * (w_out - 1) + 1:s]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation: x (n, c_in, h, w), w (c_out, c_in, k, k), b (c_out,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.data.shape}, w {w.data.shape}")
    n, c_in, h, wid = x.data.shape
    c_out, c_in_w, k, k2 = w.data.shape
    if c_in != c_in_w or k != k2:
        raise ShapeError(f"conv2d: x {x.data.shape} incompatible with w {w.data.shape}")
    if (h + 2 * padding - k) % stride or (wid + 2 * padding - k) % stride:
        raise ShapeError(
            f"conv2d: spatial dims {(h, wid)} not divisible for k={k}, "
            f"stride={stride}, padding={padding}"
        )
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wid + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: output dims {(h_out, w_out)} from input {(h, wid)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, h_out, w_out)
    colsm = cols.reshape(n, c_in * k * k, h_out * w_out)
    wm = w.data.reshape(c_out, c_in * k * k)
    y = (wm @ colsm).reshape(n, c_out, h_out, w_out)
    if b is not None:
        if b.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {b.data.shape} vs c_out {c_out}")
        y = y + b.data[None, :, None, None]

    def backward_fn(g):
        gm = g.reshape(n, c_out, h_out * w_out)
        dw = (gm @ colsm.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        dcols = (wm.T @ gm).reshape(n, c_in, k, k, h_out, w_out)
        gxp = np.zeros_like(xp)
        for a in range(k):
            for c in range(k):
                gxp[:, :, a:a + stride * (h_out - 1) + 1:stride,
                    c:c + stride * (w_out - 1) + 1:stride] += dcols[:, :, a, c]
        gx = gxp[:, :, padding:padding + h, padding:padding + wid]
        if b is None:
            return gx, dw
        return gx, dw, g.sum(axis=(0, 2, 3))

    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, backward_fn)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient routes to the first maximum in window scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected (n, c, h, w), got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"maxpool2d: input {(h, w)} smaller than kernel {kernel}")
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1
    windows = np.empty((n, c, h_out, w_out, kernel * kernel), dtype=np.float64)
    for a in range(kernel):
        for b in range(kernel):
            windows[..., a * kernel + b] = x.data[:, :, a:a + stride * (h_out - 1) + 1:stride,
                                                  b:b + stride * (w_out - 1) + 1:stride]
    arg = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        for idx in range(kernel * kernel):
            a, b = divmod(idx, kernel)
            gx[:, :, a:a + stride * (h_out - 1) + 1:stride,
               b:b + stride * (w_out - 1) + 1:stride] += g * (arg == idx)
        return (gx,)

    return _record(Tensor(y), (x,), backward_fn)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization for (n, c) or (n, c, h, w) inputs.

    Train mode normalizes by biased batch statistics and updates the running
    stats in place with the given momentum; eval mode normalizes by the
    running stats. Raises DegenerateBatchError for a single-sample train batch.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ShapeError(f"batchnorm: expected (n, c) or (n, c, h, w), got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} vs c={c}")
    axes = (0,) if nd == 2 else (0, 2, 3)
    expand = (lambda v: v[None, :]) if nd == 2 else (lambda v: v[None, :, None, None])

    if train:
        if x.data.shape[0] < 2:
            raise DegenerateBatchError("batchnorm train mode needs a batch of >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - expand(mu)) * expand(inv_std)
    y = expand(gamma.data) * xhat + expand(beta.data)
    m = x.data.size // c

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if not train:
            return g * expand(gamma.data * inv_std), dgamma, dbeta
        gx = (g - expand(dbeta / m) - xhat * expand(dgamma / m)) * expand(gamma.data * inv_std)
        return gx, dgamma, dbeta

    return _record(Tensor(y), (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch, with the log-sum-exp shift."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.data.shape}")
    n, k = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} vs batch {n}")
    if len(targets) and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), targets].mean()

    def backward_fn(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    return _record(Tensor(loss), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# gather / segment primitives (the GNN's aggregation substrate)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Row selection x[index] with scatter-add backward."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d input, got {x.data.shape}")
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= x.data.shape[0]):
        raise IndexError(f"row index outside [0, {x.data.shape[0]})")

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(Tensor(x.data[index]), (x,), backward_fn)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x (e, f) by the scalar s[e]; s is (e,) or (e, 1)."""
    sd = s.data.reshape(-1)
    if x.data.ndim != 2 or sd.shape[0] != x.data.shape[0]:
        raise ShapeError(f"scale_rows: x {x.data.shape}, s {s.data.shape}")
    out = Tensor(x.data * sd[:, None])

    def backward_fn(g):
        return g * sd[:, None], (g * x.data).sum(axis=1).reshape(s.data.shape)

    return _record(out, (x, s), backward_fn)


def _check_segments(values: Tensor, segment_ids: np.ndarray, num_segments: int):
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim not in (1, 2):
        raise ShapeError(f"segment op: values {values.data.shape}")
    if ids.shape != (values.data.shape[0],):
        raise ShapeError(f"segment op: ids {ids.shape} vs values {values.data.shape}")
    if len(ids) and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id outside [0, {num_segments})")
    return ids


def _as_2d(values: Tensor) -> Tensor:
    if values.data.ndim == 1:
        return reshape(values, (values.data.shape[0], 1))
    return values


def segment_sum(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment sum; empty segments yield zero rows."""
    ids = _check_segments(values, segment_ids, num_segments)
    values = _as_2d(values)
    out = np.zeros((num_segments, values.data.shape[1]), dtype=np.float64)
    np.add.at(out, ids, values.data)
    return _record(Tensor(out), (values,), lambda g: (g[ids],))


def segment_mean(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment mean; empty segments yield zero rows."""
    ids = _check_segments(values, segment_ids, num_segments)
    values = _as_2d(values)
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    out = np.zeros((num_segments, values.data.shape[1]), dtype=np.float64)
    np.add.at(out, ids, values.data)
    out /= safe[:, None]
    return _record(Tensor(out), (values,), lambda g: ((g / safe[:, None])[ids],))


def segment_max(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment max; empty segments yield zero rows (no gradient flows there).

    Gradient routes to the first occurrence of the maximum within each
    segment, in row order.
    """
    ids = _check_segments(values, segment_ids, num_segments)
    values = _as_2d(values)
    e, f = values.data.shape
    out = np.full((num_segments, f), -np.inf)
    np.maximum.at(out, ids, values.data)
    empty = np.isinf(out)
    filled = np.where(empty, 0.0, out)

    def backward_fn(g):
        first = np.full((num_segments, f), e, dtype=np.int64)
        rows, cols = np.nonzero(values.data == out[ids])
        np.minimum.at(first, (ids[rows], cols), rows)
        win = first[ids[rows], cols] == rows
        gx = np.zeros_like(values.data)
        gx[rows[win], cols[win]] = g[ids[rows[win]], cols[win]]
        return (gx,)

    return _record(Tensor(filled), (values,), backward_fn)


def segment_softmax(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax normalized within each segment, per column; output matches values."""
    ids = _check_segments(values, segment_ids, num_segments)
    values = _as_2d(values)
    f = values.data.shape[1]
    seg_max = np.full((num_segments, f), -np.inf)
    np.maximum.at(seg_max, ids, values.data)
    exp = np.exp(values.data - seg_max[ids])
    denom = np.zeros((num_segments, f), dtype=np.float64)
    np.add.at(denom, ids, exp)
    alpha = exp / denom[ids]

    def backward_fn(g):
        weighted = np.zeros((num_segments, f), dtype=np.float64)
        np.add.at(weighted, ids, alpha * g)
        return (alpha * (g - weighted[ids]),)

    return _record(Tensor(alpha), (values,), backward_fn)


_SEGMENT_OPS = {
    "sum": segment_sum,
    "mean": segment_mean,
    "max": segment_max,
    "softmax": segment_softmax,
}


def scatter_segment_op(op: str, values: Tensor, segment_ids: np.ndarray,
                       num_segments: int) -> Tensor:
    """Dispatch to a segment reduction (sum/mean/max) or segment softmax."""
    if op not in _SEGMENT_OPS:
        raise ConfigError(f"unknown segment op {op!r}")
    return _SEGMENT_OPS[op](values, segment_ids, num_segments)

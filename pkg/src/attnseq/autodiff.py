"""Dense-tensor numerical core with reverse-mode differentiation.

Tensors wrap numpy arrays and are treated as immutable once an op has
produced them. Ops record themselves on the innermost active Tape; with no
tape active they are plain forward computations (used for evaluation and
for finite-difference probes). Gradients accumulate additively into
Parameters until explicitly zeroed, so calling backward twice on the same
tape doubles every gradient.

Every op checks its output for NaN/Inf and raises NumericError instead of
propagating silent garbage.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NumericError

PRECISIONS = {"standard": np.float32, "high": np.float64}


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}, expected standard|high") from None


class Tensor:
    """Dense real-valued array; shape () is a scalar."""

    __slots__ = ("data", "param", "_op_out")

    def __init__(self, data, dtype=None, param=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.param = param
        self._op_out = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self):
        return "standard" if self.data.dtype == np.float32 else "high"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"


class Parameter:
    """Named learnable value with a persistent gradient buffer of equal shape."""

    __slots__ = ("name", "value", "gradient", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        arr = np.array(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.name = name
        self.value = Tensor(arr, param=self)
        self.gradient = Tensor(np.zeros_like(arr))
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.gradient.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)}, trainable={self.trainable})"


def zero_gradients(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# tape

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable ops, replayed in reverse."""

    def __init__(self):
        self._records = []  # (outputs tuple, backward fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self):
        return len(self._records)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(outputs, backward_fn):
    """Register a differentiable op on the active tape (no-op without one).

    backward_fn receives one gradient array per output (None when the loss
    does not depend on that output) and returns (input_tensor, grad_array)
    pairs for every input it wants to push gradient into.
    """
    tape = active_tape()
    if tape is None:
        return
    outs = outputs if isinstance(outputs, tuple) else (outputs,)
    for o in outs:
        o._op_out = True
    tape._records.append((outs, backward_fn))


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(param) into every trainable Parameter on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for outputs, fn in reversed(tape._records):
        out_grads = []
        hit = False
        for o in outputs:
            g = grads.pop(id(o), None)
            holders.pop(id(o), None)
            if g is not None:
                hit = True
            out_grads.append(g)
        if not hit:
            continue  # branch the loss does not depend on
        for t, contrib in fn(*out_grads):
            if contrib is None:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + contrib
            else:
                grads[k] = contrib
                holders[k] = t
    for k, g in grads.items():
        p = holders[k].param
        if p is not None and p.trainable:
            p.gradient.data += g


# ---------------------------------------------------------------------------
# op helpers

def _t(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    raise ContractError(f"expected Tensor or Parameter, got {type(x).__name__}")


def _ensure_finite(op: str, arr: np.ndarray):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _same_dtype(op, a, b):
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed precision operands ({a.dtype} vs {b.dtype})")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# ---------------------------------------------------------------------------
# ops

def matmul(a, b) -> Tensor:
    """Matrix product. `b` may be a vector, treated as a single column."""
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    _same_dtype("matmul", ad, bd)
    out = Tensor(ad @ bd)
    _ensure_finite("matmul", out.data)

    def back(g):
        if bd.ndim == 1:
            return [(a, np.outer(g, bd)), (b, ad.T @ g)]
        return [(a, g @ bd.T), (b, ad.T @ g)]

    record_op(out, back)
    return out


def add(a, b) -> Tensor:
    """Elementwise sum; `b` may be a vector broadcast over the rows of `a`."""
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        broadcast = False
    elif ad.ndim == 2 and bd.ndim == 1 and bd.shape[0] == ad.shape[1]:
        broadcast = True
    else:
        raise DimensionError(f"add: incompatible shapes {ad.shape} and {bd.shape}")
    _same_dtype("add", ad, bd)
    out = Tensor(ad + bd)
    _ensure_finite("add", out.data)

    def back(g):
        return [(a, g), (b, g.sum(axis=0) if broadcast else g)]

    record_op(out, back)
    return out


def hadamard(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise DimensionError(f"hadamard: incompatible shapes {ad.shape} and {bd.shape}")
    _same_dtype("hadamard", ad, bd)
    out = Tensor(ad * bd)
    _ensure_finite("hadamard", out.data)

    def back(g):
        return [(a, g * bd), (b, g * ad)]

    record_op(out, back)
    return out


def sigmoid(x) -> Tensor:
    x = _t(x)
    s = stable_sigmoid(x.data)
    out = Tensor(s)
    _ensure_finite("sigmoid", s)

    def back(g):
        return [(x, g * s * (1.0 - s))]

    record_op(out, back)
    return out


def tanh_op(x) -> Tensor:
    x = _t(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    _ensure_finite("tanh", t)

    def back(g):
        return [(x, g * (1.0 - t * t))]

    record_op(out, back)
    return out


def scale(x, k: float) -> Tensor:
    """Multiply by a python constant."""
    x = _t(x)
    out = Tensor(x.data * k)
    _ensure_finite("scale", out.data)

    def back(g):
        return [(x, g * k)]

    record_op(out, back)
    return out


def tsum(x) -> Tensor:
    """Sum all elements to a scalar."""
    x = _t(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    _ensure_finite("sum", out.data)

    def back(g):
        return [(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))]

    record_op(out, back)
    return out


def affine(x, weight, bias=None) -> Tensor:
    """W @ x + b for a vector x, or x @ W.T + b for batched rows of x."""
    x = _t(x)
    w = _t(weight)
    b = _t(bias) if bias is not None else None
    xd, wd = x.data, w.data
    if wd.ndim != 2:
        raise DimensionError(f"affine: weight must be 2-d, got {wd.shape}")
    _same_dtype("affine", xd, wd)
    if xd.ndim == 1:
        if xd.shape[0] != wd.shape[1]:
            raise DimensionError(f"affine: incompatible shapes {xd.shape} and {wd.shape}")
        y = wd @ xd
    elif xd.ndim == 2:
        if xd.shape[1] != wd.shape[1]:
            raise DimensionError(f"affine: incompatible shapes {xd.shape} and {wd.shape}")
        y = xd @ wd.T
    else:
        raise DimensionError(f"affine: input must be 1-d or 2-d, got {xd.shape}")
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise DimensionError(f"affine: bias shape {b.data.shape} does not match output {wd.shape[0]}")
        y = y + b.data
    out = Tensor(y)
    _ensure_finite("affine", y)

    def back(g):
        if xd.ndim == 1:
            pairs = [(w, np.outer(g, xd)), (x, g @ wd)]
            if b is not None:
                pairs.append((b, g))
        else:
            pairs = [(w, g.T @ xd), (x, g @ wd)]
            if b is not None:
                pairs.append((b, g.sum(axis=0)))
        return pairs

    record_op(out, back)
    return out


def weighted_sum(items, weights) -> Tensor:
    """sum_n w[n] * items[n] for same-shape tensors, differentiable in both."""
    if not items:
        raise ContractError("weighted_sum: empty item list")
    items = [_t(t) for t in items]
    w = _t(weights)
    if w.data.ndim != 1 or w.data.shape[0] != len(items):
        raise DimensionError(
            f"weighted_sum: {len(items)} items but weight shape {w.data.shape}")
    shape = items[0].shape
    for t in items:
        if t.shape != shape:
            raise DimensionError(f"weighted_sum: mixed item shapes {shape} and {t.shape}")
    stack = np.stack([t.data for t in items])
    out = Tensor(np.tensordot(w.data, stack, axes=1))
    _ensure_finite("weighted_sum", out.data)

    def back(g):
        gw = stack.reshape(len(items), -1) @ g.ravel()
        pairs = [(w, gw.astype(w.dtype, copy=False))]
        pairs.extend((t, w.data[i] * g) for i, t in enumerate(items))
        return pairs

    record_op(out, back)
    return out


def dropout(x, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).

    Identity in eval mode or at rate 0 (no rng draw happens then).
    """
    x = _t(x)
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    out = Tensor(x.data * mask)

    def back(g):
        return [(x, g * mask)]

    record_op(out, back)
    return out


def _rows_and_labels(op, logits, label):
    z = _t(logits).data
    if z.ndim == 1:
        z2 = z[None, :]
        labels = np.asarray([label], dtype=np.int64)
        batched = False
    elif z.ndim == 2:
        z2 = z
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (z.shape[0],):
            raise ContractError(f"{op}: batched logits {z.shape} need {z.shape[0]} labels")
        batched = True
    else:
        raise DimensionError(f"{op}: logits must be 1-d or 2-d, got {z.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z2.shape[1]):
        raise LabelError(f"{op}: label out of range [0,{z2.shape[1]})")
    return z2, labels, batched


def softmax_cross_entropy(logits, label) -> Tensor:
    """-log softmax(logits)[label], stabilized by max subtraction.

    Accepts a logit vector with an int label, or a [batch, classes] matrix
    with one label per row (loss is then the batch mean).
    """
    lt = _t(logits)
    z2, labels, batched = _rows_and_labels("softmax_cross_entropy", lt, label)
    zmax = z2.max(axis=1, keepdims=True)
    ez = np.exp(z2 - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    rows = np.arange(z2.shape[0])
    losses = np.log(sez[:, 0]) + zmax[:, 0] - z2[rows, labels]
    out = Tensor(np.asarray(losses.mean(), dtype=z2.dtype))
    _ensure_finite("softmax_cross_entropy", out.data)
    probs = ez / sez

    def back(g):
        gz = probs.copy()
        gz[rows, labels] -= 1.0
        gz *= g / z2.shape[0]
        return [(lt, gz if batched else gz[0])]

    record_op(out, back)
    return out


def sigmoid_cross_entropy(logits, label) -> Tensor:
    """Per-class binary cross-entropy of sigmoid(logits) against a one-hot target.

    Fidelity variant of the class loss; summed over classes, mean over a batch.
    """
    lt = _t(logits)
    z2, labels, batched = _rows_and_labels("sigmoid_cross_entropy", lt, label)
    y = np.zeros_like(z2)
    rows = np.arange(z2.shape[0])
    y[rows, labels] = 1.0
    per_elem = np.maximum(z2, 0.0) - z2 * y + np.log1p(np.exp(-np.abs(z2)))
    out = Tensor(np.asarray(per_elem.sum(axis=1).mean(), dtype=z2.dtype))
    _ensure_finite("sigmoid_cross_entropy", out.data)

    def back(g):
        gz = (stable_sigmoid(z2) - y) * (g / z2.shape[0])
        return [(lt, gz if batched else gz[0])]

    record_op(out, back)
    return out

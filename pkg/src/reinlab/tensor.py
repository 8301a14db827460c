"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default). Operations executed while a
Tape is active append a record with the closures needed for the backward
pass; replaying the tape in reverse computes vector-Jacobian products and
accumulates them into ``.grad`` of every tensor that requires gradient.
Gradients accumulate across backward calls; call ``zero_grad`` between
optimizer steps.

A finite-difference oracle (``finite_difference_gradient``) is provided for
verifying the analytic backward rules; it never touches the tape.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_NODE_IDS = itertools.count()
_TAPE_STACK: list["Tape"] = []

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by verification suites)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense n-dimensional float array with graph node identity.

    ``grad`` stays ``None`` until a backward pass deposits into it; tensors
    with ``requires_grad=False`` never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_NODE_IDS)

    @classmethod
    def _wrap(cls, arr, requires_grad):
        """Internal constructor for op outputs; takes ownership of ``arr``."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = next(_NODE_IDS)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data, False)

    def accumulate_grad(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, tape=None):
        """Run reverse-mode accumulation from this scalar root."""
        if tape is None:
            tape = active_tape()
        if tape is None:
            raise ContractError("backward() requires an active or explicit tape")
        tape.backward(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


class Tape:
    """Ordered record of executed operations.

    Execution order is a topological order of the graph, so a single reverse
    sweep visits every recorded node exactly once.
    """

    def __init__(self):
        self._records = []  # (out_node_id, inputs tuple, backward_fn)
        self._tensors = {}  # node_id -> Tensor, for grad flushing

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, inputs, out, backward_fn):
        self._records.append((out.node_id, inputs, backward_fn))
        for t in inputs:
            if t.requires_grad:
                self._tensors[t.node_id] = t

    def backward(self, root):
        """Accumulate d(root)/d(leaf) into ``.grad`` of the requires_grad
        leaves reachable from ``root``.

        Uses a fresh per-call gradient map so repeated calls add their
        contributions instead of compounding stale state. Stored arrays are
        never mutated in place (closures may hand the same buffer, or views
        of it, to several inputs), so accumulation allocates a new array.
        """
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {tuple(root.shape)}"
            )
        grads = {root.node_id: np.ones_like(root.data)}
        for out_id, inputs, backward_fn in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for t, gt in zip(inputs, backward_fn(g)):
                if gt is None or not t.requires_grad:
                    continue
                acc = grads.get(t.node_id)
                grads[t.node_id] = gt if acc is None else acc + gt
        # Entries that were never popped belong to tensors no record produced,
        # i.e. the leaves of this tape.
        for node_id, g in grads.items():
            t = self._tensors.get(node_id)
            if t is not None:
                t.accumulate_grad(g)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(inputs, out, backward_fn):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must be equal or numpy-broadcastable."""
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    rg = a.requires_grad or b.requires_grad
    out = Tensor._wrap(out_data, rg)

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    rg = a.requires_grad or b.requires_grad
    out = Tensor._wrap(out_data, rg)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * b_data, a_data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a_data, b_data.shape) if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (dtype-preserving)."""
    s = float(s)
    out = Tensor._wrap(a.data * s, a.requires_grad)

    def backward(g):
        return (g * s,)

    return _record((a,), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    2-D operands follow the [p,q] x [q,s] -> [p,s] contract; higher-rank
    operands must carry identical leading (stack) dims and are multiplied
    slice-wise. Backward: dA = g @ B^T, dB = A^T @ g.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data, a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(b_data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a_data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record((a, b), out, backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = Tensor._wrap(out_data, a.requires_grad)
    in_shape = a.data.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _record((a,), out, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes (reverse them when ``axes`` is None)."""
    out = Tensor._wrap(np.transpose(a.data, axes), a.requires_grad)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _record((a,), out, backward)


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of rows [start, stop) of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"row_slice expects 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"row_slice [{start}:{stop}] outside {a.shape}")
    out = Tensor._wrap(a.data[start:stop].copy(), a.requires_grad)
    in_shape = a.data.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record((a,), out, backward)


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of columns [start, stop) of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"col_slice expects 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"col_slice [{start}:{stop}] outside {a.shape}")
    out = Tensor._wrap(a.data[:, start:stop].copy(), a.requires_grad)
    in_shape = a.data.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record((a,), out, backward)


def concat(tensors, axis=-1) -> Tensor:
    """Concatenate along ``axis`` (last axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of empty tensor list")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    rg = any(t.requires_grad for t in tensors)
    out = Tensor._wrap(out_data, rg)
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis)
            for i in range(len(extents))
        )

    return _record(tuple(tensors), out, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction.

    Rows are nonnegative and sum to 1; shifting a row's logits by a constant
    leaves its output unchanged.
    """
    if x.ndim < 1:
        raise ShapeError("softmax_rows expects at least 1-D input")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y, x.requires_grad)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record((x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize each trailing-axis row to zero mean / unit variance, then
    apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gamma.data + beta.data, x.requires_grad or gamma.requires_grad or beta.requires_grad)
    gamma_data = gamma.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma_data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record((x, gamma, beta), out, backward)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation (agrees with the erf form to ~1e-3)."""
    xd = x.data
    inner = _GELU_K * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    out = Tensor._wrap(0.5 * xd * (1.0 + t), x.requires_grad)

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_K * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * d,)

    return _record((x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    # z = e^{-|x|} keeps both the value and the derivative exact in the
    # saturated tails: y(1-y) computed directly would flush to zero once
    # y rounds to 1.0, killing gradients instead of shrinking them.
    xd = x.data
    z = np.exp(-np.abs(xd))
    denom = 1.0 + z
    y = np.where(xd >= 0, 1.0 / denom, z / denom)
    out = Tensor._wrap(y, x.requires_grad)

    def backward(g):
        return (g * (z / (denom * denom)),)

    return _record((x,), out, backward)


# ---------------------------------------------------------------------------
# reductions across tensor lists


def stack_max(tensors) -> Tensor:
    """Per-position maximum across a list of same-shape tensors.

    Backward routes each position's gradient to the first tensor attaining
    the maximum (deterministic tie-break).
    """
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack_max of empty tensor list")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack_max: shape {t.shape} != {shape}")
    stacked = np.stack([t.data for t in tensors], axis=0)
    idx = stacked.argmax(axis=0)
    out = Tensor._wrap(stacked.max(axis=0), any(t.requires_grad for t in tensors))

    def backward(g):
        return tuple(
            np.where(idx == i, g, 0.0) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _record(tuple(tensors), out, backward)


def stack_mean(tensors) -> Tensor:
    """Per-position mean across a list of same-shape tensors."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack_mean of empty tensor list")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack_mean: shape {t.shape} != {shape}")
    k = float(len(tensors))
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor._wrap(acc / k, any(t.requires_grad for t in tensors))

    def backward(g):
        gi = g / k
        return tuple(gi if t.requires_grad else None for t in tensors)

    return _record(tuple(tensors), out, backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d scalar tensor."""
    out = Tensor._wrap(x.data.sum(dtype=x.data.dtype).reshape(()), x.requires_grad)
    in_shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g, in_shape).astype(g.dtype, copy=True),)

    return _record((x,), out, backward)


# ---------------------------------------------------------------------------
# loss


def cross_entropy_logits(logits: Tensor, labels, ignore_index=255) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row ``logits``.

    ``labels`` is a plain integer array of shape [P] for logits [P, K];
    entries equal to ``ignore_index`` are excluded from the mean.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [P,K] logits, got {logits.shape}")
    p, k = logits.shape
    if labels.shape != (p,):
        raise ShapeError(f"labels shape {labels.shape} != ({p},)")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: every pixel is ignored")
    lab = labels[valid]
    if lab.min() < 0 or lab.max() >= k:
        raise ContractError(f"labels outside [0,{k}) and != {ignore_index}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0])
    nll = lse[valid] - z[valid, lab]
    out = Tensor._wrap(
        (nll.sum(dtype=z.dtype) / count).reshape(()).astype(z.dtype), logits.requires_grad
    )

    def backward(g):
        grad = np.zeros_like(z)
        grad[valid] = e[valid] / denom[valid]
        grad[valid, lab] -= 1.0
        return (grad * (float(g) / count),)

    return _record((logits,), out, backward)


# ---------------------------------------------------------------------------
# verification oracle


def finite_difference_gradient(f, x: Tensor, h=1e-3) -> Tensor:
    """Central-difference estimate of d f / d x, coordinate by coordinate.

    ``f`` maps a Tensor to a scalar Tensor and must be a pure function of
    ``x``'s values. Runs entirely outside the tape and is therefore an
    independent check of the analytic backward rules.
    """
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad.reshape(x.data.shape), False)


def relative_error(a, b, floor=1e-12):
    """Max-norm relative discrepancy between two same-shape arrays.

    Defined as max|a-b| / max(max|a|, max|b|, floor); used by every
    gradient-check in the test suite so the tolerance means one thing.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0,
              floor)
    return num / den

"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it;
:func:`backward` replays the adjoints in reverse recording order. Outside a
tape the same functions simply compute values, which is how evaluation runs.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import (
    DataFormatError,
    DegenerateInputError,
    DeterminismError,
    DimensionError,
    NumericalError,
    TapeError,
)

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0

_TAPES: list["Tape"] = []


class Tensor:
    """Immutable dense float64 array."""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = _freeze(arr)
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        out.data = _freeze(np.asarray(arr, dtype=np.float64))
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label})"

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


def _freeze(arr):
    if 0 in arr.shape:
        raise DimensionError(f"tensor shape must be positive, got {list(arr.shape)}")
    if not np.isfinite(arr).all():
        raise NumericalError("non-finite value in tensor")
    if arr.flags.writeable:
        if arr.base is not None or not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations.

    ``params`` (optional) fixes the set of named parameters for which
    :func:`backward` reports gradients, zero for the unreachable ones.
    """

    def __init__(self, params=None):
        self.params = params
        self.records = []
        self._outputs = set()
        self.kink_margin = math.inf

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def _record(self, out, inputs, adjoint):
        self.records.append((out, inputs, adjoint))
        self._outputs.add(id(out))

    def _note_kink(self, x):
        self.kink_margin = min(self.kink_margin, float(np.min(np.abs(x))))


def active_tape():
    return _TAPES[-1] if _TAPES else None


def _emit(value, inputs, adjoint):
    out = Tensor._wrap(value)
    tape = active_tape()
    if tape is not None:
        tape._record(out, inputs, adjoint)
    return out


def backward(tape, loss, params=None):
    """Gradients of a scalar ``loss`` with respect to named parameters.

    Returns ``{name: ndarray}``. With ``params`` (or ``tape.params``) every
    parameter of the store is present; otherwise every named leaf reached.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {list(loss.shape)}")
    if id(loss) not in tape._outputs:
        raise TapeError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, adjoint in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, adjoint(g)):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.name is not None:
                leaves[key] = t
    store = params if params is not None else tape.params
    if store is not None:
        return {
            name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64)
            for name, t in store.items()
        }
    return {t.name: np.array(grads[key]) for key, t in leaves.items()}


# ---------------------------------------------------------------- primitives


def constant(x):
    """A value with no inputs, recorded so a constant loss is still on the tape."""
    arr = np.array(x, dtype=np.float64)
    return _emit(arr, (), lambda g: ())


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast"
        ) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c):
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def lerp(low, high, weight):
    """``weight * high + (1 - weight) * low``, clamped to the interval of its ends.

    The clamp only absorbs rounding, so the result lies between ``low`` and
    ``high`` coordinatewise for any weight in [0, 1].
    """
    low, high, weight = as_tensor(low), as_tensor(high), as_tensor(weight)
    if not (low.shape == high.shape == weight.shape):
        raise DimensionError(
            f"lerp: shapes {list(low.shape)}, {list(high.shape)}, {list(weight.shape)} differ"
        )
    diff = high.data - low.data
    value = np.clip(
        low.data + weight.data * diff,
        np.minimum(low.data, high.data),
        np.maximum(low.data, high.data),
    )
    return _emit(
        value,
        (low, high, weight),
        lambda g: (g * (1.0 - weight.data), g * weight.data, g * diff),
    )


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}"
        )
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a, b):
    """Batched matmul: [B, m, k] x [B, k, n] -> [B, m, n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return _emit(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, 1, 2), np.swapaxes(a.data, 1, 2) @ g),
    )


def transpose(a):
    """Swap the last two axes."""
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None):
    shape = a.shape
    value = a.data.sum(axis=axis)

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(value, (a,), adjoint)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    value = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(value, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(a, index):
    """Rows ``a[index]`` along axis 0; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def adjoint(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit(a.data[index], (a,), adjoint)


def segment_sum(a, segments, n_segments):
    """Sum rows of ``a`` into ``n_segments`` buckets given per-row ids."""
    segments = np.asarray(segments, dtype=np.intp)
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)
    return _emit(out, (a,), lambda g: (g[segments],))


def segment_softmax(x, segments, n_segments):
    """Softmax of a 1-D tensor within each segment."""
    segments = np.asarray(segments, dtype=np.intp)
    top = np.full(n_segments, -np.inf)
    np.maximum.at(top, segments, x.data)
    ex = np.exp(x.data - top[segments])
    denom = np.zeros(n_segments)
    np.add.at(denom, segments, ex)
    y = ex / denom[segments]

    def adjoint(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, segments, g * y)
        return (y * (g - dot[segments]),)

    return _emit(y, (x,), adjoint)


def softmax_rows(x):
    """Softmax along the last axis with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def logsumexp_rows(x):
    top = x.data.max(axis=-1, keepdims=True)
    ex = np.exp(x.data - top)
    total = ex.sum(axis=-1, keepdims=True)
    value = (np.log(total) + top)[..., 0]
    soft = ex / total
    return _emit(value, (x,), lambda g: (g[..., None] * soft,))


def _kinked(x):
    tape = active_tape()
    if tape is not None:
        tape._note_kink(x.data)


def relu(x):
    _kinked(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x):
    _kinked(x)
    slope = np.where(x.data > 0, 1.0, LEAKY_SLOPE)
    return _emit(x.data * slope, (x,), lambda g: (g * slope,))


def elu(x):
    neg = x.data <= 0
    ex = np.exp(np.minimum(x.data, 0.0))
    y = np.where(neg, ELU_ALPHA * (ex - 1.0), x.data)
    d = np.where(neg, ELU_ALPHA * ex, 1.0)
    return _emit(y, (x,), lambda g: (g * d,))


def tanh(x):
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    z = x.data
    ez = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x):
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def apply_activation(kind, x):
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(as_tensor(x))


def normalize_rows(x):
    """Scale each row (last axis) to unit L2 norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    y = x.data / norm
    return _emit(
        y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)
    )


def cosine_rows(a, b):
    """Row-wise cosine similarity of two [n, d] tensors -> [n]."""
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes {list(a.shape)} and {list(b.shape)} differ")
    return tsum(mul(normalize_rows(a), normalize_rows(b)), axis=-1)


def cosine_sim(u, v):
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_sim: shapes {list(u.shape)} and {list(v.shape)}")
    d = u.shape[0]
    return reshape(cosine_rows(reshape(u, (1, d)), reshape(v, (1, d))), ())


# ------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable tensors plus Adam state."""

    def __init__(self, values=None):
        self._params = {}
        self._m = {}
        self._v = {}
        self._t = {}
        self.step = 0
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        self._params[name] = Tensor(value, name=name)
        shape = self._params[name].shape
        self._m[name] = np.zeros(shape)
        self._v[name] = np.zeros(shape)
        self._t[name] = 0
        return self._params[name]

    def set(self, name, value):
        old = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise DimensionError(
                f"{name}: new shape {list(value.shape)} != {list(old.shape)}"
            )
        self._params[name] = Tensor(value, name=name)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def moments(self, name):
        return self._m[name], self._v[name], self._t[name]

    def to_arrays(self):
        return {name: t.data for name, t in self._params.items()}

    def copy(self):
        other = ParamStore()
        for name, t in self._params.items():
            other._params[name] = t
            other._m[name] = self._m[name].copy()
            other._v[name] = self._v[name].copy()
            other._t[name] = self._t[name]
        other.step = self.step
        return other

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].data.astype("<f8").tobytes())
        return h.hexdigest()


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place; returns ``params``.

    Parameters whose gradient is identically zero are left untouched.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(
                f"{name}: gradient shape {list(g.shape)} != parameter shape {list(p.shape)}"
            )
        if not np.any(g):
            continue
        t = params._t[name] + 1
        m = beta1 * params._m[name] + (1.0 - beta1) * g
        v = beta2 * params._v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params._m[name], params._v[name], params._t[name] = m, v, t
        params._params[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps), name=name)
    params.step += 1
    return params


def finite_diff_check(closure, params, step=1e-5, floor=1e-8):
    """Worst relative error between tape and central-difference gradients.

    ``closure(params)`` must return a scalar Tensor and be deterministic.
    The relative error is |a - n| / (|a| + |n|) over coordinates where that
    denominator exceeds ``floor``.
    """
    with Tape(params) as tape:
        loss = closure(params)
    analytic = backward(tape, loss)
    base = loss.item()
    if closure(params).item() != base:
        raise DeterminismError("closure returned different values at identical parameters")

    worst = 0.0
    for name in params.names():
        original = params[name].data.copy()
        flat = original.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += step
            params.set(name, bumped.reshape(original.shape))
            up = closure(params).item()
            bumped[i] -= 2 * step
            params.set(name, bumped.reshape(original.shape))
            down = closure(params).item()
            numeric = (up - down) / (2 * step)
            denom = abs(grad[i]) + abs(numeric)
            if denom > floor:
                worst = max(worst, abs(grad[i] - numeric) / denom)
        params.set(name, original)
    return worst


# ------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MMSC-CKPT-1\n"


def write_checkpoint(path, params, meta=None):
    """Manifest of {name, shape, offset} + one little-endian float64 payload."""
    entries = []
    chunks = []
    offset = 0
    for name in params.names():
        arr = params[name].data
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        raw = arr.astype("<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"entries": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path):
    """Returns ``(ParamStore, meta)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise DataFormatError(f"{path}: bad checkpoint magic at byte offset 0")
    pos = len(CKPT_MAGIC)
    if len(blob) < pos + 8:
        raise DataFormatError(f"{path}: truncated header at byte offset {pos}")
    (mlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + mlen:
        raise DataFormatError(f"{path}: truncated manifest at byte offset {pos}")
    try:
        manifest = json.loads(blob[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable manifest at byte offset {pos}") from exc
    payload = blob[pos + mlen :]
    store = ParamStore()
    for entry in manifest["entries"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + 8 * count
        if stop > len(payload):
            raise DataFormatError(
                f"{path}: payload truncated at byte offset {pos + mlen + len(payload)}"
            )
        arr = np.frombuffer(payload[start:stop], dtype="<f8").reshape(entry["shape"])
        store.add(entry["name"], arr.astype(np.float64))
    return store, manifest["meta"]

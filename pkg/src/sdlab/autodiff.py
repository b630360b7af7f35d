"""Minimal reverse-mode autodiff on dense numpy arrays.

A Field wraps a float32 array (float64 is available as a shadow mode for
gradient checks). Operations run eagerly in numpy; when a Tape is active and
an input requires gradients, the op appends an adjoint closure to the tape.
``backward(loss)`` replays the tape in reverse execution order and adds
``d loss / d leaf`` into ``leaf.grad`` for every Field with
``requires_grad=True``. Accumulation is additive: callers clear grads
between optimizer steps.

Design limits, on purpose: no broadcasting beyond scalar-with-array (the
handful of fused ops below carry their own internal layout rules), no
higher-order derivatives, single-threaded tapes.
"""

import numpy as np

from .errors import ContractError, DimensionError

_TAPE_STACK = []


class Field:
    """A dense array with an optional gradient accumulator.

    data is stored row-major in float32 unless an explicit dtype is given.
    grad, when present, always has the same shape as data.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar Field of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A grad-free view of the same data."""
        return Field(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Field(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops, replayable for adjoints.

    Backward traversal visits each record exactly once, in reverse
    execution order; gradient contributions accumulate additively.
    """

    def __init__(self):
        self.records = []  # (out Field, input Fields, adjoint fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, inputs, adjoint in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, ginp in zip(inputs, adjoint(g)):
                if ginp is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ginp
                else:
                    grads[key] = ginp
                    holders[key] = inp
        for key, f in holders.items():
            if f.requires_grad:
                contrib = grads[key]
                f.grad = contrib.copy() if f.grad is None else f.grad + contrib


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss):
    """Accumulate d loss / d leaf into every requires_grad leaf of loss's tape."""
    if loss.tape is None:
        raise ContractError("loss was not produced under an active Tape")
    loss.tape.backward(loss)


def _result(out_data, inputs, adjoint):
    out = Field(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(f.requires_grad for f in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.records.append((out, tuple(inputs), adjoint))
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def assert_finite(field, context=""):
    """Raise NumericAbort if the array holds NaN/Inf (error state by contract)."""
    data = field.data if isinstance(field, Field) else field
    if not np.isfinite(data).all():
        from .errors import NumericAbort

        raise NumericAbort(f"non-finite values{': ' + context if context else ''}")
    return field


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if isinstance(b, (int, float)):
        ad, s = a, float(b)
        out = ad.data + s
        return _result(out, (ad,), lambda g: (g,))
    _same_shape(a, b, "add")
    out = a.data + b.data

    def adjoint(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _result(out, (a, b), adjoint)


def sub(a, b):
    _same_shape(a, b, "sub")
    out = a.data - b.data

    def adjoint(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _result(out, (a, b), adjoint)


def mul(a, b):
    if isinstance(b, (int, float)):
        s = float(b)
        out = a.data * s
        return _result(out, (a,), lambda g: (g * s,))
    _same_shape(a, b, "mul")
    out = a.data * b.data

    def adjoint(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return _result(out, (a, b), adjoint)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------- structural

def reshape(a, shape):
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _result(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(fields, axis):
    fields = list(fields)
    out = np.concatenate([f.data for f in fields], axis=axis)
    sizes = [f.data.shape[axis] for f in fields]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if f.requires_grad else None for p, f in zip(pieces, fields))

    return _result(out, tuple(fields), adjoint)


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    shape = a.data.shape
    return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).astype(a.data.dtype),))


def mean_heads(a):
    """Mean over axis 0 of a 3-d (heads, rows, cols) array."""
    if a.ndim != 3:
        raise DimensionError(f"mean_heads: need 3-d input, got {a.shape}")
    h = a.shape[0]
    out = a.data.mean(axis=0)
    return _result(out, (a,), lambda g: (np.broadcast_to(g / h, a.data.shape).astype(a.data.dtype),))


def embed(table, ids):
    """Row lookup table[ids]; adjoint scatter-adds into the table rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embed: ids must be 1-d, got {ids.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise DimensionError("embed: token id out of vocabulary range")
    out = table.data[ids]

    def adjoint(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(out, (table,), adjoint)


# ----------------------------------------------------------------- contractions

def matmul(a, b):
    """2-d (m,k)@(k,n) or batched 3-d (B,m,k)@(B,k,n) product."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if a.ndim == 2:
        def adjoint(g):
            return (
                g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None,
            )
    else:
        def adjoint(g):
            return (
                g @ b.data.transpose(0, 2, 1) if a.requires_grad else None,
                a.data.transpose(0, 2, 1) @ g if b.requires_grad else None,
            )

    return _result(out, (a, b), adjoint)


def linear(x, w, b=None):
    """x (n, din) @ w (din, dout), plus a per-column bias row when given."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: shape mismatch {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data

    def adjoint(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, adjoint)


def conv1x1(x, w, b=None):
    """Token-mixing 1x1 convolution: out (tout, d) = w (tout, tin) @ x (tin, d).

    The feature axis d is untouched; channels are the token rows. Bias, when
    given, is one value per output token row.
    """
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1x1: shape mismatch w {w.shape} @ x {x.shape}")
    out = w.data @ x.data
    if b is not None:
        if b.data.shape != (w.shape[0],):
            raise DimensionError(f"conv1x1: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data[:, None]

    def adjoint(g):
        gx = w.data.T @ g if x.requires_grad else None
        gw = g @ x.data.T if w.requires_grad else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=1) if b.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, adjoint)


# ------------------------------------------------------------------- softmax

def softmax(x):
    """Numerically stable softmax along the last axis (max-subtraction)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), adjoint)


# --------------------------------------------------------------- activations

def leaky_relu(x, slope=0.01):
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)

    def adjoint(g):
        return (np.where(pos, g, g * slope),)

    return _result(out.astype(x.data.dtype), (x,), adjoint)


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def adjoint(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result(out, (x,), adjoint)


# ------------------------------------------------------------------ 2-d ops

def _im2col(arr, h, w, c):
    padded = np.zeros((h + 2, w + 2, c), dtype=arr.dtype)
    padded[1:h + 1, 1:w + 1] = arr
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # (h, w, c, 3, 3) -> (h*w, 3*3*c) with (ky, kx, c) fastest-varying order
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def conv2d3(x, w, b=None):
    """3x3 same-size convolution on (h, w, cin) with kernel (3, 3, cin, cout)."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d3: shape mismatch x {x.shape}, w {w.shape}")
    h, wd, cin = x.shape
    if h == 0 or wd == 0:
        raise DimensionError("conv2d3: empty input")
    cout = w.shape[3]
    cols = _im2col(x.data, h, wd, cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = cols @ wmat
    if b is not None:
        if b.data.shape != (cout,):
            raise DimensionError(f"conv2d3: bias shape {b.shape} != ({cout},)")
        out = out + b.data

    def adjoint(g):
        gflat = g.reshape(h * wd, cout)
        gw = (cols.T @ gflat).reshape(3, 3, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # full correlation with the flipped kernel
            gcols = _im2col(g, h, wd, cout)
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gx = (gcols @ wflip).reshape(h, wd, cin)
        if b is None:
            return (gx, gw)
        gb = gflat.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out.reshape(h, wd, cout), inputs, adjoint)


def add_channel_bias(x, b):
    """Add a per-channel bias vector (c,) to a (h, w, c) map."""
    if x.ndim != 3 or b.ndim != 1 or b.shape[0] != x.shape[2]:
        raise DimensionError(f"add_channel_bias: {x.shape} + {b.shape}")
    out = x.data + b.data

    def adjoint(g):
        return (
            g if x.requires_grad else None,
            g.sum(axis=(0, 1)) if b.requires_grad else None,
        )

    return _result(out, (x, b), adjoint)


def avg_pool2(x):
    """2x2 mean pooling; spatial extents must be even."""
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: odd extents {x.shape}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def adjoint(g):
        gup = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        return (gup.astype(x.data.dtype),)

    return _result(out, (x,), adjoint)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    if x.ndim != 3:
        raise DimensionError(f"upsample2: need (h, w, c), got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w, c = x.shape

    def adjoint(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return _result(out, (x,), adjoint)


# ------------------------------------------------------------- normalization

def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Per-group normalization over (h, w, group channels) with affine."""
    if x.ndim != 3:
        raise DimensionError(f"group_norm: need (h, w, c), got {x.shape}")
    h, w, c = x.shape
    if c % groups or h * w * (c // groups) < 1:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("group_norm: affine params must be (channels,)")
    cpg = c // groups
    n = h * w * cpg
    xg = x.data.reshape(h * w, groups, cpg)
    mu = xg.sum(axis=(0, 2)) / n
    sq = np.einsum("igc,igc->g", xg, xg, optimize=False) / n
    inv = 1.0 / np.sqrt(sq - mu * mu + eps)
    mu_c = np.repeat(mu, cpg).astype(x.data.dtype)
    inv_c = np.repeat(inv, cpg).astype(x.data.dtype)
    xhat = (x.data - mu_c) * inv_c
    out = xhat * gamma.data + beta.data

    def adjoint(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dg = dxhat.reshape(h * w, groups, cpg)
            m1 = np.repeat(dg.sum(axis=(0, 2)) / n, cpg).astype(x.data.dtype)
            m2 = np.repeat(
                np.einsum("igc,igc->g", dg, xhat.reshape(h * w, groups, cpg)) / n,
                cpg).astype(x.data.dtype)
            gx = ((dxhat - m1 - xhat * m2) * inv_c).astype(x.data.dtype)
        ggamma = (g * xhat).sum(axis=(0, 1)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 1)) if beta.requires_grad else None
        return (gx, ggamma, gbeta)

    return _result(out.astype(x.data.dtype), (x, gamma, beta), adjoint)


def batch_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization of a (rows, features) matrix with affine.

    This is batch norm in the batch-of-one regime used here: each channel is
    a token row, statistics are taken over the feature axis.
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm: need (rows, features), got {x.shape}")
    rows, feats = x.shape
    if feats < 1:
        raise DimensionError("batch_norm: empty feature axis")
    if gamma.data.shape != (rows,) or beta.data.shape != (rows,):
        raise DimensionError("batch_norm: affine params must be (rows,)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[:, None] + beta.data[:, None]

    def adjoint(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[:, None]
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            gx = ((dxhat - m1 - xhat * m2) * inv).astype(x.data.dtype)
        ggamma = (g * xhat).sum(axis=1) if gamma.requires_grad else None
        gbeta = g.sum(axis=1) if beta.requires_grad else None
        return (gx, ggamma, gbeta)

    return _result(out.astype(x.data.dtype), (x, gamma, beta), adjoint)


# ------------------------------------------------------------------- losses

def mse(a, b):
    """Mean of squared differences, as a scalar Field."""
    _same_shape(a, b, "mse")
    if a.size == 0:
        raise DimensionError("mse: empty input")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    scale = 2.0 / a.size

    def adjoint(g):
        base = g * scale * diff
        return (
            base if a.requires_grad else None,
            -base if b.requires_grad else None,
        )

    return _result(out, (a, b), adjoint)


def cross_entropy_logits(logits, target_probs):
    """Soft-target cross entropy of a 1-d logit vector, in nats."""
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy_logits: need 1-d logits, got {logits.shape}")
    t = np.asarray(target_probs, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise DimensionError("cross_entropy_logits: target shape mismatch")
    z = logits.data - logits.data.max()
    logsumexp = np.log(np.exp(z).sum())
    logp = z - logsumexp
    out = np.asarray(-(t * logp).sum(), dtype=logits.data.dtype)
    p = np.exp(logp)

    def adjoint(g):
        return (g * (p * t.sum() - t),)

    return _result(out, (logits,), adjoint)

"""Recorded tensor operations with their local gradient rules.

Binary pointwise ops require identical shapes; the only broadcasts are
explicit, named ops (`add_bias` over the last axis, `outer_add` for
pairwise attention logits). Shape bugs are meant to raise, not to be
papered over by numpy broadcasting.
"""

from __future__ import annotations

import numpy as np

from .tensor import MaskError, ShapeError, Tensor, active_tape


def _emit(op: str, inputs, out_values: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse broadcast axes of ``g`` back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast as stacked matrices.

    Gradients: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast axes).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {list(a.shape)} @ {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:  # incompatible stacked-batch axes
        raise ShapeError(f"matmul batch axes differ: {list(a.shape)} @ {list(b.shape)}") from exc
    ad, bd = a.data, b.data

    def back(g):
        ga = _sum_to_shape(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, back)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), np.transpose(x.data, axes), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}")
    old = x.data.shape

    def back(g):
        return (g.reshape(old),)

    return _emit("reshape", (x,), x.data.reshape(shape), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack of zero tensors")

    def back(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return _emit("stack", tensors, np.stack([t.data for t in tensors], axis=axis), back)


def index_axis(x: Tensor, axis: int, i: int) -> Tensor:
    """Select index ``i`` along ``axis``, dropping that axis."""
    if not 0 <= i < x.shape[axis]:
        raise ShapeError(f"index {i} out of range for axis {axis} of {list(x.shape)}")
    shape = x.data.shape

    def back(g):
        full = np.zeros(shape)
        np.copyto(np.moveaxis(full, axis, 0)[i], g)
        return (full,)

    return _emit("index_axis", (x,), np.ascontiguousarray(np.take(x.data, i, axis=axis)), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along ``axis``."""
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} of {list(x.shape)}")
    shape = x.data.shape

    def back(g):
        full = np.zeros(shape)
        np.copyto(np.moveaxis(full, axis, 0)[start:stop], np.moveaxis(g, axis, 0))
        return (full,)

    sl = np.moveaxis(np.moveaxis(x.data, axis, 0)[start:stop], 0, axis)
    return _emit("slice_axis", (x,), np.ascontiguousarray(sl), back)


# ---------------------------------------------------------------------------
# pointwise

_UNARY = {
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
    "sigmoid": (lambda x: 1.0 / (1.0 + np.exp(-x)), lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "elu": (
        lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))),
        lambda x, y: np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))),
    ),
}

_BINARY = {
    "add": (lambda a, b: a + b, lambda a, b, g: (g, g)),
    "sub": (lambda a, b: a - b, lambda a, b, g: (g, -g)),
    "mul": (lambda a, b: a * b, lambda a, b, g: (g * b, g * a)),
}


def elementwise(tag: str, *args: Tensor, slope: float = 0.2) -> Tensor:
    """Tagged pointwise op: unary activations plus same-shape add/mul/sub."""
    if tag == "leaky_relu":
        return leaky_relu(args[0], slope)
    if tag in _UNARY:
        (x,) = args
        fn, dfn = _UNARY[tag]
        y = fn(x.data)
        xd = x.data

        def back(g, _dfn=dfn, _xd=xd, _y=y):
            return (g * _dfn(_xd, _y),)

        return _emit(tag, (x,), y, back)
    if tag in _BINARY:
        a, b = args
        if a.shape != b.shape:
            raise ShapeError(f"{tag} requires identical shapes, got {list(a.shape)} vs {list(b.shape)}")
        fn, dfn = _BINARY[tag]
        ad, bd = a.data, b.data

        def back(g, _dfn=dfn, _ad=ad, _bd=bd):
            return _dfn(_ad, _bd, g)

        return _emit(tag, (a, b), fn(ad, bd), back)
    raise ValueError(f"unknown elementwise tag {tag!r}; known: "
                     f"{sorted(_UNARY) + sorted(_BINARY) + ['leaky_relu']}")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data

    def back(g):
        return (g * np.where(xd > 0, 1.0, slope),)

    return _emit("leaky_relu", (x,), np.where(xd > 0, xd, slope * xd), back)


def sigmoid(x: Tensor) -> Tensor:
    return elementwise("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return elementwise("tanh", x)


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def elu(x: Tensor) -> Tensor:
    return elementwise("elu", x)


def identity(x: Tensor) -> Tensor:
    return elementwise("identity", x)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)

    def back(g):
        return (g * alpha,)

    return _emit("scale", (x,), x.data * alpha, back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a 1-d bias over all leading axes (the declared broadcast op)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {list(b.shape)} does not match last axis of {list(x.shape)}")
    lead = tuple(range(x.ndim - 1))

    def back(g):
        return g, np.ascontiguousarray(g.sum(axis=lead)) if lead else g.copy()

    return _emit("add_bias", (x, b), x.data + b.data, back)


def outer_add(s: Tensor, r: Tensor) -> Tensor:
    """out[..., v, u] = s[..., v] + r[..., u]; the pairwise-logit broadcast."""
    if s.shape != r.shape:
        raise ShapeError(f"outer_add requires identical shapes, got {list(s.shape)} vs {list(r.shape)}")

    def back(g):
        return np.ascontiguousarray(g.sum(axis=-1)), np.ascontiguousarray(g.sum(axis=-2))

    return _emit("outer_add", (s, r), s.data[..., :, None] + r.data[..., None, :], back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum_all", (x,), np.float64(x.data.sum()), back)


# ---------------------------------------------------------------------------
# structured ops

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction.

    -inf entries act as mask sentinels and come out exactly 0; a row of
    nothing but -inf has no valid target and raises MaskError.
    """
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows needs >=2-d input, got {list(x.shape)}")
    m = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise MaskError("softmax row is fully masked (all -inf)")
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _emit("softmax_rows", (x,), y, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Standardize over the last axis, then apply learned gain and bias."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(
            f"layer_norm gain/bias {list(gain.shape)}/{list(bias.shape)} "
            f"do not match feature width {h}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gd
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g.copy()
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, np.ascontiguousarray(dgain), np.ascontiguousarray(dbias)

    return _emit("layer_norm", (x, gain, bias), xhat * gd + bias.data, back)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def back(g):
        return (g * keep,)

    return _emit("dropout", (x,), x.data * keep, back)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class, via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {list(logits.shape)}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {list(labels.shape)} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    m = logits.data.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=-1))
    rows = np.arange(n)
    loss = np.float64((lse - logits.data[rows, labels]).mean())
    probs = np.exp(logits.data - lse[:, None])

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _emit("cross_entropy", (logits,), loss, back)

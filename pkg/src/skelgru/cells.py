"""Recurrent cells (vanilla, LSTM, GRU) in concatenated-weight form.

Each gate weight is one matrix [h, h+d] applied to the concatenation
[h_prev, x], matching the compact formulation. Steps accept a single
state vector [h] with input [d], or a stack of independent rows [R, h]
with [R, d]; the stacked form is what the model uses to run every
(sample, node) pair in one call.

The update convention for the GRU is h = (1-z) * h_prev + z * h_new,
with z gating the candidate (some libraries swap the two terms).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import apply_activation
from .tensor import ShapeError, Tensor


def _gate_shapes_ok(w: Tensor, b: Tensor, h: int, d: int) -> bool:
    return w.shape == (h, h + d) and b.shape == (h,)


@dataclass
class RNNCellParams:
    """Vanilla cell: state update W_h/b_h plus output projection W_y/b_y."""

    w_h: Tensor
    b_h: Tensor
    w_y: Tensor
    b_y: Tensor
    phi: str = "tanh"
    psi: str = "identity"

    def __post_init__(self):
        h = self.w_h.shape[0]
        d = self.w_h.shape[1] - h
        if d < 1 or not _gate_shapes_ok(self.w_h, self.b_h, h, d):
            raise ShapeError(f"W_h {list(self.w_h.shape)} / b_h {list(self.b_h.shape)} inconsistent")
        o = self.w_y.shape[0]
        if self.w_y.shape != (o, h) or self.b_y.shape != (o,):
            raise ShapeError(f"W_y {list(self.w_y.shape)} / b_y {list(self.b_y.shape)} inconsistent")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_h.shape[1] - self.w_h.shape[0]


@dataclass
class LSTMCellParams:
    """Forget/input/candidate/output gates, all [h, h+d] with [h] biases."""

    w_f: Tensor
    b_f: Tensor
    w_i: Tensor
    b_i: Tensor
    w_c: Tensor
    b_c: Tensor
    w_o: Tensor
    b_o: Tensor

    def __post_init__(self):
        h, d = self.hidden_size, self.input_size
        for w, b in ((self.w_f, self.b_f), (self.w_i, self.b_i),
                     (self.w_c, self.b_c), (self.w_o, self.b_o)):
            if d < 1 or not _gate_shapes_ok(w, b, h, d):
                raise ShapeError(f"gate {list(w.shape)} / {list(b.shape)} inconsistent with h={h}, d={d}")

    @property
    def hidden_size(self) -> int:
        return self.w_f.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_f.shape[1] - self.w_f.shape[0]


@dataclass
class GRUCellParams:
    """Update gate z, reset gate r, candidate h; all [h, h+d] with [h] biases."""

    w_z: Tensor
    b_z: Tensor
    w_r: Tensor
    b_r: Tensor
    w_h: Tensor
    b_h: Tensor

    def __post_init__(self):
        h, d = self.hidden_size, self.input_size
        for w, b in ((self.w_z, self.b_z), (self.w_r, self.b_r), (self.w_h, self.b_h)):
            if d < 1 or not _gate_shapes_ok(w, b, h, d):
                raise ShapeError(f"gate {list(w.shape)} / {list(b.shape)} inconsistent with h={h}, d={d}")

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_z.shape[1] - self.w_z.shape[0]


@dataclass
class HiddenState:
    """Recurrent state: h always, c only for LSTM cells."""

    h: Tensor
    c: Tensor | None = None


def _as_rows(t: Tensor) -> tuple[Tensor, bool]:
    """Lift a vector to a 1-row matrix; remember whether to squeeze back."""
    if t.ndim == 1:
        return ops.reshape(t, (1, t.shape[0])), True
    if t.ndim == 2:
        return t, False
    raise ShapeError(f"expected vector or row stack, got {list(t.shape)}")


def _gate(w: Tensor, b: Tensor, h_rows: Tensor, x_rows: Tensor, act: str) -> Tensor:
    """act(W [h, x] + b) for row-stacked states, via [R, h+d] @ W^T."""
    hx = ops.concat((h_rows, x_rows), axis=-1)
    return apply_activation(act, ops.add_bias(ops.matmul(hx, ops.transpose(w)), b))


def _check_step_shapes(h: int, d: int, h_prev: Tensor, x: Tensor) -> None:
    if h_prev.ndim != x.ndim:
        raise ShapeError(f"state {list(h_prev.shape)} and input {list(x.shape)} rank mismatch")
    if h_prev.shape[-1] != h or x.shape[-1] != d:
        raise ShapeError(
            f"state {list(h_prev.shape)} / input {list(x.shape)} do not match h={h}, d={d}"
        )
    if h_prev.ndim == 2 and h_prev.shape[0] != x.shape[0]:
        raise ShapeError(f"row counts differ: {h_prev.shape[0]} vs {x.shape[0]}")


def rnn_cell_step(p: RNNCellParams, h_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    """h = phi(W_h [h_prev, x] + b_h); y = psi(W_y h + b_y)."""
    _check_step_shapes(p.hidden_size, p.input_size, h_prev, x)
    h_rows, squeeze = _as_rows(h_prev)
    x_rows, _ = _as_rows(x)
    h_new = _gate(p.w_h, p.b_h, h_rows, x_rows, p.phi)
    y = apply_activation(p.psi, ops.add_bias(ops.matmul(h_new, ops.transpose(p.w_y)), p.b_y))
    if squeeze:
        return ops.reshape(h_new, (p.hidden_size,)), ops.reshape(y, (y.shape[-1],))
    return h_new, y


def dense_forward(p: RNNCellParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """The memoryless counterpart: the recurrent block of W_h is ignored,
    so h = phi(W_hx x + b_h) and y = psi(W_y h + b_y)."""
    h = p.hidden_size
    w_hx = ops.slice_axis(p.w_h, 1, h, h + p.input_size)
    x_rows, squeeze = _as_rows(x)
    h_new = apply_activation(p.phi, ops.add_bias(ops.matmul(x_rows, ops.transpose(w_hx)), p.b_h))
    y = apply_activation(p.psi, ops.add_bias(ops.matmul(h_new, ops.transpose(p.w_y)), p.b_y))
    if squeeze:
        return ops.reshape(h_new, (h,)), ops.reshape(y, (y.shape[-1],))
    return h_new, y


def lstm_cell_step(p: LSTMCellParams, h_prev: Tensor, c_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    """Gated memory update: forget/input gates mix c_prev with the tanh
    candidate, and the output gate scales tanh(c_new)."""
    _check_step_shapes(p.hidden_size, p.input_size, h_prev, x)
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"cell state {list(c_prev.shape)} != hidden {list(h_prev.shape)}")
    h_rows, squeeze = _as_rows(h_prev)
    c_rows, _ = _as_rows(c_prev)
    x_rows, _ = _as_rows(x)
    f = _gate(p.w_f, p.b_f, h_rows, x_rows, "sigmoid")
    i = _gate(p.w_i, p.b_i, h_rows, x_rows, "sigmoid")
    c_tilde = _gate(p.w_c, p.b_c, h_rows, x_rows, "tanh")
    c_new = ops.add(ops.mul(f, c_rows), ops.mul(i, c_tilde))
    o = _gate(p.w_o, p.b_o, h_rows, x_rows, "sigmoid")
    h_new = ops.mul(o, ops.tanh(c_new))
    if squeeze:
        h_shape = (p.hidden_size,)
        return ops.reshape(h_new, h_shape), ops.reshape(c_new, h_shape)
    return h_new, c_new


def gru_cell_step(p: GRUCellParams, h_prev: Tensor, x: Tensor) -> Tensor:
    """z and r gates, reset-scaled candidate, then the convex update
    h = (1-z) * h_prev + z * h_new."""
    _check_step_shapes(p.hidden_size, p.input_size, h_prev, x)
    h_rows, squeeze = _as_rows(h_prev)
    x_rows, _ = _as_rows(x)
    z = _gate(p.w_z, p.b_z, h_rows, x_rows, "sigmoid")
    r = _gate(p.w_r, p.b_r, h_rows, x_rows, "sigmoid")
    h_tilde = _gate(p.w_h, p.b_h, ops.mul(r, h_rows), x_rows, "tanh")
    one_minus_z = ops.sub(Tensor(np.ones(z.shape)), z)
    h_new = ops.add(ops.mul(one_minus_z, h_rows), ops.mul(z, h_tilde))
    if squeeze:
        return ops.reshape(h_new, (p.hidden_size,))
    return h_new


def zero_state(kind: str, hidden_size: int, rows: int | None = None) -> HiddenState:
    """All-zero initial state; shaped [h] or [rows, h]."""
    shape = (hidden_size,) if rows is None else (rows, hidden_size)
    h = Tensor(np.zeros(shape))
    if kind == "lstm":
        return HiddenState(h, Tensor(np.zeros(shape)))
    return HiddenState(h)


def unroll(kind: str, params, inputs: Tensor, h0: HiddenState | None = None) -> Tensor:
    """Run a cell along axis 0 of ``inputs`` ([T, d] or [T, R, d]) and stack
    the hidden states ([T, h] or [T, R, h]). One tape spanning the call makes
    backward() differentiate through every step.
    """
    if inputs.ndim not in (2, 3):
        raise ShapeError(f"unroll expects [T, d] or [T, rows, d] inputs, got {list(inputs.shape)}")
    t_len = inputs.shape[0]
    if t_len < 1:
        raise ShapeError("unroll needs at least one time step")
    if kind not in ("rnn", "lstm", "gru"):
        raise ValueError(f"unknown cell kind {kind!r}; known: ['gru', 'lstm', 'rnn']")
    rows = inputs.shape[1] if inputs.ndim == 3 else None
    if h0 is None:
        h0 = zero_state(kind, params.hidden_size, rows)
    if (h0.c is not None) != (kind == "lstm"):
        raise ShapeError("cell state c must be present exactly when kind is 'lstm'")
    h, c = h0.h, h0.c
    states = []
    for t in range(t_len):
        x_t = ops.index_axis(inputs, 0, t)
        if kind == "rnn":
            h, _ = rnn_cell_step(params, h, x_t)
        elif kind == "lstm":
            h, c = lstm_cell_step(params, h, c, x_t)
        else:
            h = gru_cell_step(params, h, x_t)
        states.append(h)
    return ops.stack(states, axis=0)

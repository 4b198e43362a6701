"""Dense tensors with reverse-mode automatic differentiation on a tape.

Every primitive records itself on the currently active ``Tape`` (if any input
wants gradients); ``Tape.backward`` replays the records in exact reverse
order, accumulating adjoints additively. Reverse record order is a valid
topological order because inputs are always recorded before their consumers,
and the single-threaded replay makes gradients bitwise reproducible.

Precision is a configuration, not a type fork: new leaf tensors take the
module default dtype (float32 for training, float64 for gradient checks via
``default_dtype``/``set_default_dtype``), and primitives preserve the dtype
of their inputs.

No broadcasting is performed except adding a bias vector to each row of a
matrix; any other shape mismatch raises ``ShapeError``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created leaf tensors."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _DTYPES:
        raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype


class default_dtype:
    """Context manager pinning the default dtype, e.g. around a grad check."""

    def __init__(self, dtype):
        self._dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


class Tensor:
    """A dense row-major array that can carry a same-shape gradient buffer.

    Leaves created with ``requires_grad=True`` get a zeroed ``grad`` at
    construction; recorded intermediates have ``requires_grad`` flipped on by
    the tape and materialize their buffer lazily during backward. Tensors are
    treated as immutable once they enter a computation (only the optimizer
    updates parameter data, after backward has run).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs: no dtype coercion, no copy.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Ordered record of executed primitives; backward replays it reversed.

    One tape must never be driven from two threads. Tapes do not nest: enter
    one tape at a time, and run decodes or validation passes outside any tape
    so no records accumulate.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward_fn) -> None:
        out.requires_grad = True
        self._records.append((out, backward_fn))

    def clear(self) -> None:
        """Release activation records; parameter values are untouched."""
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every requires_grad ancestor of a scalar loss.

        Parameters not on the path from the loss keep their zero grad.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            g = out.grad
            if g is not None:
                fn(g)


def _tape_for(*tensors: Tensor) -> Tape | None:
    tape = Tape._active
    if tape is None:
        return None
    for t in tensors:
        if t.requires_grad:
            return tape
    return None


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also accepts a vector on either side."""
    ad, bd = a.data, b.data
    ok = (
        (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0])
        or (ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0])
        or (ad.ndim == 1 and bd.ndim == 2 and ad.shape[0] == bd.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor._wrap(ad @ bd)
    tape = _tape_for(a, b)
    if tape is not None:

        def backward(g):
            if a.requires_grad:
                if bd.ndim == 2:
                    _accum(a, g @ bd.T if ad.ndim == 2 else bd @ g)
                else:
                    _accum(a, g[:, None] * bd)
            if b.requires_grad:
                if ad.ndim == 2:
                    _accum(b, ad.T @ g)
                else:
                    _accum(b, ad[:, None] * g)

        tape.record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a (n,) bias may be added to each row of an (m, n)."""
    ad, bd = a.data, b.data
    bias_row = ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]
    if ad.shape != bd.shape and not bias_row:
        raise ShapeError(f"add: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor._wrap(ad + bd)
    tape = _tape_for(a, b)
    if tape is not None:

        def backward(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0) if bias_row else g)

        tape.record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul: incompatible shapes {ad.shape} and {bd.shape}")
    out = Tensor._wrap(ad * bd)
    tape = _tape_for(a, b)
    if tape is not None:

        def backward(g):
            if a.requires_grad:
                _accum(a, g * bd)
            if b.requires_grad:
                _accum(b, g * ad)

        tape.record(out, backward)
    return out


def tanh(x: Tensor) -> Tensor:
    yd = np.tanh(x.data)
    out = Tensor._wrap(yd)
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, g * (1.0 - yd * yd))

        tape.record(out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) form never overflows.
    xd = x.data
    z = np.exp(-np.abs(xd))
    yd = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor._wrap(yd)
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, g * yd * (1.0 - yd))

        tape.record(out, backward)
    return out


def concat(*parts: Tensor) -> Tensor:
    """Concatenate vectors into one vector."""
    if not parts:
        raise ContractError("concat: no inputs")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got shape {p.data.shape}")
    out = Tensor._wrap(np.concatenate([p.data for p in parts]))
    tape = _tape_for(*parts)
    if tape is not None:
        offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

        def backward(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum(p, g[lo:hi])

        tape.record(out, backward)
    return out


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"slice1d: expected a vector, got shape {x.data.shape}")
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice1d: [{start}:{stop}] outside length {n}")
    out = Tensor._wrap(x.data[start:stop].copy())
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += g

        tape.record(out, backward)
    return out


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one per row."""
    if not rows:
        raise ContractError("stack_rows: no inputs")
    width = rows[0].data.shape
    for r in rows:
        if r.data.ndim != 1 or r.data.shape != width:
            raise ShapeError(f"stack_rows: expected vectors of shape {width}")
    out = Tensor._wrap(np.stack([r.data for r in rows]))
    tape = _tape_for(*rows)
    if tape is not None:

        def backward(g):
            for i, r in enumerate(rows):
                if r.requires_grad:
                    _accum(r, g[i])

        tape.record(out, backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.data.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.data.T))
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, g.T)

        tape.record(out, backward)
    return out


def _check_logits(xd: np.ndarray, op: str) -> None:
    if xd.ndim != 1 or xd.shape[0] < 1:
        raise ShapeError(f"{op}: expected a nonempty vector, got shape {xd.shape}")
    if not np.isfinite(xd).all():
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor) -> Tensor:
    """Max-stabilized softmax over a vector."""
    xd = x.data
    _check_logits(xd, "softmax")
    e = np.exp(xd - xd.max())
    yd = e / e.sum()
    out = Tensor._wrap(yd)
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, yd * (g - np.dot(g, yd)))

        tape.record(out, backward)
    return out


def log_softmax(x: Tensor) -> Tensor:
    """Max-stabilized log-softmax over a vector."""
    xd = x.data
    _check_logits(xd, "log_softmax")
    shifted = xd - xd.max()
    yd = shifted - np.log(np.exp(shifted).sum())
    out = Tensor._wrap(yd)
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, g - np.exp(yd) * g.sum())

        tape.record(out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor._wrap(np.asarray(x.data.sum()))
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, np.broadcast_to(g, x.data.shape))

        tape.record(out, backward)
    return out


def add_n(terms: list[Tensor]) -> Tensor:
    """Elementwise sum of same-shape tensors (deterministic order)."""
    if not terms:
        raise ContractError("add_n: no inputs")
    shape = terms[0].data.shape
    for t in terms:
        if t.data.shape != shape:
            raise ShapeError(f"add_n: shapes {shape} and {t.data.shape} differ")
    out = Tensor._wrap(np.sum(np.stack([t.data for t in terms]), axis=0))
    tape = _tape_for(*terms)
    if tape is not None:

        def backward(g):
            for t in terms:
                if t.requires_grad:
                    _accum(t, g)

        tape.record(out, backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python-float constant."""
    out = Tensor._wrap(x.data * c)
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, g * c)

        tape.record(out, backward)
    return out


def pick(x: Tensor, i: int) -> Tensor:
    """Select one entry of a vector, as a scalar tensor."""
    if x.data.ndim != 1:
        raise ShapeError(f"pick: expected a vector, got shape {x.data.shape}")
    if not (0 <= i < x.data.shape[0]):
        raise ShapeError(f"pick: index {i} outside length {x.data.shape[0]}")
    out = Tensor._wrap(np.array(x.data[i]))
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += g

        tape.record(out, backward)
    return out


def row(m: Tensor, i: int) -> Tensor:
    """Copy one row of a matrix (embedding lookup)."""
    if m.data.ndim != 2:
        raise ShapeError(f"row: expected a matrix, got shape {m.data.shape}")
    if not (0 <= i < m.data.shape[0]):
        raise ShapeError(f"row: index {i} outside {m.data.shape[0]} rows")
    out = Tensor._wrap(m.data[i].copy())
    tape = _tape_for(m)
    if tape is not None:

        def backward(g):
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[i] += g

        tape.record(out, backward)
    return out


def lstm_cell(
    x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """Fused LSTM cell update, gate layout [input; forget; output; candidate].

        pre = w_x x + w_h h_prev + b
        i, f, o = sigmoid(pre[:3H]),  g = tanh(pre[3H:])
        c = f * c_prev + i * g,  h = o * tanh(c)

    One tape record instead of the ~17 a composed cell costs; the adjoint is
    hand-derived and held to the same finite-difference oracle as every other
    primitive. The record fires off the hidden output h, reading the cell
    output's accumulated gradient alongside it; if h is disconnected from the
    loss the whole cell is treated as disconnected (which holds whenever c
    only feeds later cells, as in any LSTM unrolling).
    """
    hidden = h_prev.data.shape[0]
    if w_x.data.ndim != 2 or w_x.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"lstm_cell: w_x {w_x.data.shape} does not accept x {x.data.shape}")
    if w_x.data.shape[0] != 4 * hidden or w_h.data.shape != (4 * hidden, hidden):
        raise ShapeError(
            f"lstm_cell: weights {w_x.data.shape}/{w_h.data.shape} do not match "
            f"hidden size {hidden}"
        )
    if b.data.shape != (4 * hidden,) or c_prev.data.shape != (hidden,):
        raise ShapeError("lstm_cell: bias or cell state has the wrong shape")
    pre = w_x.data @ x.data + w_h.data @ h_prev.data + b.data
    zed = np.exp(-np.abs(pre[: 3 * hidden]))
    gates = np.where(pre[: 3 * hidden] >= 0, 1.0 / (1.0 + zed), zed / (1.0 + zed))
    i, f, o = gates[:hidden], gates[hidden : 2 * hidden], gates[2 * hidden :]
    g = np.tanh(pre[3 * hidden :])
    cd = f * c_prev.data + i * g
    tc = np.tanh(cd)
    h = Tensor._wrap(o * tc)
    c = Tensor._wrap(cd)
    tape = _tape_for(x, h_prev, c_prev, w_x, w_h, b)
    if tape is not None:
        c.requires_grad = True

        def backward(gh):
            dc = gh * o * (1.0 - tc * tc)
            if c.grad is not None:
                dc = dc + c.grad
            dpre = np.empty_like(pre)
            dpre[:hidden] = dc * g * i * (1.0 - i)
            dpre[hidden : 2 * hidden] = dc * c_prev.data * f * (1.0 - f)
            dpre[2 * hidden : 3 * hidden] = gh * tc * o * (1.0 - o)
            dpre[3 * hidden :] = dc * i * (1.0 - g * g)
            if b.requires_grad:
                _accum(b, dpre)
            if w_x.requires_grad:
                _accum(w_x, dpre[:, None] * x.data)
            if x.requires_grad:
                _accum(x, w_x.data.T @ dpre)
            if w_h.requires_grad:
                _accum(w_h, dpre[:, None] * h_prev.data)
            if h_prev.requires_grad:
                _accum(h_prev, w_h.data.T @ dpre)
            if c_prev.requires_grad:
                _accum(c_prev, dc * f)

        tape.record(h, backward)
    return h, c


def embed_rows(m: Tensor, ids: list[int]) -> Tensor:
    """Gather matrix rows by index (batched embedding lookup)."""
    if m.data.ndim != 2:
        raise ShapeError(f"embed_rows: expected a matrix, got shape {m.data.shape}")
    n = m.data.shape[0]
    for i in ids:
        if not (0 <= i < n):
            raise ShapeError(f"embed_rows: index {i} outside {n} rows")
    idx = np.asarray(ids, dtype=np.intp)
    out = Tensor._wrap(m.data[idx])
    tape = _tape_for(m)
    if tape is not None:

        def backward(g):
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            np.add.at(m.grad, idx, g)

        tape.record(out, backward)
    return out


def flip_rows(x: Tensor) -> Tensor:
    """Reverse the row order of a matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"flip_rows: expected a matrix, got shape {x.data.shape}")
    out = Tensor._wrap(x.data[::-1].copy())
    tape = _tape_for(x)
    if tape is not None:

        def backward(g):
            _accum(x, g[::-1])

        tape.record(out, backward)
    return out


def hconcat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two matrices along columns."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"hconcat: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor._wrap(np.concatenate([a.data, b.data], axis=1))
    tape = _tape_for(a, b)
    if tape is not None:
        split = a.data.shape[1]

        def backward(g):
            if a.requires_grad:
                _accum(a, g[:, :split])
            if b.requires_grad:
                _accum(b, g[:, split:])

        tape.record(out, backward)
    return out


def lstm_sequence(
    x_mat: Tensor, h0: Tensor, c0: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """Unrolled LSTM over the rows of ``x_mat``; returns (all h rows, last c).

    Equivalent to folding ``lstm_cell`` over the sequence but recorded as one
    primitive: the input projection and the weight gradients become whole-
    sequence matrix products instead of one rank-1 update per step. Same
    record convention as ``lstm_cell``: fires off the stacked hidden output,
    reading the final cell state's gradient alongside.
    """
    if x_mat.data.ndim != 2:
        raise ShapeError(f"lstm_sequence: expected an input matrix, got {x_mat.data.shape}")
    hidden = h0.data.shape[0]
    if w_x.data.shape != (4 * hidden, x_mat.data.shape[1]) or w_h.data.shape != (
        4 * hidden,
        hidden,
    ):
        raise ShapeError(
            f"lstm_sequence: weights {w_x.data.shape}/{w_h.data.shape} do not match "
            f"input width {x_mat.data.shape[1]} and hidden size {hidden}"
        )
    steps = x_mat.data.shape[0]
    pre_x = x_mat.data @ w_x.data.T + b.data  # (steps, 4H)
    w_h_t = w_h.data.T
    gate_i = np.empty((steps, hidden), dtype=pre_x.dtype)
    gate_f = np.empty_like(gate_i)
    gate_o = np.empty_like(gate_i)
    gate_g = np.empty_like(gate_i)
    tanh_c = np.empty_like(gate_i)
    c_prevs = np.empty_like(gate_i)
    hs = np.empty_like(gate_i)
    h = h0.data
    c = c0.data
    for t in range(steps):
        pre = pre_x[t] + h @ w_h_t
        z = np.exp(-np.abs(pre[: 3 * hidden]))
        gates = np.where(pre[: 3 * hidden] >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        i, f, o = gates[:hidden], gates[hidden : 2 * hidden], gates[2 * hidden :]
        g = np.tanh(pre[3 * hidden :])
        c_prevs[t] = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gate_i[t], gate_f[t], gate_o[t], gate_g[t], tanh_c[t], hs[t] = i, f, o, g, tc, h
    out_h = Tensor._wrap(hs)
    out_c = Tensor._wrap(c.copy())
    tape = _tape_for(x_mat, h0, c0, w_x, w_h, b)
    if tape is not None:
        out_c.requires_grad = True

        def backward(g_hs):
            d_pre = np.empty((steps, 4 * hidden), dtype=pre_x.dtype)
            dh = np.zeros(hidden, dtype=pre_x.dtype)
            dc = out_c.grad if out_c.grad is not None else np.zeros(hidden, dtype=pre_x.dtype)
            for t in range(steps - 1, -1, -1):
                gh = g_hs[t] + dh
                i, f, o, g = gate_i[t], gate_f[t], gate_o[t], gate_g[t]
                tc = tanh_c[t]
                dct = gh * o * (1.0 - tc * tc) + dc
                d_pre[t, :hidden] = dct * g * i * (1.0 - i)
                d_pre[t, hidden : 2 * hidden] = dct * c_prevs[t] * f * (1.0 - f)
                d_pre[t, 2 * hidden : 3 * hidden] = gh * tc * o * (1.0 - o)
                d_pre[t, 3 * hidden :] = dct * i * (1.0 - g * g)
                dh = w_h_t @ d_pre[t]
                dc = dct * f
            if b.requires_grad:
                _accum(b, d_pre.sum(axis=0))
            if w_x.requires_grad:
                _accum(w_x, d_pre.T @ x_mat.data)
            if x_mat.requires_grad:
                _accum(x_mat, d_pre @ w_x.data)
            if w_h.requires_grad:
                h_prevs = np.vstack([h0.data[None, :], hs[:-1]])
                _accum(w_h, d_pre.T @ h_prevs)
            if h0.requires_grad:
                _accum(h0, dh)
            if c0.requires_grad:
                _accum(c0, dc)

        tape.record(out_h, backward)
    return out_h, out_c


def grad_check(f, params, eps: float = 1e-4) -> float:
    """Compare analytic gradients of a scalar closure with central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    tensor computed from the given ``(name, Tensor)`` parameters. Returns the
    max over all parameter entries of

        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    A dead parameter yields 0 on both sides and so contributes 0. NaN on
    either side is reported as a failure naming the parameter and entry.
    Run this under float64 (see ``default_dtype``): float32 differencing
    noise swamps the comparison otherwise.
    """
    named = [(name, p) for name, p in params]
    for name, p in named:
        if not p.requires_grad:
            raise ContractError(f"grad_check: parameter {name} has requires_grad=False")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    worst = 0.0
    for name, p in named:
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = f().item()
            flat[i] = saved - eps
            lo = f().item()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic[i])
            if math.isnan(a) or math.isnan(numeric):
                raise NumericError(
                    f"grad_check: NaN at {name}[{i}] (analytic={a}, numeric={numeric})"
                )
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst

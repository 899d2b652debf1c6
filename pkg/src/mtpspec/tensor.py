"""Dense float64 tensors with a reverse-mode gradient tape.

Forward math is plain numpy. While a :class:`Tape` is active, every
primitive that touches a gradient-bearing tensor appends a backward
closure to the tape; ``Tape.backward`` replays those closures in exact
reverse order of forward recording. Without an active tape the same
functions run as ordinary numpy with no recording, which is the
inference fast path.

Everything is float64. Determinism matters more than speed here: the
whole verification story (gradient checks, lossless decoding) leans on
repeated forward passes being bit-identical.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DeterminismError, NumericError, ShapeError, StateError

Array = np.ndarray


class Tensor:
    """A float64 ndarray plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive ops for backward replay.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the (scalar) result. Tapes are one-shot and may
    not nest: construction is single-owner and single-threaded.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StateError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, root: Tensor) -> None:
        """Seed root's gradient with ones and replay the tape reversed."""
        if self._used:
            raise StateError("tape has already been replayed")
        self._used = True
        if not root.requires_grad:
            raise StateError("backward root does not require gradients")
        root.accumulate_grad(np.ones_like(root.data))
        for op in reversed(self._ops):
            op()


def _trace(out: Tensor, *inputs: Tensor) -> "Tape | None":
    """Mark `out` for recording if a tape is active and any input needs grad."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return None
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        return tape
    return None


def _record(tape: "Tape | None", out: Tensor, fn: Callable[[Array], None]) -> Tensor:
    if tape is not None:
        def op():
            if out.grad is not None:
                fn(out.grad)
        tape._ops.append(op)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    tape = _trace(out, a, b)

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return _record(tape, out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    tape = _trace(out, a, b)
    a_data, b_data = a.data, b.data

    def bwd(g):
        a.accumulate_grad(g * b_data)
        b.accumulate_grad(g * a_data)

    return _record(tape, out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    tape = _trace(out, a)

    def bwd(g):
        a.accumulate_grad(g * s)

    return _record(tape, out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched operands must share leading dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = _trace(out, a, b)
    a_data, b_data = a.data, b.data

    def bwd(g):
        a.accumulate_grad(g @ b_data.swapaxes(-1, -2))
        b.accumulate_grad(a_data.swapaxes(-1, -2) @ g)

    return _record(tape, out, bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    tape = _trace(out, a)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate_grad(g.transpose(inverse))

    return _record(tape, out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    out = Tensor(a.data.reshape(shape))
    tape = _trace(out, a)

    def bwd(g):
        a.accumulate_grad(g.reshape(orig))

    return _record(tape, out, bwd)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice rows [start, stop) along the first axis."""
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(f"rows: [{start}, {stop}) outside axis of size {a.data.shape[0]}")
    out = Tensor(a.data[start:stop])
    tape = _trace(out, a)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a.accumulate_grad(full)

    return _record(tape, out, bwd)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_last: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    tape = _trace(out, a, b)
    split = a.data.shape[-1]

    def bwd(g):
        a.accumulate_grad(g[..., :split])
        b.accumulate_grad(g[..., split:])

    return _record(tape, out, bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; backward is a scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be a 1-D sequence")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"token id outside embedding table of size {n_rows}")
    out = Tensor(table.data[ids])
    tape = _trace(out, table)

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _record(tape, out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data))
    tape = _trace(out, a)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, float(g)))

    return _record(tape, out, bwd)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)
    tape = _trace(out, a)
    a_data = a.data

    def bwd(g):
        a.accumulate_grad(g * sig * (1.0 + a_data * (1.0 - sig)))

    return _record(tape, out, bwd)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gamma.

    Each row is divided by sqrt(mean(x^2) + eps) and multiplied
    elementwise by gamma.
    """
    if eps < 0:
        raise ValueError("rms_norm eps must be nonnegative")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,):
        raise ShapeError(f"rms_norm: gamma shape {gamma.data.shape} vs last dim {d}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out = Tensor(normed * gamma.data)
    tape = _trace(out, x, gamma)
    x_data, g_data = x.data, gamma.data

    def bwd(g):
        u = g * g_data
        s = np.sum(u * x_data, axis=-1, keepdims=True)
        x.accumulate_grad(inv * u - (inv ** 3) * x_data * s / d)
        if gamma.requires_grad:
            red = tuple(range(g.ndim - 1))
            gamma.accumulate_grad(np.sum(g * normed, axis=red))

    return _record(tape, out, bwd)


def softmax_last(x: Tensor, mask: Array | None = None) -> Tensor:
    """Numerically stabilized softmax over the last axis.

    `mask` is an additive constant (0 for allowed, -inf for disallowed)
    broadcast onto the scores before the max-subtraction. Rows must keep
    at least one finite entry.
    """
    z = x.data if mask is None else x.data + mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)
    tape = _trace(out, x)

    def bwd(g):
        s = np.sum(g * y, axis=-1, keepdims=True)
        x.accumulate_grad(y * (g - s))

    return _record(tape, out, bwd)


def rope_rotate(x: Tensor, cos: Array, sin: Array) -> Tensor:
    """Rotary position transform on the last axis, split-half pairing.

    The last axis is split into two halves (x1, x2); the output is
    (x1*cos - x2*sin, x1*sin + x2*cos). `cos`/`sin` have shape
    (positions, last_dim/2) and broadcast over leading axes.
    """
    dh = x.data.shape[-1]
    if dh % 2:
        raise ShapeError("rope_rotate needs an even last dimension")
    h = dh // 2
    if cos.shape[-1] != h or sin.shape[-1] != h:
        raise ShapeError("rope tables do not match half width")
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = Tensor(np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1))
    tape = _trace(out, x)

    def bwd(g):
        g1, g2 = g[..., :h], g[..., h:]
        dx1 = g1 * cos + g2 * sin
        dx2 = -g1 * sin + g2 * cos
        x.accumulate_grad(np.concatenate([dx1, dx2], axis=-1))

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# losses


def _log_softmax(z: Array) -> Array:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target: int) -> tuple[float, Array]:
    """Cross-entropy of a single logit row against a target id.

    Returns (loss, gradient wrt the logits). Stand-alone functional form;
    the tape-integrated batched variant is :func:`cross_entropy_rows`.
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("softmax_cross_entropy expects a 1-D logit row")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    if not (0 <= target < z.shape[0]):
        raise IndexError(f"target {target} outside vocabulary of size {z.shape[0]}")
    logp = _log_softmax(z)
    loss = -logp[target]
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(loss), grad


def cross_entropy_rows(logits: Tensor, targets, row_weights) -> Tensor:
    """Weighted sum of per-row cross-entropies, differentiable in logits.

    A weight of zero masks a row out entirely (its tokens never touch
    the loss or the gradient).
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(row_weights, dtype=np.float64)
    n, v = logits.data.shape
    if targets.shape != (n,) or weights.shape != (n,):
        raise ShapeError("targets/row_weights must match the number of logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target id outside vocabulary")
    logp = _log_softmax(logits.data)
    picked = logp[np.arange(n), targets]
    out = Tensor(-np.sum(weights * picked))
    tape = _trace(out, logits)

    def bwd(g):
        probs = np.exp(logp)
        probs[np.arange(n), targets] -= 1.0
        logits.accumulate_grad(float(g) * probs * weights[:, None])

    return _record(tape, out, bwd)


# ---------------------------------------------------------------------------
# attention


def _causal_mask(m: int, s: int, past_len: int) -> Array:
    # query j may attend keys at absolute positions <= past_len + j
    cols = np.arange(s)[None, :]
    q_pos = past_len + np.arange(m)[:, None]
    return np.where(cols <= q_pos, 0.0, -np.inf)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, past_len: int = 0) -> Tensor:
    """Scaled dot-product attention with a strict causal mask.

    q has T query rows; k/v carry past_len + T rows (the already-seen
    stream followed by the new positions). Query j sees keys at
    positions <= past_len + j. Supports an optional leading head axis.
    """
    if past_len < 0:
        raise ValueError("past_len must be nonnegative")
    if k.data.shape != v.data.shape:
        raise ShapeError(f"k/v shapes differ: {k.data.shape} vs {v.data.shape}")
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"head dims differ: {q.data.shape[-1]} vs {k.data.shape[-1]}")
    m, s = q.data.shape[-2], k.data.shape[-2]
    if s != past_len + m:
        raise ShapeError(f"key rows {s} != past_len {past_len} + query rows {m}")
    dh = q.data.shape[-1]
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(dh))
    probs = softmax_last(scores, _causal_mask(m, s, past_len))
    return matmul(probs, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    `loss_fn` must be a deterministic closure over `params` returning a
    scalar Tensor. Every parameter entry is perturbed by +/-eps and the
    numeric derivative (f(t+eps)-f(t-eps))/(2 eps) is compared with the
    recorded gradient. Returns the worst relative error, with the
    denominator floored at 1e-6 so noise on near-zero gradients does not
    dominate.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    params = list(params)

    def evaluate() -> float:
        value = loss_fn().data
        if value.size != 1:
            raise ShapeError("grad_check loss must be a scalar")
        return float(value.reshape(()))

    if evaluate() != evaluate():
        raise DeterminismError("loss_fn returned different values on repeated calls")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(numeric), abs(aflat[i]), 1e-6)
            worst = max(worst, abs(numeric - aflat[i]) / denom)
    return worst

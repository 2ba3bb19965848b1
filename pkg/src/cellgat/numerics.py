"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design: a small explicit op registry instead of operator overloading. Every
op is a module-level function taking the tape as its first argument; passing
``tape=None`` runs forward-only (used for evaluation and for the finite
difference probes in :func:`grad_check`). The op set is deliberately minimal:
it covers exactly what the attention models need (matrix products, gathers,
segment reductions, stable softmaxes, layer norm, dropout) plus an Adagrad
optimizer.

All arrays are float64. Stochastic ops (dropout) take an explicit
``numpy.random.Generator`` so that runs are reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericalError

# Relative errors in grad_check are measured against max(|analytic|,
# |numeric|, GRAD_CHECK_FLOOR); below the floor the comparison is absolute,
# which keeps finite-difference noise on near-zero gradients from reading
# as huge relative error.
GRAD_CHECK_FLOOR = 1e-4


class Tensor:
    """A float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


class TapeNode:
    """One recorded op: kind, input refs, output ref, backward closure."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of ops; backward() walks it in reverse.

    Nodes appear in execution order, so the reverse sweep is a valid
    topological order of the computation.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is not None:
                node.backward(g)


def _maybe_record(tape, op, inputs, out, backward) -> None:
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward)


def _any_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _maybe_record(tape, "matmul", (a, b), out, backward)
    return out


def transpose(tape, x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")
    out = Tensor(x.data.T.copy(), x.requires_grad)

    def backward(g):
        x.accumulate_grad(g.T)

    _maybe_record(tape, "transpose", (x,), out, backward)
    return out


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a 1-D row bias broadcast over 2-D a."""
    if a.data.shape != b.data.shape:
        if not (a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]):
            raise ValueError(f"add shape mismatch: {a.data.shape} + {b.data.shape}")
    out = Tensor(a.data + b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0) if b.data.ndim < g.ndim else g)

    _maybe_record(tape, "add", (a, b), out, backward)
    return out


def add_const(tape, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g)

    _maybe_record(tape, "add_const", (x,), out, backward)
    return out


def scale(tape, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g * c)

    _maybe_record(tape, "scale", (x,), out, backward)
    return out


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} * {b.data.shape}")
    out = Tensor(a.data * b.data, _any_grad(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    _maybe_record(tape, "mul", (a, b), out, backward)
    return out


def scale_rows(tape, x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of 2-D x by scalar s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[0] != s.data.shape[0]:
        raise ValueError(f"scale_rows shape mismatch: {x.data.shape}, {s.data.shape}")
    out = Tensor(x.data * s.data[:, None], _any_grad(x, s))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data[:, None])
        if s.requires_grad:
            s.accumulate_grad((g * x.data).sum(axis=1))

    _maybe_record(tape, "scale_rows", (x, s), out, backward)
    return out


def scale_cols(tape, x: Tensor, s: Tensor) -> Tensor:
    """Multiply column j of 2-D x by scalar s[j]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[1] != s.data.shape[0]:
        raise ValueError(f"scale_cols shape mismatch: {x.data.shape}, {s.data.shape}")
    out = Tensor(x.data * s.data[None, :], _any_grad(x, s))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data[None, :])
        if s.requires_grad:
            s.accumulate_grad((g * x.data).sum(axis=0))

    _maybe_record(tape, "scale_cols", (x, s), out, backward)
    return out


def sum_rows(tape, x: Tensor) -> Tensor:
    """Row sums of 2-D x, returned as a 1-D tensor."""
    if x.data.ndim != 2:
        raise ValueError("sum_rows expects a 2-D operand")
    out = Tensor(x.data.sum(axis=1), x.requires_grad)

    def backward(g):
        x.accumulate_grad(np.repeat(g[:, None], x.data.shape[1], axis=1))

    _maybe_record(tape, "sum_rows", (x,), out, backward)
    return out


def mean_all(tape, x: Tensor) -> Tensor:
    out = Tensor(x.data.mean(), x.requires_grad)
    n = x.data.size

    def backward(g):
        x.accumulate_grad(np.full_like(x.data, float(g) / n))

    _maybe_record(tape, "mean_all", (x,), out, backward)
    return out


def reshape(tape, x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy(), x.requires_grad)

    def backward(g):
        x.accumulate_grad(g.reshape(x.data.shape))

    _maybe_record(tape, "reshape", (x,), out, backward)
    return out


def narrow(tape, x: Tensor, start: int, stop: int) -> Tensor:
    """Slice rows [start, stop) along axis 0."""
    if not (0 <= start < stop <= x.data.shape[0]):
        raise IndexError(f"narrow range [{start}, {stop}) out of bounds")
    out = Tensor(x.data[start:stop].copy(), x.requires_grad)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x.accumulate_grad(full)

    _maybe_record(tape, "narrow", (x,), out, backward)
    return out


def concat_cols(tape, tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_cols needs at least one tensor")
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[0] != tensors[0].data.shape[0]:
            raise ValueError("concat_cols expects 2-D tensors with equal row counts")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), _any_grad(*tensors))
    widths = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    _maybe_record(tape, "concat_cols", tuple(tensors), out, backward)
    return out


def gather_rows(tape, x: Tensor, idx) -> Tensor:
    """Select rows (2-D x) or elements (1-D x) by integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("gather_rows index out of range")
    out = Tensor(x.data[idx], x.requires_grad)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x.accumulate_grad(full)

    _maybe_record(tape, "gather_rows", (x,), out, backward)
    return out


def segment_sum(tape, x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of x into buckets given by the per-row segment ids.

    Accumulation order follows row order, so results are deterministic for a
    fixed input ordering.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if segments.ndim != 1 or segments.shape[0] != x.data.shape[0]:
        raise ValueError("segments must be 1-D and match the leading dim of x")
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise IndexError("segment id out of range")
    shape = (num_segments,) + x.data.shape[1:]
    acc = np.zeros(shape, dtype=np.float64)
    np.add.at(acc, segments, x.data)
    out = Tensor(acc, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g[segments])

    _maybe_record(tape, "segment_sum", (x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def leaky_relu(tape, x: Tensor, slope: float) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, slope * x.data), x.requires_grad)

    def backward(g):
        x.accumulate_grad(g * np.where(pos, 1.0, slope))

    _maybe_record(tape, "leaky_relu", (x,), out, backward)
    return out


def elu(tape, x: Tensor) -> Tensor:
    pos = x.data > 0
    expm1 = np.expm1(np.minimum(x.data, 0.0))
    out = Tensor(np.where(pos, x.data, expm1), x.requires_grad)

    def backward(g):
        x.accumulate_grad(g * np.where(pos, 1.0, expm1 + 1.0))

    _maybe_record(tape, "elu", (x,), out, backward)
    return out


def sigmoid(tape, x: Tensor) -> Tensor:
    # Branch on sign to keep exp() arguments non-positive.
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    val = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(val, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g * val * (1.0 - val))

    _maybe_record(tape, "sigmoid", (x,), out, backward)
    return out


def exp(tape, x: Tensor) -> Tensor:
    val = np.exp(x.data)
    out = Tensor(val, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g * val)

    _maybe_record(tape, "exp", (x,), out, backward)
    return out


def log(tape, x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log requires strictly positive inputs")
    out = Tensor(np.log(x.data), x.requires_grad)

    def backward(g):
        x.accumulate_grad(g / x.data)

    _maybe_record(tape, "log", (x,), out, backward)
    return out


def log_softmax(tape, x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor, stabilised by max subtraction."""
    if x.data.ndim != 2:
        raise ValueError("log_softmax expects a 2-D operand")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    val = shifted - lse
    out = Tensor(val, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g - np.exp(val) * g.sum(axis=1, keepdims=True))

    _maybe_record(tape, "log_softmax", (x,), out, backward)
    return out


def segment_softmax(tape, logits: Tensor, segments, num_segments: int | None = None) -> Tensor:
    """Softmax within segments along axis 0 of a 1-D or 2-D logits tensor.

    Every segment id in [0, num_segments) must occur at least once; the
    per-segment max is subtracted before exponentiation for stability.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if segments.ndim != 1 or segments.shape[0] != logits.data.shape[0]:
        raise ValueError("segments must be 1-D and match the leading dim of logits")
    if segments.size == 0:
        raise ValueError("segment_softmax requires at least one row")
    if num_segments is None:
        num_segments = int(segments.max()) + 1
    counts = np.bincount(segments, minlength=num_segments)
    if np.any(counts == 0):
        raise ValueError("segment_softmax: empty segment")

    x = logits.data
    tail = x.shape[1:]
    mx = np.full((num_segments,) + tail, -np.inf)
    np.maximum.at(mx, segments, x)
    e = np.exp(x - mx[segments])
    denom = np.zeros((num_segments,) + tail)
    np.add.at(denom, segments, e)
    val = e / denom[segments]
    out = Tensor(val, logits.requires_grad)

    def backward(g):
        inner = np.zeros((num_segments,) + tail)
        np.add.at(inner, segments, g * val)
        logits.accumulate_grad(val * (g - inner[segments]))

    _maybe_record(tape, "segment_softmax", (logits,), out, backward)
    return out


def layer_norm(tape, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation of 2-D x followed by elementwise gain and bias."""
    if x.data.ndim != 2:
        raise ValueError("layer_norm expects a 2-D operand")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layer_norm gain/bias must be 1-D of width matching x")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y0 = (x.data - mu) * inv
    out = Tensor(y0 * gain.data + bias.data, _any_grad(x, gain, bias))

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * y0).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=1, keepdims=True)
            m2 = (gy * y0).mean(axis=1, keepdims=True)
            x.accumulate_grad(inv * (gy - m1 - y0 * m2))

    _maybe_record(tape, "layer_norm", (x, gain, bias), out, backward)
    return out


def dropout(tape, x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with probability p, scale kept by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        out = Tensor(x.data.copy(), x.requires_grad)

        def backward_id(g):
            x.accumulate_grad(g)

        _maybe_record(tape, "dropout", (x,), out, backward_id)
        return out
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask, x.requires_grad)

    def backward(g):
        x.accumulate_grad(g * mask)

    _maybe_record(tape, "dropout", (x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# loss


def nll_loss(tape, log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row log-probs."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = log_probs.data.shape
    if labels.shape != (n,):
        raise ValueError("labels must be 1-D matching the rows of log_probs")
    if labels.size == 0:
        raise ValueError("nll_loss requires at least one row")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError("label id out of range")
    picked = log_probs.data[np.arange(n), labels]
    out = Tensor(-picked.mean(), log_probs.requires_grad)

    def backward(g):
        full = np.zeros_like(log_probs.data)
        full[np.arange(n), labels] = -float(g) / n
        log_probs.accumulate_grad(full)

    _maybe_record(tape, "nll_loss", (log_probs,), out, backward)
    return out


# ---------------------------------------------------------------------------
# optimisation


class Adagrad:
    """Adagrad with L2 weight decay folded into the gradient.

    Per step: g = grad + weight_decay * param; accum += g^2;
    param -= lr * g / (sqrt(accum) + eps). step() consumes the gradients
    (clears them) because backward passes accumulate into .grad; without
    the clear, a training loop would sum gradients over its whole history.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0, eps: float = 1e-10):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.accumulators = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, acc in zip(self.params, self.accumulators):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            acc += g * g
            p.data -= self.lr * g / (np.sqrt(acc) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# verification


def grad_check(f, params, h: float = 1e-6) -> float:
    """Worst relative error of tape gradients vs central finite differences.

    ``f(tape)`` must rebuild the forward pass from the current values of
    ``params`` and return a scalar Tensor; it is called once with a live tape
    and then twice per parameter coordinate with ``tape=None``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    tape = Tape()
    loss = f(tape)
    if loss.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise NumericalError("grad_check: non-finite loss")
    tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(None).data.item()
            flat[i] = orig - h
            f_minus = f(None).data.item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError("grad_check: non-finite probe value")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst

"""Dense tensors with a reverse-mode automatic differentiation tape.

A ``Tensor`` wraps a contiguous numpy array (rank 1 to 3) plus an optional
gradient buffer. Operations executed while a ``Tape`` is active append a
node per call; ``backward(loss)`` replays the recorded adjoints in reverse
order and accumulates d(loss)/d(tensor) into every reachable tensor that
carries ``requires_grad``.

Precision is a process-wide switch: 64-bit is the default (and the only mode
in which finite-difference verification is meaningful); 32-bit can be opted
into for faster training runs via :func:`set_precision`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_DTYPE = np.float64


def set_precision(bits: int) -> None:
    """Select the default dtype for newly created tensors (64 or 32)."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ConfigError(f"precision must be 64 or 32, got {bits}")


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


class Tensor:
    """A dense array with shape metadata and an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 3:
            raise ShapeError(f"tensors are rank 1-3, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Convenience operators; these route through the taped ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Used as a context manager::

        with Tape():
            loss = model_loss(...)
        backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    """Temporarily disable recording even if a tape is active."""
    _TAPE_STACK.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        out._tape = tape
        tape.nodes.append(_Node(kind, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record("mul", (a, b), out, backward_fn)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    out = x.data * factor

    def backward_fn(g):
        return (g * factor,)

    return _record("scale", (x,), out, backward_fn)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    return _record("tanh", (x,), y, backward_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # Stable in both tails.
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    y[~pos] = ed / (1.0 + ed)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", (x,), y, backward_fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward_fn(g):
        return (g * y,)

    return _record("exp", (x,), y, backward_fn)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    y = np.log(x.data)

    def backward_fn(g):
        return (g / x.data,)

    return _record("log", (x,), y, backward_fn)


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid,
                "exp": exp, "log": log, "scale": scale}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch to an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)x(k,n), got {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, backward_fn)


def linear(x, w) -> Tensor:
    """Row-major affine map without bias: ``x @ w.T`` with w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear needs (b,in)x(out,in), got {x.shape} x {w.shape}")
    out = x.data @ w.data.T

    def backward_fn(g):
        return g @ w.data, g.T @ x.data

    return _record("linear", (x, w), out, backward_fn)


def sum_all(x) -> Tensor:
    """Total of all entries, as a shape-(1,) scalar tensor."""
    x = as_tensor(x)
    out = x.data.sum().reshape(1)

    def backward_fn(g):
        return (np.full_like(x.data, g[0]),)

    return _record("sum", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, backward_fn)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _record("concat", tuple(parts), out, backward_fn)


def stack(parts: Iterable, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def backward_fn(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.moveaxis(g, axis, 0))

    return _record("stack", tuple(parts), out, backward_fn)


def slice_cols(x, lo: int, hi: int) -> Tensor:
    """Slice the last axis to [lo, hi)."""
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data[..., lo:hi])

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[..., lo:hi] = g
        return (full,)

    return _record("slice_cols", (x,), out, backward_fn)


def select_step(x, t: int) -> Tensor:
    """Pick time step ``t`` from a (batch, steps, dim) tensor."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"select_step needs rank 3, got {x.shape}")
    out = np.ascontiguousarray(x.data[:, t, :])

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[:, t, :] = g
        return (full,)

    return _record("select_step", (x,), out, backward_fn)


def embed(table, ids) -> Tensor:
    """Look up rows of an embedding matrix; ids is an integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        bad = int(ids.reshape(-1)[np.argmax((ids < 0) | (ids >= table.shape[0]))])
        raise IndexError(f"id {bad} out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record("embed", (table,), out, backward_fn)


def rows_dot(mats, vecs) -> Tensor:
    """Per-batch dot of each row of ``mats`` (b,n,d) with ``vecs`` (b,d) -> (b,n)."""
    mats, vecs = as_tensor(mats), as_tensor(vecs)
    if mats.data.ndim != 3 or vecs.data.ndim != 2 or mats.shape[2] != vecs.shape[1]:
        raise ShapeError(f"rows_dot needs (b,n,d)x(b,d), got {mats.shape} x {vecs.shape}")
    out = np.einsum("bnd,bd->bn", mats.data, vecs.data)

    def backward_fn(g):
        dm = g[:, :, None] * vecs.data[:, None, :]
        dv = np.einsum("bn,bnd->bd", g, mats.data)
        return dm, dv

    return _record("rows_dot", (mats, vecs), out, backward_fn)


def rows_mix(weights, mats) -> Tensor:
    """Per-batch weighted sum of rows: (b,n) x (b,n,d) -> (b,d)."""
    weights, mats = as_tensor(weights), as_tensor(mats)
    if weights.data.ndim != 2 or mats.data.ndim != 3 or weights.shape != mats.shape[:2]:
        raise ShapeError(f"rows_mix needs (b,n)x(b,n,d), got {weights.shape} x {mats.shape}")
    out = np.einsum("bn,bnd->bd", weights.data, mats.data)

    def backward_fn(g):
        dw = np.einsum("bd,bnd->bn", g, mats.data)
        dm = weights.data[:, :, None] * g[:, None, :]
        return dw, dm

    return _record("rows_mix", (weights, mats), out, backward_fn)


# ---------------------------------------------------------------------------
# Fused model-level ops
# ---------------------------------------------------------------------------

def softmax_with_temperature(logits, tau) -> Tensor:
    """Temperature-scaled softmax over the last axis.

    Computed stably as softmax((logits - max(logits)) / tau). ``tau`` may be
    a positive float or a tensor broadcastable to one value per row; when it
    is a tensor, gradient flows into it as well as into the logits.
    """
    logits = as_tensor(logits)
    tau_t = tau if isinstance(tau, Tensor) else None
    tau_arr = tau_t.data if tau_t is not None else np.asarray(float(tau))
    if np.any(tau_arr <= 0):
        raise ValueError(f"temperature must be positive, got {tau_arr}")
    if logits.data.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    if tau_t is not None and tau_t.shape not in ((1,), logits.shape[:-1] + (1,)):
        raise ShapeError(f"temperature shape {tau_t.shape} does not match "
                         f"logits shape {logits.shape} (want (1,) or per-row column)")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    # Align tau so it divides row-wise whatever the logits rank.
    tau_b = tau_arr.reshape((1,) * (logits.data.ndim - tau_arr.ndim) + tau_arr.shape) \
        if 0 < tau_arr.ndim < logits.data.ndim else tau_arr
    z = shifted / tau_b
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)

    inputs = (logits,) if tau_t is None else (logits, tau_t)

    def backward_fn(g):
        dz = probs * (g - (g * probs).sum(axis=-1, keepdims=True))
        dlogits = dz / tau_b
        if tau_t is None:
            return (dlogits,)
        dtau = -(dz * z).sum(axis=-1, keepdims=True) / tau_b
        return dlogits, _unbroadcast(dtau, tau_t.shape)

    return _record("softmax_t", inputs, probs, backward_fn)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is (rows, vocab); ``targets`` an integer vector; ``mask`` an
    optional 0/1 vector (padding rows contribute nothing).
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs (rows, vocab) logits, got {logits.shape}")
    rows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != rows:
        raise ShapeError(f"{rows} logit rows but {targets.shape[0]} targets")
    mask_arr = (np.ones(rows) if mask is None
                else np.asarray(mask, dtype=logits.data.dtype).reshape(-1))
    live = mask_arr > 0
    if not live.any():
        raise ValueError("cross_entropy: every position is masked")
    bad = live & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise IndexError(f"target id {int(targets[bad][0])} out of range for vocab {vocab}")

    m = logits.data.max(axis=1, keepdims=True)
    ez = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(ez.sum(axis=1))
    gathered = logits.data[np.arange(rows), np.clip(targets, 0, vocab - 1)]
    n_live = mask_arr.sum()
    out = ((lse - gathered) * mask_arr).sum() / n_live

    def backward_fn(g):
        probs = ez / ez.sum(axis=1, keepdims=True)
        d = probs.copy()
        d[np.arange(rows), np.clip(targets, 0, vocab - 1)] -= 1.0
        d *= (mask_arr / n_live)[:, None] * g[0]
        return (d,)

    return _record("cross_entropy", (logits,), out.reshape(1), backward_fn)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so E[out] == x."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        def backward_fn(g):
            return (g,)
        return _record("dropout_id", (x,), x.data.copy(), backward_fn)

    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    keep /= (1.0 - rate)
    out = x.data * keep

    def backward_fn(g):
        return (g * keep,)

    return _record("dropout", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Repeated calls without zeroing gradients add up (two calls give exactly
    twice the gradients of one).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad += 1.0
        return

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad += g
        holders.pop(id(node.output), None)
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if not t.requires_grad:
                continue
            prev = adjoint.get(id(t))
            # Rebind instead of '+=': backward_fns may return shared arrays.
            adjoint[id(t)] = gi if prev is None else prev + gi
            holders[id(t)] = t
    for tid, g in adjoint.items():
        holders[tid].grad += g


def grad_check_groups(f: Callable[[], Tensor],
                      params: Sequence[tuple[str, Tensor]],
                      epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients,
    reported per named parameter group.

    ``f`` re-evaluates the scalar loss from the current parameter values. The
    relative error for one entry is |a - n| / max(1e-8, |a| + |n|).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ConfigError(f"epsilon must be in [1e-7, 1e-4], got {epsilon}")
    for name, t in params:
        if t.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires 64-bit mode ({name} is {t.data.dtype})")

    for _, t in params:
        t.zero_grad()
    with Tape():
        loss = f()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in params}

    def eval_loss() -> float:
        with no_grad():
            value = f().item()
        if not np.isfinite(value):
            raise NumericError(f"loss is not finite during grad check: {value}")
        return value

    worst: dict[str, float] = {}
    for name, t in params:
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = eval_loss()
            flat[i] = orig - epsilon
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = a_flat[i]
            err = max(err, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
        worst[name] = err
    return worst


def grad_check(f: Callable[[], Tensor],
               params: Sequence[tuple[str, Tensor]],
               epsilon: float = 1e-5) -> float:
    """Max relative error over every entry of every parameter."""
    groups = grad_check_groups(f, params, epsilon)
    return max(groups.values()) if groups else 0.0

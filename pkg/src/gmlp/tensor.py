"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Design constraints, in order of priority:

* correctness checkable by central finite differences (everything float64),
* low per-op Python overhead (the training loops here run hundreds of
  thousands of small steps on CPU), hence a handful of fused primitives
  (``group_linear``, ``batchnorm``, ``cross_entropy_logits``, the pool ops)
  instead of deep compositions,
* no views, no strides, no broadcasting beyond scalars and bias rows.

Storage is always a C-contiguous float64 ``numpy`` array. Ops are free
functions taking the recording :class:`Tape` as first argument; passing
``tape=None`` runs the forward computation without recording (eval mode).
Finite-ness of externally supplied values is validated in the public
``Tensor`` constructor; interior ops raise :class:`DomainError` only where a
domain violation can actually occur (``log``, ``div``, ``softmax_rows``).

A tape is single-use: build it, run forwards, call :meth:`Tape.backward`
once, throw it away. Gradients accumulate into ``Tensor.grad`` and are never
mutated in place, so aliasing between a node's output gradient and its
inputs' gradients is safe.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, GraphError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "relu",
    "maximum",
    "tsum",
    "tmean",
    "sum_squares",
    "softmax_rows",
    "neg_entropy_rows",
    "gather_cols",
    "group_linear",
    "batchnorm",
    "dropout",
    "pool_max",
    "pool_mean",
    "pool_concat",
    "cross_entropy_logits",
]


class Tensor:
    """A dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _raw(data) -> Tensor:
    """Internal fast constructor: wraps an array the op just produced, skipping validation."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; execution order is topological order.

    One backward traversal visits each node exactly once, in reverse. A tape
    may be backpropagated only once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._out_ids: set[int] = set()
        self._used = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple, backward) -> None:
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, backward))
        self._out_ids.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` of every requires_grad tensor reachable from ``loss``."""
        if self._used:
            raise GraphError("tape already backpropagated; build a fresh tape")
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._out_ids:
            raise GraphError("loss was not recorded on this tape (detached graph)")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            grads = node.backward(out_grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g


def _result(tape, data, inputs, backward) -> Tensor:
    out = _raw(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors, (p,q) @ (q,r) -> (p,r)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(tape, ad @ bd, (a, b), backward)


def transpose(tape, a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _result(tape, np.ascontiguousarray(a.data.T), (a,), backward)


def reshape(tape, a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(tape, a.data.reshape(shape), (a,), backward)


# ---------------------------------------------------------------------------
# elementwise ops (shapes equal, or b a scalar / bias row of a 2-D left operand)


def _bcast_backward(a_shape, b_shape, g):
    """Reduce gradient g to b's shape for the supported broadcast forms."""
    if b_shape == a_shape:
        return g
    if b_shape == () or b_shape == (1,):
        return np.asarray(g.sum()).reshape(b_shape)
    # bias row over a 2-D operand
    return g.sum(axis=0)


def _check_bcast(a, b, opname):
    if b.shape == a.shape:
        return
    if b.size == 1:
        return
    if a.data.ndim == 2 and b.shape == (a.shape[1],):
        return
    raise ShapeError(f"{opname}: cannot broadcast {b.shape} to {a.shape}")


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_bcast(a, b, "add")
    ash, bsh = a.shape, b.shape

    def backward(g):
        return g, _bcast_backward(ash, bsh, g)

    return _result(tape, a.data + b.data, (a, b), backward)


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_bcast(a, b, "sub")
    ash, bsh = a.shape, b.shape

    def backward(g):
        return g, -_bcast_backward(ash, bsh, g)

    return _result(tape, a.data - b.data, (a, b), backward)


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_bcast(a, b, "mul")
    ash, bsh = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _bcast_backward(ash, bsh, g * ad)

    return _result(tape, ad * bd, (a, b), backward)


def div(tape, a: Tensor, b: Tensor) -> Tensor:
    _check_bcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    ash, bsh = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return g / bd, _bcast_backward(ash, bsh, -g * ad / (bd * bd))

    return _result(tape, ad / bd, (a, b), backward)


def neg(tape, a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _result(tape, -a.data, (a,), backward)


def scale(tape, a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable python constant."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(tape, a.data * c, (a,), backward)


def exp(tape, a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _result(tape, out_data, (a,), backward)


def log(tape, a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _result(tape, np.log(ad), (a,), backward)


def relu(tape, a: Tensor) -> Tensor:
    """max(x, 0); subgradient at 0 is 0."""
    ad = a.data

    def backward(g):
        return (g * (ad > 0.0),)

    return _result(tape, np.maximum(ad, 0.0), (a,), backward)


def maximum(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of two same-shape tensors; ties route the gradient to a."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    a_wins = ad >= bd

    def backward(g):
        return g * a_wins, g * ~a_wins

    return _result(tape, np.maximum(ad, bd), (a, b), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(tape, a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    ash = a.shape

    def backward(g):
        return (np.broadcast_to(g, ash).copy(),)

    return _result(tape, np.asarray(a.data.sum()), (a,), backward)


def tmean(tape, a: Tensor) -> Tensor:
    n = a.size
    ash = a.shape

    def backward(g):
        return (np.broadcast_to(g / n, ash).copy(),)

    return _result(tape, np.asarray(a.data.mean()), (a,), backward)


def sum_squares(tape, a: Tensor) -> Tensor:
    """sum(a**2) as a scalar; the building block of the L2 penalty."""
    ad = a.data

    def backward(g):
        return (2.0 * g * ad,)

    return _result(tape, np.asarray(np.square(ad).sum()), (a,), backward)


# ---------------------------------------------------------------------------
# fused network primitives


def softmax_rows(tape, a: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of a 2-D tensor at the given temperature.

    Computed with max-subtraction so it stays finite down to very low
    temperatures. Each output row sums to 1. The temperature itself is a
    constant of the op, not a differentiable input.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D, got {a.shape}")
    if not temperature > 0.0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot) / temperature,)

    return _result(tape, s, (a,), backward)


def gather_cols(tape, x: Tensor, idx) -> Tensor:
    """out[:, j] = x[:, idx[j]] for a 2-D x; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_cols expects 2-D, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("gather_cols: index out of range")
    xsh = x.shape

    def backward(g):
        dx = np.zeros(xsh)
        np.add.at(dx, (slice(None), idx), g)
        return (dx,)

    return _result(tape, x.data[:, idx], (x,), backward)


def group_linear(tape, z: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Independent affine map per group: out[:, i, :] = z[:, i, :] @ w[i].T + b[i].

    z is (B, k, p), w is (k, q, p), b is (k, q) or None. No weight is shared
    across groups and no output reads another group's slice.
    """
    if z.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError("group_linear expects z (B,k,p) and w (k,q,p)")
    if z.shape[1] != w.shape[0] or z.shape[2] != w.shape[2]:
        raise ShapeError(f"group_linear: z {z.shape} incompatible with w {w.shape}")
    zd, wd = z.data, w.data
    out = np.einsum("bkp,kqp->bkq", zd, wd)
    if b is not None:
        if b.shape != (w.shape[0], w.shape[1]):
            raise ShapeError(f"group_linear: bias {b.shape} != {(w.shape[0], w.shape[1])}")
        out += b.data

    if b is None:

        def backward(g):
            return (
                np.einsum("bkq,kqp->bkp", g, wd),
                np.einsum("bkq,bkp->kqp", g, zd),
            )

        return _result(tape, out, (z, w), backward)

    def backward(g):
        return (
            np.einsum("bkq,kqp->bkp", g, wd),
            np.einsum("bkq,bkp->kqp", g, zd),
            g.sum(axis=0),
        )

    return _result(tape, out, (z, w, b), backward)


def batchnorm(
    tape,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
) -> Tensor:
    """Per-feature batch normalization over a 2-D (batch, features) tensor.

    Training mode normalizes by batch moments (biased variance) and folds
    them into the running moments in place; eval mode normalizes by the
    running moments so output is independent of batch composition.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects 2-D, got {x.shape}")
    n = x.shape[0]
    if training and n < 2:
        raise DomainError("batchnorm in training mode needs a batch of at least 2")
    xd = x.data
    if training:
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * invstd
    out = gamma.data * xhat + beta.data
    gd = gamma.data

    if training:

        def backward(g):
            dbeta = g.sum(axis=0)
            dgamma = (g * xhat).sum(axis=0)
            dx = (gd * invstd) * (g - dbeta / n - xhat * (dgamma / n))
            return dx, dgamma, dbeta

    else:

        def backward(g):
            dbeta = g.sum(axis=0)
            dgamma = (g * xhat).sum(axis=0)
            return g * (gd * invstd), dgamma, dbeta

    return _result(tape, out, (x, gamma, beta), backward)


def dropout(tape, x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        def backward(g):
            return (g,)

        return _result(tape, x.data.copy(), (x,), backward)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * mask,)

    return _result(tape, x.data * mask, (x,), backward)


def _pool_view(z: Tensor, branching: int):
    if z.data.ndim != 3:
        raise ShapeError(f"pool expects (B, k, m), got {z.shape}")
    n, k, m = z.shape
    if branching < 2:
        raise ShapeError(f"pool branching must be >= 2, got {branching}")
    if k % branching != 0:
        raise ShapeError(f"pool: group count {k} not divisible by branching {branching}")
    kb = k // branching
    # stratum t of output group i is input group t*kb + i, so for branching=2
    # group i merges with group i + k/2
    return z.data.reshape(n, branching, kb, m), n, kb, m


def pool_max(tape, z: Tensor, branching: int) -> Tensor:
    zr, n, kb, m = _pool_view(z, branching)
    am = zr.argmax(axis=1)
    k = z.shape[1]

    def backward(g):
        dzr = np.zeros((n, branching, kb, m))
        np.put_along_axis(dzr, am[:, None, :, :], g[:, None, :, :], axis=1)
        return (dzr.reshape(n, k, m),)

    return _result(tape, zr.max(axis=1), (z,), backward)


def pool_mean(tape, z: Tensor, branching: int) -> Tensor:
    zr, n, kb, m = _pool_view(z, branching)
    k = z.shape[1]

    def backward(g):
        dzr = np.broadcast_to(g[:, None, :, :] / branching, (n, branching, kb, m))
        return (np.ascontiguousarray(dzr).reshape(n, k, m),)

    return _result(tape, zr.mean(axis=1), (z,), backward)


def pool_concat(tape, z: Tensor, branching: int) -> Tensor:
    """Rearrange (B, k, m) into (B, k/b, b*m): each output row i holds its b source groups side by side."""
    zr, n, kb, m = _pool_view(z, branching)
    out = np.ascontiguousarray(zr.transpose(0, 2, 1, 3)).reshape(n, kb, branching * m)
    k = z.shape[1]

    def backward(g):
        gr = g.reshape(n, kb, branching, m).transpose(0, 2, 1, 3)
        return (np.ascontiguousarray(gr).reshape(n, k, m),)

    return _result(tape, out, (z,), backward)


def neg_entropy_rows(tape, a: Tensor) -> Tensor:
    """sum over all entries of p*log(p), with p the row softmax of a at temperature 1.

    The p*log(p) terms use the 0*log(0) = 0 convention, so fully saturated
    rows are exact zeros instead of NaNs; the gradient of that convention is
    likewise exactly zero for vanished entries.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"neg_entropy_rows expects 2-D, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    plogp = np.zeros_like(p)
    pos = p > 0.0
    plogp[pos] = p[pos] * np.log(p[pos])
    row_sums = plogp.sum(axis=1, keepdims=True)

    def backward(g):
        return (g * (plogp - p * row_sums),)

    return _result(tape, np.asarray(plogp.sum()), (a,), backward)


def cross_entropy_logits(tape, logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between row softmax of logits and integer class targets."""
    y = np.asarray(targets)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {y.shape}")
    n, c = logits.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DomainError(f"target label out of range [0, {c})")
    zd = logits.data
    zmax = zd.max(axis=1, keepdims=True)
    ez = np.exp(zd - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = zd - zmax - np.log(sez)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def backward(g):
        p = ez / sez
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _result(tape, np.asarray(loss), (logits,), backward)

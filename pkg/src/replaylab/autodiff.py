"""Reverse-mode autodiff over dense numpy arrays.

The op surface is deliberately closed: only the primitives needed by the
transformer forward pass and the training losses are differentiable
(einsum/matmul, add, mul, gelu, rms_norm, softmax, embedding lookup, log,
exp, sum/mean, rotary rotation, and the two fused loss heads). Tensors are
immutable after construction; a GradientTape records nodes in creation
order so a forward pass can be replayed and non-finite intermediates can
be located.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradientTape",
    "NonFiniteLossError",
    "no_grad",
    "grad",
    "add",
    "mul",
    "matmul",
    "einsum",
    "gelu",
    "log",
    "exp",
    "tensor_sum",
    "tensor_mean",
    "rms_norm",
    "softmax",
    "embedding",
    "rotate_pairs",
    "softmax_cross_entropy",
    "kl_from_reference",
    "finite_difference_grads",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss evaluates to a non-finite scalar."""


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop.

    Data is treated as immutable once the tensor is built. `grad` is
    populated by `backward()` on tensors with `requires_grad=True`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_recompute")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        backward_fn: Callable | None = None,
        recompute: Callable | None = None,
    ):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # 0-d numpy results arrive as scalars; keep their width
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._recompute = recompute
        tape = _ACTIVE_TAPE[-1] if _ACTIVE_TAPE else None
        if tape is not None and op != "leaf":
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar node."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; scalars and ndarrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), _lift(-1.0, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), mul(self, _lift(-1.0, self.dtype)))

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))

    def __getitem__(self, idx: int):
        return index(self, idx)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self.op!r}, requires_grad={self.requires_grad})"


class GradientTape:
    """Records every non-leaf tensor created while active.

    Used to replay a forward pass (determinism checks) and to locate the
    first non-finite intermediate when a loss blows up.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.pop()
        return False

    def replay(self) -> float:
        """Recompute every recorded node in order; returns the final scalar."""
        if not self.nodes:
            raise ValueError("empty tape")
        for node in self.nodes:
            if node._recompute is not None:
                node.data = node._recompute()
        return float(self.nodes[-1].data)

    def first_nonfinite(self) -> Tensor | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                return node
        return None


_ACTIVE_TAPE: list[GradientTape] = []


class _NoGrad:
    def __init__(self):
        self.depth = 0

    def __enter__(self):
        self.depth += 1
        return self

    def __exit__(self, *exc):
        self.depth -= 1
        return False


no_grad = _NoGrad()


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _wants_grad(*parents: Tensor) -> bool:
    if no_grad.depth > 0:
        return False
    return any(p.requires_grad or p._backward is not None for p in parents)


def _make(data, op, parents, backward_fn, recompute):
    if _wants_grad(*parents):
        return Tensor(data, op=op, parents=parents, backward_fn=backward_fn, recompute=recompute)
    return Tensor(data, op=op, recompute=recompute)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), backward, lambda: a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), backward, lambda: a.data * b.data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contraction over the last axis of `a` and second-to-last of `b`."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            a._accumulate(_unbroadcast(np.multiply.outer(g, b.data), a.data.shape))
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g if a.data.ndim > 1 else a.data * g, b.data.shape))
            return
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g if a.data.ndim > 1 else np.multiply.outer(a.data, g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, "matmul", (a, b), backward, lambda: a.data @ b.data)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.

    Every contraction index must appear in the other operand or the
    output, so the gradient of each operand is itself an einsum.
    """
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for sub, other in ((sa, sb), (sb, sa)):
        if len(set(sub)) != len(sub) or any(c not in other + out_sub for c in sub):
            raise ValueError(f"unsupported einsum spec for autodiff: {spec!r}")
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g):
        a._accumulate(np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True))
        b._accumulate(np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True))

    return _make(out, f"einsum[{spec}]", (a, b), backward, lambda: np.einsum(spec, a.data, b.data, optimize=True))


def index(x: Tensor, idx: int) -> Tensor:
    """Select along the leading axis (used to split stacked projections)."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _make(out, f"index[{idx}]", (x,), backward, lambda: x.data[idx])


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-form) GELU."""

    def fwd():
        return (0.5 * x.data * (1.0 + erf(x.data * _INV_SQRT2))).astype(x.data.dtype)

    out = fwd()

    def backward(g):
        cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(out, "gelu", (x,), backward, fwd)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _make(out, "log", (x,), backward, lambda: np.log(x.data))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    node_data = out

    def backward(g):
        x._accumulate(g * node_data)

    return _make(out, "exp", (x,), backward, lambda: np.exp(x.data))


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out, "sum", (x,), backward, lambda: np.asarray(x.data.sum(), dtype=x.data.dtype))


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum() / n, dtype=x.data.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.data.shape))

    return _make(out, "mean", (x,), backward, lambda: np.asarray(x.data.sum() / n, dtype=x.data.dtype))


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) along the last axis; no learnable gain."""

    def fwd():
        ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
        return (x.data / np.sqrt(ms + eps)).astype(x.data.dtype)

    out = fwd()

    def backward(g):
        n = x.data.shape[-1]
        ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
        r = 1.0 / np.sqrt(ms + eps)
        dot = np.sum(x.data * g, axis=-1, keepdims=True)
        x._accumulate(r * g - (r**3 / n) * x.data * dot)

    return _make(out, "rms_norm", (x,), backward, fwd)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax along the last axis; tolerates -inf entries."""

    def fwd():
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    out = fwd()
    y = out

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        x._accumulate(y * (g - dot))

    return _make(out, "softmax", (x,), backward, fwd)


def embedding(weights: Tensor, tokens: np.ndarray) -> Tensor:
    """weights[tokens]; gradient scatters back into the table."""
    tokens = np.asarray(tokens)
    out = weights.data[tokens]

    def backward(g):
        gw = np.zeros_like(weights.data)
        np.add.at(gw, tokens, g)
        weights._accumulate(gw)

    return _make(out, "embedding", (weights,), backward, lambda: weights.data[tokens])


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) feature pairs by the given angles.

    cos/sin broadcast against x's leading axes with the last axis halved.
    The backward pass is the inverse rotation: angles negated.
    """
    if x.data.shape[-1] % 2 != 0:
        raise ValueError(f"rotate_pairs needs an even last axis, got {x.data.shape[-1]}")

    def apply(data, c, s):
        x1 = data[..., 0::2]
        x2 = data[..., 1::2]
        out = np.empty_like(data)
        out[..., 0::2] = x1 * c - x2 * s
        out[..., 1::2] = x1 * s + x2 * c
        return out

    out = apply(x.data, cos, sin)

    def backward(g):
        x._accumulate(apply(g, cos, -sin))

    return _make(out, "rotate_pairs", (x,), backward, lambda: apply(x.data, cos, sin))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target], in nats.

    logits: [..., V]; targets: integer array matching the leading shape;
    mask: {0,1} array matching the leading shape. Max-subtraction keeps the
    log-sum-exp stable under logit shifts.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if targets.shape != logits.data.shape[:-1] or mask.shape != targets.shape:
        raise ValueError(
            f"cross-entropy shape mismatch: logits {logits.data.shape}, "
            f"targets {targets.shape}, mask {mask.shape}"
        )
    v = logits.data.shape[-1]
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError(f"target ids must lie in [0, {v})")
    n_masked = float(mask.sum())
    if n_masked == 0:
        raise ValueError("cross-entropy over an all-zero mask is undefined")

    def fwd():
        z = logits.data
        m = z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z - m).sum(axis=-1)) + m[..., 0]
        tgt = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
        return np.asarray(((lse - tgt) * mask).sum() / n_masked, dtype=z.dtype)

    out = fwd()

    def backward(g):
        z = logits.data
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        p = e / e.sum(axis=-1, keepdims=True)
        np.subtract.at(p, (*np.indices(targets.shape, sparse=True), targets), 1.0)
        logits._accumulate((float(g) / n_masked) * p * mask[..., None])

    return _make(out, "softmax_cross_entropy", (logits,), backward, fwd)


def kl_from_reference(ref_logits: np.ndarray, logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over masked positions of KL(softmax(ref_logits) || softmax(logits)).

    The reference distribution is a constant: gradients flow only through
    `logits`. Returned in nats per masked position.
    """
    mask = np.asarray(mask)
    if ref_logits.shape != logits.data.shape or mask.shape != ref_logits.shape[:-1]:
        raise ValueError(
            f"KL shape mismatch: ref {ref_logits.shape}, logits {logits.data.shape}, mask {mask.shape}"
        )
    n_masked = float(mask.sum())
    if n_masked == 0:
        raise ValueError("KL over an all-zero mask is undefined")
    ref_logp = _log_softmax(ref_logits)
    ref_p = np.exp(ref_logp)

    def fwd():
        logp = _log_softmax(logits.data)
        per_pos = np.where(ref_p > 0, ref_p * (ref_logp - logp), 0.0).sum(axis=-1)
        return np.asarray((per_pos * mask).sum() / n_masked, dtype=logits.data.dtype)

    out = fwd()

    def backward(g):
        q = np.exp(_log_softmax(logits.data))
        logits._accumulate((float(g) / n_masked) * (q - ref_p) * mask[..., None])

    return _make(out, "kl_from_reference", (logits,), backward, fwd)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# gradient driver and verification
# ---------------------------------------------------------------------------


def grad(loss_fn: Callable[[dict], Tensor], params: dict[str, np.ndarray]):
    """Gradients of a scalar loss with respect to a dict of parameter arrays.

    Returns (loss_value, grads) with grads shaped like params. Parameters
    that the loss never touches get zero gradients. A non-finite loss
    raises NonFiniteLossError naming the first non-finite intermediate.
    """
    tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with GradientTape() as tape:
        loss = loss_fn(tparams)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data):
        bad = tape.first_nonfinite()
        where = f"first non-finite intermediate: {bad.op}" if bad is not None else "no intermediate located"
        raise NonFiniteLossError(f"loss is non-finite ({float(loss.data)}); {where}")
    loss.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tparams.items()
    }
    return float(loss.data), grads


def finite_difference_grads(
    loss_fn: Callable[[dict], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    keys: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradients, the independent check on `grad`.

    Evaluates the loss 2 x count(coordinates) times at 64-bit precision;
    only for tiny parameter sets.
    """
    params64 = {k: v.astype(np.float64) for k, v in params.items()}

    def value(p):
        with no_grad:
            out = loss_fn({k: Tensor(v) for k, v in p.items()})
        return float(out.data)

    out = {}
    for k in keys if keys is not None else params64:
        base = params64[k]
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value(params64)
            flat[i] = orig - step
            down = value(params64)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[k] = g
    return out

"""Dense float64 tensor kernel with reverse-mode automatic differentiation.

Implements exactly the operations the document model needs: matrix products,
softmax, layer normalization, GELU, embedding lookups, a fused bias-table
attention, and masked cross-entropy. Gradients are accumulated by walking a
recorded operation graph backwards; every op carries its analytic backward
rule. A finite-difference gradient checker (`grad_check`) is the correctness
contract for the whole kernel.

Everything runs in 64-bit floats and is deterministic: identical inputs
produce bit-identical outputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradReport",
    "ShapeError",
    "NumericError",
    "no_grad",
    "tensor",
    "add",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "embedding",
    "concat",
    "reshape",
    "narrow",
    "scale",
    "attention",
    "cross_entropy",
    "grad_check",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(RuntimeError):
    """A computation produced a non-finite value where finiteness is required."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array node in the autodiff graph.

    Leaf tensors with ``requires_grad=True`` accumulate gradients in ``.grad``
    after ``backward()`` is called on a downstream scalar.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        # Iterative topological order (graphs can be deep).
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg.copy() if pg.base is not None else pg
            elif node.requires_grad:
                node._accumulate(g)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor from array-like data."""
    return Tensor(data, requires_grad=requires_grad)


def _record(out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    """Attach graph edges to `out` if recording is on and any parent needs grad."""
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False  # grads land on leaves, not interior nodes
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _live(parents: Sequence[Tensor]):
    """Parents that participate in the backward pass."""
    return [p for p in parents if p.requires_grad or p._parents]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise sum."""
    out = Tensor(a.data + b.data)

    def backward(g):
        pairs = []
        if a.requires_grad or a._parents:
            pairs.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad or b._parents:
            pairs.append((b, _unbroadcast(g, b.shape)))
        return pairs

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: [(a, g * s)])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: [(a, g.reshape(orig))])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient."""
    parts = [t.data for t in tensors]
    out = Tensor(np.concatenate(parts, axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pairs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                pairs.append((t, g[tuple(idx)]))
        return pairs

    return _record(out, tuple(tensors), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes; backward applies the inverse permutation."""
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation of 0..{a.data.ndim - 1}")
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: [(a, g.transpose(inverse))])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return [(a, full)]

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports the plain 2-D case and the stacked case where `a` has extra
    leading batch axes and `b` is a 2-D weight (the only forms the model
    uses). Inner dimensions must agree.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim != 2:
        raise ShapeError(f"matmul expects (..., m, k) x (k, n), got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    lead = ad.shape[:-1]
    a2 = ad.reshape(-1, ad.shape[-1])
    out = Tensor((a2 @ bd).reshape(*lead, bd.shape[1]))

    def backward(g):
        g2 = g.reshape(-1, bd.shape[1])
        pairs = []
        if a.requires_grad or a._parents:
            pairs.append((a, (g2 @ bd.T).reshape(ad.shape)))
        if b.requires_grad or b._parents:
            pairs.append((b, a2.T @ g2))
        return pairs

    return _record(out, (a, b), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[...] = table[ids[...]]; backward scatter-adds rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return [(table, gt)]

    return _record(out, (table,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return [(a, g * (phi + x * pdf))]

    return _record(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis` (max-subtraction)."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return [(a, p * (g - dot))]

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.data
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        pairs = []
        if gain.requires_grad or gain._parents:
            pairs.append((gain, (g * xhat).reshape(-1, d).sum(axis=0)))
        if bias.requires_grad or bias._parents:
            pairs.append((bias, g.reshape(-1, d).sum(axis=0)))
        if a.requires_grad or a._parents:
            gy = g * gain.data
            gx = inv * (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
            )
            pairs.append((a, gx))
        return pairs

    return _record(out, (a, gain, bias), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or no generator is supplied."""
    if p < 0 or p >= 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _record(out, (a,), lambda g: [(a, g * keep)])


# ---------------------------------------------------------------------------
# fused attention with additive pair biases
# ---------------------------------------------------------------------------


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias_terms: Sequence[tuple[Tensor, np.ndarray]] = (),
    return_weights: bool = False,
):
    """Scaled dot-product attention over [B, heads, S, head_dim] inputs.

    Each bias term is a (table, idx) pair with table [heads, K] and integer
    idx of shape [S, S] or [B, S, S]; table[h, idx] is added to the attention
    logits of head h before the row softmax. Backward accumulates into q, k,
    v and every bias table (per-head bincount over the index alphabet).
    """
    B, H, S, hd = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape} / {k.shape} / {v.shape}")
    inv = 1.0 / math.sqrt(hd)
    scores = np.matmul(q.data, k.data.transpose(0, 1, 3, 2))
    scores *= inv
    for table, idx in bias_terms:
        gathered = table.data[:, idx]  # [H, S, S] or [H, B, S, S]
        if idx.ndim == 2:
            scores += gathered[None]
        else:
            scores += gathered.transpose(1, 0, 2, 3)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    probs = scores  # [B, H, S, S], rows sum to 1
    out = Tensor(np.matmul(probs, v.data))

    def backward(g):
        g_probs = np.matmul(g, v.data.transpose(0, 1, 3, 2))
        dot = np.einsum("bhij,bhij->bhi", probs, g_probs)
        g_probs -= dot[..., None]
        g_probs *= probs
        g_scores = g_probs
        pairs = []
        if v.requires_grad or v._parents:
            pairs.append((v, np.matmul(probs.transpose(0, 1, 3, 2), g)))
        if q.requires_grad or q._parents:
            pairs.append((q, np.matmul(g_scores, k.data) * inv))
        if k.requires_grad or k._parents:
            pairs.append((k, np.matmul(g_scores.transpose(0, 1, 3, 2), q.data) * inv))
        for table, idx in bias_terms:
            if not (table.requires_grad or table._parents):
                continue
            nbins = table.shape[1]
            gt = np.empty_like(table.data)
            if idx.ndim == 2:
                summed = g_scores.sum(axis=0)  # [H, S, S]
                flat = idx.ravel()
                for h in range(H):
                    gt[h] = np.bincount(flat, weights=summed[h].ravel(), minlength=nbins)
            else:
                flat = idx.ravel()
                for h in range(H):
                    gt[h] = np.bincount(
                        flat, weights=g_scores[:, h].ravel(), minlength=nbins
                    )
            pairs.append((table, gt))
        return pairs

    parents = (q, k, v) + tuple(t for t, _ in bias_terms)
    result = _record(out, parents, backward)
    if return_weights:
        return result, probs
    return result


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-probability of `labels` over masked-in positions.

    logits: [N, C]; labels: int [N]; mask: bool [N]. Raises NumericError when
    every position is masked out (the mean would be empty).
    """
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {x.shape}")
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (x.shape[0],) or mask.shape != (x.shape[0],):
        raise ShapeError(
            f"labels/mask must have shape ({x.shape[0]},), got {labels.shape}/{mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        raise NumericError("cross_entropy over an empty mask: every position is masked out")
    sel = labels[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= x.shape[1]):
        raise IndexError(f"label out of range [0, {x.shape[1]})")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    logp = x - m - np.log(z)
    rows = np.nonzero(mask)[0]
    out = Tensor(-logp[rows, sel].sum() / n)

    def backward(g):
        gl = e / z  # softmax
        gl[rows, sel] -= 1.0
        gl *= mask[:, None] * (float(g) / n)
        return [(logits, gl)]

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of a finite-difference check."""

    max_relative_error: float
    checked_parameter_count: int


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords_per_tensor: int = 200,
    seed: int = 0,
) -> GradReport:
    """Compare analytic gradients of the scalar `f()` with central differences.

    For each parameter tensor, up to `max_coords_per_tensor` coordinates
    (at least 200 unless the tensor is smaller) are perturbed by +/- h and the
    numeric slope (f(x+h) - f(x-h)) / 2h is compared against the recorded
    gradient. The relative error uses max(|analytic|, |numeric|, 1e-6) as
    denominator; the floor keeps cancellation noise on near-zero gradients
    (absolute scale ~ machine epsilon x |f| / h) from masquerading as error.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericError("grad_check requires finite parameters")
        p.zero_grad()
    loss = f()
    loss_val = float(loss.data.reshape(-1)[0])
    if not math.isfinite(loss_val):
        raise NumericError(f"loss is non-finite: {loss_val}")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    with no_grad():
        for p, ga in zip(params, analytic):
            n = p.data.size
            count = n if n <= max_coords_per_tensor else max_coords_per_tensor
            coords = np.arange(n) if count == n else rng.choice(n, size=count, replace=False)
            flat = p.data.ravel()
            ga_flat = ga.ravel()
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                up = float(f().data.reshape(-1)[0])
                flat[c] = orig - h
                down = float(f().data.reshape(-1)[0])
                flat[c] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError("non-finite loss during finite differencing")
                numeric = (up - down) / (2.0 * h)
                denom = max(abs(ga_flat[c]), abs(numeric), 1e-6)
                worst = max(worst, abs(ga_flat[c] - numeric) / denom)
                checked += 1
    return GradReport(max_relative_error=worst, checked_parameter_count=checked)

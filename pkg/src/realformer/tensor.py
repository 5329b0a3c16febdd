"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every differentiable op appends one node to the tape owned by its inputs.
``backward`` sweeps the tape once in reverse and returns gradients for the
named leaves only.  Tensors that carry no tape are constants.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

MASK_BIAS = -1e9
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class Tensor:
    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: "Tape | None" = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents, backward, shape=()):
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Tape:
    """Ordered record of the ops executed in one forward pass.

    Node ``i`` is created after all of its parents, so a reverse sweep over
    the list visits nodes in a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise UsageError(f"leaf {name!r} already registered on this tape")
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(_Node((), None, t.shape))
        self.leaves[name] = t.index
        return t

    def parameters(self, store: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Register every entry of ``store`` as a named leaf."""
        return {path: self.leaf(path, value) for path, value in store.items()}

    def record(self, data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(_Node(tuple(parents), backward))
        return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise UsageError("tensors from different tapes cannot be combined")
    return tape


def _make(data, parents, backward) -> Tensor:
    parents = tuple(p if isinstance(p, Tensor) else None for p in parents)
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    linked = tuple(p if p is not None and p.tape is not None else None for p in parents)
    return tape.record(data, linked, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every named leaf."""
    if loss.tape is not tape:
        raise UsageError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    grads: list = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.data)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or pg is None:
                continue
            j = parent.index
            grads[j] = pg if grads[j] is None else grads[j] + pg
    return {
        name: np.zeros(tape.nodes[j].shape) if grads[j] is None else grads[j]
        for name, j in tape.leaves.items()
    }


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: fold batch axes so BLAS sees one large GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[-1])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), back)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), back)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def index(a: Tensor, key) -> Tensor:
    """Advanced indexing (row gathers, embedding lookups); scatter-adds on the way back."""
    src = a.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), back)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    src = a.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.data.size
    return _make(np.mean(a.data), (a,), lambda g: (np.full(src, g / n),))


# --------------------------------------------------------------------------
# neural-network primitives


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis of ``x + mask``; ``mask`` is a constant additive bias."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data if mask is None else x.data + np.asarray(mask, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (_unbroadcast(gx, x.shape),)

    return _make(p, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(
            f"layer_norm parameters {gamma.shape}/{beta.shape} do not match width {h}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), back)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


ACTIVATIONS = {"gelu": gelu, "relu": relu}


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy wants (n, k) logits and n labels, got {logits.shape}, {labels.shape}")
    n = labels.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(loss, (logits,), back)

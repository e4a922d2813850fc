"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward rule that
maps the output gradient to one gradient per parent. ``Tensor.backward`` walks
the recorded graph in reverse topological order and accumulates the result
into ``.grad`` of leaf tensors that require gradients. Leaf gradients keep
accumulating across calls until ``zero_grad`` is invoked.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "GradientCheckError",
    "as_tensor",
    "no_grad",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "erf",
    "tanh",
    "exp",
    "log",
    "concat",
    "broadcast_to",
    "dropout",
    "gradient_check",
    "gradient_errors",
]

LAYER_NORM_EPS = 1e-6

_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class GradientCheckError(RuntimeError):
    """Finite-difference probe produced a non-finite loss."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data, parents, backward, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        live = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = live
        if live:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # -- gradient plumbing -----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every gradient-tracked leaf."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), back, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        if np.isscalar(other):
            c = float(other)
            return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,), "scale")
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self * (1.0 / float(other))
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(a.data / b.data, (a, b), back, "div")

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        p = float(p)
        x = self

        def back(g):
            return (g * p * x.data ** (p - 1.0),)

        return Tensor._from_op(x.data ** p, (x,), back, "pow")

    # -- shape manipulation ---------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, idx) -> "Tensor":
        src = self.shape

        def back(g):
            full = np.zeros(src)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(np.array(self.data[idx]), (self,), back, "slice")

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# kernels


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast.

    A 1-D left operand is treated as a single row vector.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        return matmul(a.reshape(1, a.shape[0]), b).reshape(b.shape[:-2] + (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), back, "matmul")


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed after max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), back, "softmax")


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), back, "layer_norm")


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x, approximate: bool = False) -> Tensor:
    """Gaussian error linear unit ``x * Phi(x)``.

    ``approximate=True`` selects the tanh approximation
    ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.
    """
    x = as_tensor(x)
    v = x.data
    if approximate:
        u = _SQRT_2_OVER_PI * (v + 0.044715 * v ** 3)
        t = np.tanh(u)
        y = 0.5 * v * (1.0 + t)

        def back(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * v * v)
            return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

        return Tensor._from_op(y, (x,), back, "gelu_tanh")

    cdf = 0.5 * (1.0 + _erf(v * _INV_SQRT_2))
    y = v * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return Tensor._from_op(y, (x,), back, "gelu")


def erf(x) -> Tensor:
    x = as_tensor(x)
    y = _erf(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (2.0 / math.sqrt(math.pi)) * np.exp(-x.data ** 2),), "erf")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back, "concat")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return Tensor._from_op(np.broadcast_to(x.data, shape).copy(), (x,),
                           lambda g: (_unbroadcast(g, src),), "broadcast")


def dropout(x, rate: float, rng: "Rng | None" = None, training: bool = False) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; identity unless training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an Rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded PCG64 stream.

    Streams are derived deterministically: ``Rng(seed).child(i)`` always
    yields the same generator for the same ``(seed, i)``, independent of how
    many draws the parent has made.
    """

    def __init__(self, seed: int = 0, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self._key])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self._key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None) -> np.ndarray:
        return self._gen.normal(loc, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# finite-difference checking


def _named(params) -> dict[str, Tensor]:
    if isinstance(params, dict):
        return dict(params)
    return {(p.name or f"param{i}"): p for i, p in enumerate(params)}


def _loss_value(f) -> float:
    out = f()
    return float(out.data) if isinstance(out, Tensor) else float(out)


def gradient_errors(f: Callable[[], Tensor], params, perturbation: float = 1e-5,
                    analytic: dict[str, np.ndarray] | None = None) -> dict[str, float]:
    """Per-parameter max relative error of analytic vs central-difference gradients.

    ``f`` recomputes the scalar loss from the current parameter values.
    ``analytic`` overrides the backward-pass gradients (fault injection).
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    named = _named(params)
    if analytic is None:
        for p in named.values():
            p.zero_grad()
        loss = f()
        if not np.isfinite(loss.data).all():
            raise GradientCheckError("loss is not finite at the base point")
        loss.backward()
        analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)).copy()
                    for k, p in named.items()}
    errors = {}
    for key, p in named.items():
        flat = p.data.reshape(-1)
        ana = np.asarray(analytic[key]).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            up = _loss_value(f)
            flat[i] = orig - perturbation
            down = _loss_value(f)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradientCheckError(f"non-finite loss while perturbing {key}[{i}]")
            num = (up - down) / (2.0 * perturbation)
            err = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, err)
        errors[key] = worst
    return errors


def gradient_check(f: Callable[[], Tensor], params, perturbation: float = 1e-5,
                   analytic: dict[str, np.ndarray] | None = None) -> float:
    """Max relative gradient error over every entry of every parameter."""
    errs = gradient_errors(f, params, perturbation, analytic)
    return max(errs.values()) if errs else 0.0


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]

"""Dense numeric kernel: a small reverse-mode autodiff, SVD, Adam and gradient checking.

Every primitive below records an explicit adjoint closure; layers in the
higher modules are compositions of these primitives.  All arithmetic is
float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_VERSION = 2
# singular values below RANK_RTOL * sigma_1 count as structural zeros
RANK_RTOL = 1e-9


class NumericError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


class SVDConvergenceError(NumericError):
    pass


# --------------------------------------------------------------------------
# reverse-mode tensors
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_owned")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._owned = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # the first incoming array is borrowed; it is copied only if a second one arrives
        if self.grad is None:
            self.grad = g if g.shape == self.data.shape else np.broadcast_to(g, self.data.shape)
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else ())
    if needs:
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back)


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for a 2-D right operand as one GEMM over the flattened leading axes."""
    if x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    return x @ w


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim >= 2:
        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(_mm(g, b.data.T), a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

        return _make(_mm(a.data, b.data), (a, b), back)
    if a.ndim == 2 and b.ndim > 2:
        def back(g):
            if a.requires_grad:
                a._accumulate(np.tensordot(g, b.data, axes=(list(range(g.ndim - 2)) + [g.ndim - 1],
                                                             list(range(b.ndim - 2)) + [b.ndim - 1])))
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return _make(a.data @ b.data, (a, b), back)

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def back(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), back)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def back(g):
        a._accumulate(np.swapaxes(g, i, j))

    return _make(np.swapaxes(a.data, i, j), (a,), back)


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), back)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def back(g):
        a._accumulate(g * keep)

    # np.maximum propagates NaN, so non-finite activations stay visible downstream
    return _make(np.maximum(a.data, 0.0), (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)

    def back(g):
        a._accumulate(g * scale)

    return _make(a.data * scale, (a,), back)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        a._accumulate(g * out)

    return _make(out, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        a._accumulate(2.0 * g * a.data)

    return _make(a.data * a.data, (a,), back)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight.

    Every slice must keep at least one unmasked entry.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        a._accumulate(out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return _make(out, (a,), back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# --------------------------------------------------------------------------
# SVD and nuclear norms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SVDResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S[..., None, :]) @ np.swapaxes(self.V, -1, -2)


def svd(A: np.ndarray) -> SVDResult:
    """Thin SVD ``A = U diag(S) V^T`` with a deterministic sign convention.

    Works on stacks of matrices (leading batch axes).  The sign of each
    singular pair is fixed so that the largest-magnitude entry of ``u_i``
    is positive.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise NumericError("svd: input contains non-finite entries")
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDConvergenceError(f"svd did not converge for shape {A.shape}: {exc}") from exc
    idx = np.argmax(np.abs(U), axis=-2)[..., None, :]
    sign = np.sign(np.take_along_axis(U, idx, axis=-2))
    sign[sign == 0] = 1.0
    U = U * sign
    V = np.swapaxes(Vt, -1, -2) * sign
    return SVDResult(U, S, V)


def _rank_weights(S: np.ndarray, shape: tuple) -> np.ndarray:
    """1 for singular values above the numerical-rank threshold, else 0.

    Directions with numerically zero singular values are arbitrary; the
    minimum-norm subgradient gives them no weight.
    """
    tol = S[..., :1] * RANK_RTOL
    return (S > tol).astype(np.float64)


def nuclear_norm_t(A: Tensor) -> Tensor:
    """Sum of singular values per matrix; (sub)gradient ``U V^T``."""
    res = svd(A.data)
    w = _rank_weights(res.S, A.shape)

    def back(g):
        G = (res.U * (w * g[..., None])[..., None, :]) @ np.swapaxes(res.V, -1, -2)
        A._accumulate(G)

    return _make(res.S.sum(axis=-1), (A,), back)


def log_nuclear_norm_t(A: Tensor, eps: float) -> Tensor:
    """``sum_i log(sigma_i + eps)`` per matrix; gradient ``sum_i u_i v_i^T / (sigma_i + eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    res = svd(A.data)
    w = _rank_weights(res.S, A.shape) / (res.S + eps)

    def back(g):
        G = (res.U * (w * g[..., None])[..., None, :]) @ np.swapaxes(res.V, -1, -2)
        A._accumulate(G)

    return _make(np.log(res.S + eps).sum(axis=-1), (A,), back)


# --------------------------------------------------------------------------
# parameters, Adam, checkpoints
# --------------------------------------------------------------------------


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


class ParamStore:
    """Named float64 parameters with gradient slots and Adam moments.

    Non-trainable entries (e.g. batch-norm running statistics) live here too
    so that a checkpoint captures the whole model; Adam skips them.
    """

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.step = 0
        self._live: list[tuple[str, Tensor]] = []

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = Param(value, trainable)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __setitem__(self, name: str, value) -> None:
        p = self.params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.value.shape}")
        p.value = value.copy()

    def names(self) -> list[str]:
        return list(self.params)

    def tensor(self, name: str) -> Tensor:
        """Leaf tensor for ``name``; its gradient flows back on ``collect_grads``."""
        p = self.params[name]
        t = Tensor(p.value, requires_grad=p.trainable)
        if p.trainable:
            self._live.append((name, t))
        return t

    def collect_grads(self) -> None:
        for name, t in self._live:
            if t.grad is not None:
                self.params[name].grad += t.grad
        self._live.clear()

    def discard_graph(self) -> None:
        self._live.clear()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0
        self._live.clear()

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self.params.items():
            other.params[name] = Param(p.value.copy(), p.trainable, p.grad.copy(), p.m.copy(), p.v.copy())
        other.step = self.step
        return other

    def n_values(self) -> int:
        return sum(p.value.size for p in self.params.values() if p.trainable)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p.value)) for p in self.params.values())

    # checkpoint -----------------------------------------------------------
    def reset_optimizer(self) -> None:
        """Forget Adam moments and the step count, e.g. before a new training phase."""
        self.step = 0
        for p in self.params.values():
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)

    def to_json(self) -> dict:
        """Values plus Adam moments, so that training resumes exactly."""
        params = {}
        for name, p in self.params.items():
            entry = {"shape": list(p.value.shape), "trainable": p.trainable, "values": p.value.ravel().tolist()}
            if p.trainable:
                entry["m"] = p.m.ravel().tolist()
                entry["v"] = p.v.ravel().tolist()
            params[name] = entry
        return {"version": CHECKPOINT_VERSION, "step": self.step, "params": params}

    @classmethod
    def from_json(cls, obj: dict) -> "ParamStore":
        version = obj.get("version")
        if version not in (1, CHECKPOINT_VERSION):
            raise ValueError(f"unsupported checkpoint version {version!r}")
        store = cls()
        for name, entry in obj["params"].items():
            shape = entry["shape"]
            value = np.array(entry["values"], dtype=np.float64).reshape(shape)
            store.add(name, value, trainable=entry.get("trainable", True))
            if "m" in entry:
                store.params[name].m = np.array(entry["m"], dtype=np.float64).reshape(shape)
                store.params[name].v = np.array(entry["v"], dtype=np.float64).reshape(shape)
        # version 1 files carry no moments; a bare step count would skew Adam's bias correction
        store.step = int(obj.get("step", 0)) if version == CHECKPOINT_VERSION else 0
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps_opt: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards.

    A non-finite gradient aborts the whole step before anything is modified.
    """
    trainable = [(n, p) for n, p in params.params.items() if p.trainable]
    for name, p in trainable:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"adam_step: non-finite gradient in {name!r}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for _, p in trainable:
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad * p.grad
        p.value = p.value - lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps_opt)
    params.zero_grad()


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def analytic_grads(f: Callable[[ParamStore], Tensor], params: ParamStore) -> dict[str, np.ndarray]:
    params.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar function")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function value is not finite")
    out.backward()
    params.collect_grads()
    grads = {n: p.grad.copy() for n, p in params.params.items() if p.trainable}
    params.zero_grad()
    return grads


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, probe_count: int = 20,
               rng: np.random.Generator | None = None, step: float = 1e-5,
               floor: float = 1e-8, names: Iterable[str] | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Probes ``probe_count`` random coordinates drawn uniformly over all
    trainable entries (restricted to ``names`` if given).  The relative error
    of a probe is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = analytic_grads(f, params)
    pool = [n for n in (names or grads) if n in grads]
    sizes = np.array([params[n].size for n in pool], dtype=float)
    worst = 0.0
    for _ in range(probe_count):
        name = pool[rng.choice(len(pool), p=sizes / sizes.sum())]
        flat = params.params[name].value.reshape(-1)
        k = int(rng.integers(flat.size))
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(params).data)
        flat[k] = orig - step
        fm = float(f(params).data)
        flat[k] = orig
        params.discard_graph()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite value probing {name}[{k}]")
        num = (fp - fm) / (2.0 * step)
        ana = float(grads[name].reshape(-1)[k])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst

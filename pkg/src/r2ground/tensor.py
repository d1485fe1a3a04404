"""Dense numeric arrays with reverse-mode automatic differentiation.

The engine is deliberately small: numpy holds the payloads, every operation
records a backward closure, and ``Tensor.backward`` walks the graph in
reverse topological order. Reference precision is float64; float32 is an
opt-in fast path. Each forward op verifies its output is finite, so NaN/Inf
surfaces as an error instead of propagating silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs."""


class GraphError(RuntimeError):
    """Autodiff contract violation (e.g. backward on a non-scalar)."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned differing values."""


class DegenerateSliceError(ValueError):
    """A reduction slice has no unmasked entries."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (forward values only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    # cheap screen: any NaN/Inf makes the sum non-finite; a finite array whose
    # sum merely overflowed is cleared by the exact check
    total = float(arr.sum())
    if total - total != 0.0 and not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A numpy-backed tensor that records its computation graph.

    Tensors are immutable after forward construction (ops never write into
    their inputs). ``grad`` is populated by ``backward`` only on nodes with
    ``requires_grad=True``; everything else stays grad-free, which is how the
    frozen-feature contract is enforced.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})\n{self.data}"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar loss into every
        ``requires_grad`` node reachable from it."""
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def _attach(self, parents, backward_fn) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(p for p in parents if p.requires_grad)
            self._backward = backward_fn
        return self

    # -- elementwise arithmetic ----------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data + other.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return out._attach((self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)

        def bw(g):
            self._accumulate(-g)

        return out._attach((self,), bw)

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return out._attach((self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        with np.errstate(all="ignore"):
            out = Tensor(self.data / other.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data**2), other.data.shape)
                )

        return out._attach((self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("power expects a scalar exponent")
        with np.errstate(all="ignore"):
            out = Tensor(self.data**p)

        def bw(g):
            self._accumulate(g * p * self.data ** (p - 1))

        return out._attach((self,), bw)

    def abs(self):
        out = Tensor(np.abs(self.data))

        def bw(g):
            self._accumulate(g * np.sign(self.data))

        return out._attach((self,), bw)

    # -- elementwise transcendental ------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data))

        def bw(g):
            self._accumulate(g * out.data)

        return out._attach((self,), bw)

    def log(self):
        with np.errstate(all="ignore"):
            out = Tensor(np.log(self.data))

        def bw(g):
            self._accumulate(g / self.data)

        return out._attach((self,), bw)

    def sqrt(self):
        with np.errstate(all="ignore"):
            out = Tensor(np.sqrt(self.data))

        def bw(g):
            self._accumulate(g * 0.5 / out.data)

        return out._attach((self,), bw)

    def tanh(self):
        out = Tensor(np.tanh(self.data))

        def bw(g):
            self._accumulate(g * (1.0 - out.data**2))

        return out._attach((self,), bw)

    def sigmoid(self):
        z = np.exp(-np.abs(self.data))
        out = Tensor(np.where(self.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)))

        def bw(g):
            self._accumulate(g * out.data * (1.0 - out.data))

        return out._attach((self,), bw)

    def softplus(self):
        # max(x,0) + log1p(exp(-|x|)) keeps large |x| from overflowing.
        out = Tensor(np.maximum(self.data, 0.0) + np.log1p(np.exp(-np.abs(self.data))))

        def bw(g):
            z = np.exp(-np.abs(self.data))
            sig = np.where(self.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
            self._accumulate(g * sig)

        return out._attach((self,), bw)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape))

        return out._attach((self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape))

        def bw(g):
            self._accumulate(g.reshape(self.data.shape))

        return out._attach((self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes))

        def bw(g):
            self._accumulate(g.transpose(inv))

        return out._attach((self,), bw)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, key):
        out = Tensor(self.data[key])

        def bw(g):
            full = np.zeros_like(self.data)
            full[key] = g
            self._accumulate(full)

        return out._attach((self,), bw)

    def take_rows(self, idx):
        """Gather rows along axis 0 by an integer index array."""
        idx = np.asarray(idx, dtype=np.intp)
        out = Tensor(self.data[idx])

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return out._attach((self,), bw)

    # -- contractions ------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=DEFAULT_DTYPE) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..,M,K] @ b[..,K,N]`` with broadcastable
    batch extents. Gradients are defined for both inputs."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul expects rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"matmul batch extents not broadcastable: {a.shape} vs {b.shape}"
        ) from exc
    out = Tensor(data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return out._attach((a, b), bw)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    ``mask`` (optional, boolean, broadcastable to ``x``; True = keep) is
    applied additively as -inf before normalization, so masked entries come
    out exactly 0 and shapes stay static. A fully masked slice is an error.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise DegenerateSliceError("softmax slice has no unmasked entries")
        shifted = np.where(mask, x.data, -np.inf)
    else:
        shifted = x.data
    m = np.max(shifted, axis=axis, keepdims=True)
    e = np.exp(shifted - m)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor(e / s)

    def bw(g):
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        x._accumulate(out.data * (g - dot))

    return out._attach((x,), bw)


def masked_max(x: Tensor, axis: int, mask=None) -> Tensor:
    """Maximum along ``axis`` over unmasked entries (True = keep).

    Exact ties resolve to the first index; the gradient flows only to the
    winning entry.
    """
    x = as_tensor(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise DegenerateSliceError("max slice has no unmasked entries")
        shifted = np.where(mask, x.data, -np.inf)
    else:
        shifted = x.data
    arg = np.argmax(shifted, axis=axis)
    out_data = np.take_along_axis(shifted, np.expand_dims(arg, axis), axis=axis)
    out = Tensor(np.squeeze(out_data, axis=axis))

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(
            full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        x._accumulate(full)

    return out._attach((x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return out._attach(tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return out._attach(tuple(tensors), bw)


def conv1d(x: Tensor, w: Tensor, bias=None, stride: int = 1, padding=0) -> Tensor:
    """1D convolution of ``x[T, C_in]`` with ``w[kernel, C_in, C_out]``.

    ``padding`` may be an int or ``"same"`` (odd kernels only). Output length
    is ``(T + 2*padding - kernel)//stride + 1``; an empty output is an error.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x[T,C_in], w[k,C_in,C_out]; got {x.shape}, {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"same-padding requires an odd kernel, got {k}")
        padding = (k - 1) // 2
    t_in = x.shape[0]
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(
            f"conv1d input too short: T={t_in} with kernel={k}, stride={stride}, "
            f"padding={padding} yields empty output"
        )
    bias = as_tensor(bias, x.dtype) if bias is not None else None
    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    acc = np.zeros((t_out, c_out), dtype=x.dtype)
    for j in range(k):
        acc += xp[j : j + stride * t_out : stride][:t_out] @ w.data[j]
    if bias is not None:
        acc = acc + bias.data
    out = Tensor(acc)

    def bw(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[j : j + stride * t_out : stride][:t_out] += g @ w.data[j].T
            x._accumulate(dxp[padding : padding + t_in])
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for j in range(k):
                dw[j] = xp[j : j + stride * t_out : stride][:t_out].T @ g
            w._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, w) if bias is None else (x, w, bias)
    return out._attach(parents, bw)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of the scalar function ``f()`` against
    central finite differences over every element of ``params``.

    Returns the max over parameters of
    ``|analytic - central| / (|analytic| + |central| + 1e-12)``. ``f`` must be
    deterministic (checked by double evaluation); force any stochastic layer
    to identity before calling.
    """
    params = list(params)
    v1 = f().item()
    v2 = f().item()
    if v1 != v2:
        raise DeterminismError(
            f"function is not deterministic: {v1!r} != {v2!r}; "
            "disable stochastic layers before gradient checks"
        )
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            flat_ana = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                rel = abs(flat_ana[i] - num) / (abs(flat_ana[i]) + abs(num) + 1e-12)
                worst = max(worst, rel)
    zero_grads(params)
    return worst


class CounterRng:
    """Seeded counter-based random source.

    Every draw keys a fresh Philox stream on (seed, stream, call index), so
    results depend only on the seed and the order of calls, never on global
    state. ``spawn`` derives an independent substream.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) % (1 << 64)
        self.stream = int(stream)
        self.calls = 0

    def _gen(self) -> np.random.Generator:
        key = np.array(
            [self.seed, (self.stream << 32) + self.calls], dtype=np.uint64
        )
        self.calls += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        return self._gen().normal(0.0, scale, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self._gen().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen().choice(n, size=size, replace=replace)

    def spawn(self, tag: int) -> "CounterRng":
        return CounterRng(self.seed, stream=self.stream * 1009 + int(tag) + 1)


@dataclass
class RunContext:
    """Execution context for a forward pass: owns the RNG and the train/eval
    switch that gates stochastic layers (DropPath)."""

    rng: CounterRng = field(default_factory=lambda: CounterRng(0))
    train: bool = False

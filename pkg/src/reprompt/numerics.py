"""Dense float64 tensors with a recorded reverse-mode tape.

Every learnable computation in the package goes through :class:`Tensor`.
Operations record their parents and a local backward rule only when at least
one input requires a gradient, so frozen forwards stay cheap.  Leading batch
dimensions are supported throughout.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
NORM_TOL = 1e-12

_grad_enabled = True


class DegenerateInputError(ValueError):
    """Input has no usable direction (e.g. a zero-norm vector)."""


class NonFiniteError(FloatingPointError):
    """An operation produced or received NaN/Inf."""


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum rules out inf/nan cheaply; the elementwise test settles overflowed sums
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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
        return mul(self, 1.0 / _const(other).data)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = _unbroadcast(_fold(g, b.data.T), a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out = _fold(a.data, b.data) if b.ndim == 2 else a.data @ b.data
    return _make(out, (a, b), bw, "matmul")


def _fold(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for 2-D ``w`` as one GEMM over all leading dims of ``x``."""
    if x.ndim == 2:
        return x @ w
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero where the floor is active."""
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clip_min")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd
    t = x2 * (0.044715 * c)
    t += c
    t *= xd
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        du = x2 * (3 * 0.044715 * c)
        du += c
        du *= xd
        du *= 1.0 - t * t
        du += 1.0 + t
        du *= 0.5
        du *= g
        return (du,)

    return _make(out, (x,), bw, "gelu")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(
        np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes"
    )


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, x.shape),),
        "broadcast_to",
    )


# ---------------------------------------------------------------------------
# fused ops with hand-written backward rules


def softmax(v, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    v = _const(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of empty input")
    _check_finite(v.data, "softmax")
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (v,), bw, "softmax")


def l2_normalize(v, axis: int = -1, tol: float = NORM_TOL) -> Tensor:
    v = _const(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if (norm <= tol).any():
        raise DegenerateInputError("l2_normalize: norm below tolerance")
    out = v.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (v,), bw, "l2_normalize")


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _const(x), _const(gain), _const(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gx_hat = g * gain.data
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layer_norm")


def conv2d(x, kernel, padding: int = 0) -> Tensor:
    """Stride-1 zero-padded 2-D convolution (cross-correlation).

    ``x`` is ``C_in x H x W`` or ``B x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x kh x kw``.
    """
    x, kernel = _const(x), _const(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d: expected (B,)C,H,W input and 4-D kernel")
    B, cin, H, W = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: channel mismatch ({cin} vs kernel {kcin})")
    p = int(padding)
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    K = kernel.data
    # taps whose window lies entirely in the zero padding contribute nothing
    taps = [
        (i, j)
        for i in range(kh)
        for j in range(kw)
        if i + Ho > p and i < p + H and j + Wo > p and j < p + W
    ]
    out = np.zeros((B, cout, Ho * Wo))
    for i, j in taps:
        win = xp[:, :, i : i + Ho, j : j + Wo].reshape(B, cin, Ho * Wo)
        out += K[:, :, i, j] @ win
    out = out.reshape(B, cout, Ho, Wo)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = (g[None] if squeeze else g).reshape(B, cout, Ho * Wo)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(K) if kernel.requires_grad else None
        for i, j in taps:
            if gk is not None:
                win = xp[:, :, i : i + Ho, j : j + Wo].reshape(B, cin, Ho * Wo)
                gk[:, :, i, j] = (g4 @ np.swapaxes(win, 1, 2)).sum(axis=0)
            if gxp is not None:
                gxp[:, :, i : i + Ho, j : j + Wo] += (K[:, :, i, j].T @ g4).reshape(B, cin, Ho, Wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p : p + H, p : p + W]
            gx = gx[0] if squeeze else gx
        return gx, gk

    return _make(out, (x, kernel), bw, "conv2d")


# ---------------------------------------------------------------------------
# tape traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            s = state.get(id(node))
            if s == 2:
                continue
            if s == 1:
                raise GraphError("cycle in gradient graph")
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            child = node._parents[i]
            cs = state.get(id(child))
            if cs == 1:
                raise GraphError("cycle in gradient graph")
            if cs is None and child.requires_grad:
                stack.append((child, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def leaves(root: Tensor) -> list[Tensor]:
    """Learnable leaves reachable from ``root`` through the tape."""
    if not root.requires_grad:
        return []
    return [n for n in _topo_order(root) if n.is_leaf]


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``params``.
    The error for each coordinate is ``|a - fd| / max(1, |a|, |fd|)``.
    ``analytic`` overrides the tape gradients (used to test the checker).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    if analytic is None:
        for p in params:
            p.zero_grad()
        backward(fn())
        analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a = np.asarray(a).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = fn().item()
            flat[i] = orig - step
            with no_grad():
                down = fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            if not (np.isfinite(fd) and np.isfinite(a[i])):
                raise NonFiniteError("grad_check: non-finite gradient")
            err = abs(a[i] - fd) / max(1.0, abs(a[i]), abs(fd))
            worst = max(worst, err)
    return worst


class RngStream:
    """Deterministic generator keyed by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream_id & (2**64 - 1)])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def unit_vectors(self, n: int, d: int) -> np.ndarray:
        v = self._gen.standard_normal((n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

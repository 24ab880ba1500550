"""Small reverse-mode autodiff over numpy arrays.

Only the operators PathoNet needs are provided: dilated conv2d, 2x2 max
pooling, 2x2 stride-2 transposed convolution, relu, add, channel
duplication and mean squared error.  Activations are N x C x H x W,
convolution kernels Cout x Cin x K x K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_FLOATS = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """Raised when a tensor or gradient contains NaN or Inf."""


class ShapeError(ValueError):
    pass


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.type not in _FLOATS:
        arr = arr.astype(np.float32)
    # np.ascontiguousarray would promote 0-d scalars to 1-d
    return arr if arr.flags.c_contiguous else arr.copy()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Array value plus the bookkeeping needed to backpropagate through it.

    ``data`` is float32 unless float64 is passed in explicitly (used for
    gradient checking).  Values are never modified by the operators.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        arr = _as_float_array(data, dtype)
        _check_finite(arr, op or "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'!r})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients are released once propagated.  A loss that does
    not depend on any tracked tensor leaves all gradients untouched.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"gradient of {node.op or 'leaf'}")
        if node._backward is None:
            node.grad = g.astype(node.data.dtype, copy=False) if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` (zeros for tensors off the graph)."""
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    stride: int = 1
    padding: int | None = None
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.dilation < 1 or self.stride < 1:
            raise ValueError("dilation and stride must be positive")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.padding is None:
            object.__setattr__(self, "padding", self.same_padding)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def span(self) -> int:
        """Receptive span of one kernel application along an axis."""
        return 1 + (self.kernel_size - 1) * self.dilation

    @property
    def same_padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.dilation * (self.kernel_size - 1) - 1) // self.stride + 1

    @property
    def n_params(self) -> int:
        k = self.kernel_size
        return self.out_channels * self.in_channels * k * k + (self.out_channels if self.has_bias else 0)


def _columns(xp: np.ndarray, k: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, shape=(c, k, k, n, ho, wo),
                      strides=(sc, d * sh, d * sw, sn, s * sh, s * sw), writeable=False)
    return view.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dilated 2-D cross-correlation with zero padding.

    out[b, o, y, x] = bias[o] + sum_{c,u,v} in[b, c, y*s - p + u*D, x*s - p + v*D] * w[o, c, u, v]
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {c}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and not spec.has_bias:
        raise ShapeError("bias given for a ConvSpec without bias")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")
    k, d, s, p = spec.kernel_size, spec.dilation, spec.stride, spec.padding
    ho, wo = spec.output_size(h), spec.output_size(w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel span {spec.span}")

    dtype = np.result_type(x.data, weight.data)
    xp = x.data.astype(dtype, copy=False)
    if p:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _columns(xp, k, d, s, ho, wo)
    w2 = weight.data.astype(dtype, copy=False).reshape(spec.out_channels, -1)
    out = (w2 @ cols).reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.astype(dtype, copy=False)[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)
    if not any(t.requires_grad for t in parents):
        return Tensor(out, op="conv2d")

    hp, wp = xp.shape[2], xp.shape[3]

    def _backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(spec.weight_shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1, dtype=np.float64).astype(dtype)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=dtype)
            ye, xe = s * (ho - 1) + 1, s * (wo - 1) + 1
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u * d:u * d + ye:s, v * d:v * d + xe:s] += dcols[:, u, v].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor(out, requires_grad=True, _parents=parents, _backward=_backward, op="conv2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Gradient goes to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        g4 = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = g4.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), _backward, "max_pool2")


def upsample2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 stride-2 transposed convolution; ``weight`` is Cin x Cout x 2 x 2.

    out[b, o, 2i+u, 2j+v] = bias[o] + sum_c in[b, c, i, j] * w[c, o, u, v]
    """
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise ShapeError(f"upsample2 weight must be {c} x Cout x 2 x 2, got {weight.shape}")
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"upsample2 bias shape {bias.shape} != ({cout},)")
    dtype = np.result_type(x.data, weight.data)
    xd = x.data.astype(dtype, copy=False)
    wd = weight.data.astype(dtype, copy=False)
    y = np.tensordot(xd, wd, axes=([1], [0]))  # N, H, W, Cout, 2, 2
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data.astype(dtype, copy=False)[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g):
        g6 = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # N, H, W, Cout, 2, 2
        gx = np.tensordot(g6, wd, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 1, 2])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _backward, "upsample2")


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def duplicate_channels(x: Tensor) -> Tensor:
    """Concatenate a tensor with itself along the channel axis."""
    c = x.shape[1]
    return _result(np.concatenate([x.data, x.data], axis=1), (x,),
                   lambda g: (g[:, :c] + g[:, c:],), "duplicate_channels")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error, summed in float64."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data.astype(np.float64) - t.astype(np.float64)
    count = diff.size
    value = np.float64(np.dot(diff.ravel(), diff.ravel()) / count)

    def _backward(g):
        return ((2.0 / count) * float(g) * diff).astype(pred.dtype), None

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return _result(np.asarray(value), parents, _backward, "mse")


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor | np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            shape = np.shape(p.data if isinstance(p, Tensor) else p)
            state.m[name] = np.zeros(shape)
            state.v[name] = np.zeros(shape)
        return state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 10

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be a positive number of epochs")

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.decay_factor ** (epoch // self.decay_every)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and Adam moments must share the same names")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m, v = state.m[name], state.v[name]
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)
    return params, state


def count_params(params: Mapping[str, Tensor] | Iterable[Tensor]) -> int:
    values = params.values() if isinstance(params, Mapping) else params
    return sum(int(math.prod(p.shape)) for p in values)

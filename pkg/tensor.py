"""
Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every forward op records its parents and a backward rule mapping the output
gradient to one gradient per parent. Graphs are rebuilt on every forward pass;
`backward` walks the tape once and accumulates into requires_grad leaves.
"""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax

from exceptions import CheckpointError, GradientError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A node of the compute graph: data, optional gradient and the rule that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardRule] = None
        self._op = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._prev

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return slice_(self, index)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap constants; tensors pass through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, rule: BackwardRule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._prev = tuple(parents)
        out._backward = rule
    else:
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out dimensions that broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(root: Tensor) -> None:
    """
    Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.

    Args:
        root: Scalar-valued output of a forward pass

    Raises:
        GradientError: If root is not a scalar
    """
    if root.data.size != 1:
        raise GradientError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    # Iterative topological sort; the tape can be deep for transformer stacks.
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of two same-shaped tensors; ties route the gradient to a."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("maximum", a.shape, b.shape)
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b), "maximum",
                 lambda g: (g * take_a, g * ~take_a))


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), (a,), "relu", lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(a.data, axis=axis)

    def rule(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (a,), "softmax", rule)


# Linear algebra

def matmul(a, b) -> Tensor:
    """
    Batched matrix product over the last two axes with numpy broadcasting of leading axes.

    Args:
        a: (..., m, k)
        b: (..., k, n)

    Returns:
        (..., m, n)
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), "matmul", rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * x_hat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dx_hat = g * gamma.data
        dx = inv_std * (dx_hat - dx_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), "layer_norm", rule)


# Convolution and pooling

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D cross-correlation.

    Args:
        x: (N, C, H, W) input
        w: (O, C, kh, kw) kernels
        b: optional (O,) bias
        stride: step between windows along both axes
        padding: zero padding on every border

    Returns:
        (N, O, Ho, Wo) with Ho = (H + 2p - kh) // stride + 1
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d bias", w.shape, b.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw or stride < 1:
        raise ShapeError("conv2d", x.shape, w.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    # im2col: one row per output position, shared by the forward pass and the weight gradient
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def rule(g):
        rows = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (rows.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (rows @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", rule)


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max over kernel x kernel windows of an (N, C, H, W) tensor; floor mode."""
    stride = stride or kernel
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("max_pool2d", x.shape, (kernel, kernel))
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gx = np.zeros_like(x.data)
        for r in range(kernel * kernel):
            di, dj = divmod(r, kernel)
            gx[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += g * (idx == r)
        return (gx,)

    return _make(out, (x,), "max_pool2d", rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    area = x.shape[2] * x.shape[3]
    return _make(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool",
                 lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),))


# Shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, "concatenate", lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out), (x,), "slice", rule)


# Reductions

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum",
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size / max(out.size, 1)
    return _make(out, (x,), "mean",
                 lambda g: (_expand_reduced(g / count, x.shape, axis, keepdims).copy(),))


# Losses

def cross_entropy(logits: Tensor, targets: ArrayLike, reduction: str = "mean") -> Tensor:
    """
    Softmax cross-entropy over the last axis of (N, C) logits.

    Args:
        logits: Unnormalized class scores
        targets: (N,) class indices or (N, C) one-hot rows
        reduction: "mean", "sum" or "none"

    Returns:
        Scalar loss, or per-example losses for reduction="none"
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise ShapeError("cross_entropy", logits.shape, targets.shape)
        if not np.issubdtype(targets.dtype, np.integer) or targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
            raise ValueError(f"cross_entropy: class indices must be integers in [0, {c}), got {targets.tolist()}")
        onehot = np.zeros((n, c))
        onehot[np.arange(n), targets] = 1.0
    elif targets.shape == logits.shape:
        onehot = targets.astype(np.float64)
    else:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)

    logp = _log_softmax(logits.data, axis=-1)
    per_example = -np.sum(onehot * logp, axis=-1)
    probs = np.exp(logp)
    # Rows of a one-hot target sum to 1, so d/dlogits = softmax - onehot.
    row_mass = onehot.sum(axis=-1, keepdims=True)

    if reduction == "none":
        return _make(per_example, (logits,), "cross_entropy",
                     lambda g: (g[:, None] * (probs * row_mass - onehot),))
    if reduction == "sum":
        return _make(np.asarray(per_example.sum()), (logits,), "cross_entropy",
                     lambda g: (g * (probs * row_mass - onehot),))
    if reduction == "mean":
        return _make(np.asarray(per_example.mean()), (logits,), "cross_entropy",
                     lambda g: (g * (probs * row_mass - onehot) / n,))
    raise ValueError(f"unknown reduction {reduction!r}")


def l1_loss(prediction: Tensor, target: ArrayLike, reduction: str = "mean",
            weights: Optional[np.ndarray] = None) -> Tensor:
    """
    Absolute-error reconstruction loss.

    Args:
        prediction: Model output
        target: Reconstruction target, same shape
        reduction: "mean" (over weighted entries) or "sum"
        weights: Optional 0/1 array broadcastable to the prediction; the mean
            is taken over the selected entries only

    Returns:
        Scalar loss
    """
    target = as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError("l1_loss", prediction.shape, target.shape)
    err = abs_(prediction - target)
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), prediction.shape)
        err = err * weights
        if reduction == "mean":
            return scale(sum_(err), 1.0 / max(weights.sum(), 1.0))
    if reduction == "sum":
        return sum_(err)
    if reduction == "mean":
        return mean(err)
    raise ValueError(f"unknown reduction {reduction!r}")


# Optimization

class SGD:
    """Stochastic gradient descent with heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 clip_norm: Optional[float] = None):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        """
        Update every parameter in place.

        Raises:
            GradientError: If any parameter has no gradient
        """
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise GradientError(f"parameters {missing} have no gradient; call backward first")
        coef = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params))
            if total > self.clip_norm:
                coef = self.clip_norm / total
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += coef * p.grad
            p.data -= self.lr * v


# Serialization

def tensor_to_record(t: Tensor) -> Dict[str, object]:
    """JSON record {shape, data}; Python float repr round-trips exactly."""
    return {"shape": list(t.shape), "data": t.data.ravel().tolist()}


def tensor_from_record(record: Dict[str, object]) -> Tensor:
    shape = tuple(int(s) for s in record["shape"])
    data = np.asarray(record["data"], dtype=np.float64)
    if int(np.prod(shape)) != data.size:
        raise ShapeError("tensor_from_record", shape, data.shape)
    return Tensor(data.reshape(shape))


def save_parameters(path: Path, params: Dict[str, Tensor], metadata: Dict[str, object]) -> None:
    """
    Write a named-parameter checkpoint (.npz, bit-exact) with JSON metadata.

    Args:
        path: Destination file
        params: Parameter name to tensor
        metadata: JSON-serializable tags stored alongside
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.data for name, t in params.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(metadata, sort_keys=True)), **arrays)
    logger.debug(f"Saved {len(arrays)} parameters to {path}")


def load_parameters(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, object]]:
    """Read a checkpoint written by save_parameters."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path}: missing metadata record")
        metadata = json.loads(str(archive["__meta__"]))
        arrays = {name: archive[name].astype(np.float64) for name in archive.files if name != "__meta__"}
    return arrays, metadata

"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive builds its output eagerly and records, on the output, the inputs
it read and a vector-Jacobian product closure. `tape(output)` recovers the
topological order of those records; `backward` walks it in reverse and
accumulates gradients additively into every leaf that requires them.
"""
import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ren import special
from ren.utils import DomainError, NonFiniteError, ShapeError, ren_error

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    # ndarray operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return index(self, key)

    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def relu(self): return relu(self)
    def sigmoid(self): return sigmoid(self)
    def softplus(self): return softplus(self)
    def square(self): return square(self)
    def lgamma(self): return lgamma(self)
    def digamma(self): return digamma(self)
    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def _wrap(data: np.ndarray) -> Tensor:
    """Constant Tensor sharing `data` without a copy; `data` must already be float64."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out.op = "leaf"
    out._parents = ()
    out._vjp = None
    return out


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, np.ndarray) and value.dtype == np.float64:
        return _wrap(value)
    return Tensor(value)


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = _wrap(np.asarray(data, dtype=np.float64))
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _elementwise(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ren_error(ShapeError, f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
                        shapes=(a.shape, b.shape)) from None


# binary elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(_elementwise("add", np.add, a, b), (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(_elementwise("sub", np.subtract, a, b), (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(_elementwise("mul", np.multiply, a, b), (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise ren_error(DomainError, "div: division by zero")
    return _record(_elementwise("div", np.divide, a, b), (a, b),
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ren_error(ShapeError, f"matmul: shapes {a.shape} and {b.shape} are not aligned",
                        shapes=(a.shape, b.shape))
    if a.ndim == 2 and b.ndim == 2:
        return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    out = a2 @ b2
    out_shape = out.shape
    if a.ndim == 1:
        out_shape = out_shape[:-2] + out_shape[-1:]
    if b.ndim == 1:
        out_shape = out_shape[:-1]

    def vjp(g):
        g2 = g.reshape(out.shape)
        ga = unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        gb = unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return ga, gb

    return _record(out.reshape(out_shape), (a, b), vjp, "matmul")


def affine(x: ArrayLike, w: ArrayLike, b: ArrayLike) -> Tensor:
    """x @ w + b for a batch of rows x (N, in), w (in, out), b (out,), recorded as one op."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ren_error(ShapeError, f"affine: input {x.shape}, weight {w.shape} and bias {b.shape} do not match",
                        shapes=(x.shape, w.shape, b.shape))
    return _record(x.data @ w.data + b.data, (x, w, b),
                   lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "affine")


# unary elementwise

def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ren_error(DomainError, f"log: input must be strictly positive, got min {a.data.min()}",
                        op="log")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _stable_sigmoid(a.data),), "softplus")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def lgamma(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ren_error(DomainError, f"lgamma: input must be strictly positive, got min {a.data.min()}",
                        op="lgamma")
    return _record(special.lgamma(a.data), (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


def digamma(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ren_error(DomainError, "digamma: input must be strictly positive", op="digamma")
    return _record(special.digamma(a.data), (a,), lambda g: (g * special.trigamma(a.data),), "digamma")


# reductions and structure

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def broadcast(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ren_error(ShapeError, f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}",
                        shapes=(a.shape, tuple(shape))) from None
    return _record(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ren_error(ShapeError, f"reshape: cannot reshape {a.shape} to {tuple(shape)}",
                        shapes=(a.shape, tuple(shape))) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index(a: ArrayLike, key) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in the reverse pass."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ren_error(ShapeError, f"slice: {exc} for shape {a.shape}", shapes=(a.shape,)) from None

    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(part, (list, np.ndarray)) for part in parts)

    def vjp(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), vjp, "slice")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ren_error(ShapeError, f"concat: incompatible shapes {[p.shape for p in parts]}",
                        shapes=tuple(p.shape for p in parts)) from None
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(out, parts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _record(out, (a, b),
                   lambda g: (unbroadcast(np.where(mask, g, 0.0), a.shape),
                              unbroadcast(np.where(mask, 0.0, g), b.shape)), "where")


def custom(data: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Record an op whose reverse rule is supplied by the caller."""
    return _record(np.asarray(data, dtype=np.float64), tuple(inputs), vjp, op)


# convolution

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : stride * (oh - 1) + 1: stride, : stride * (ow - 1) + 1: stride]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], stride: int) -> np.ndarray:
    n, oh, ow, c, kh, kw = cols.shape
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i: i + stride * oh: stride, j: j + stride * ow: stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N, C, H, W), w: (O, C, kh, kw) -> (N, O, OH, OW)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ren_error(ShapeError, f"conv2d: input {x.shape} and kernel {w.shape} do not match",
                        shapes=(x.shape, w.shape))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
        gxp = _col2im(gcols, xp.shape, stride)
        gx = gxp[:, :, padding: padding + h, padding: padding + wd] if padding else gxp
        return gx, gw

    return _record(np.ascontiguousarray(out), (x, w), vjp, "conv2d")


def conv_transpose2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N, Cin, H, W), w: (Cin, Cout, kh, kw) -> (N, Cout, (H-1)s - 2p + kh, ...)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ren_error(ShapeError, f"conv_transpose2d: input {x.shape} and kernel {w.shape} do not match",
                        shapes=(x.shape, w.shape))
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw
    xmat = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, cin)
    wmat = w.data.reshape(cin, cout * kh * kw)
    cols = (xmat @ wmat).reshape(n, h, wd, cout, kh, kw)
    full = _col2im(cols, (n, cout, full_h, full_w), stride)
    out = full[:, :, padding: full_h - padding, padding: full_w - padding]

    def vjp(g):
        gfull = _pad(g, padding)
        gcols = _im2col(gfull, kh, kw, stride, h, wd).reshape(n * h * wd, cout * kh * kw)
        gx = (gcols @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (xmat.T @ gcols).reshape(w.shape)
        return gx, gw

    return _record(np.ascontiguousarray(out), (x, w), vjp, "conv_transpose2d")


# reverse pass

def tape(output: Tensor) -> List[Tensor]:
    """Recorded ops reachable from `output`, each after every op that produced its inputs."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def check_finite(t: Union[Tensor, np.ndarray], what: str, **context) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise ren_error(NonFiniteError, f"non-finite value in {what}", term=what, **context)


def backward(output: Tensor) -> None:
    """Populate `.grad` of every requires_grad leaf reachable from a scalar output."""
    if output.size != 1:
        raise ren_error(ShapeError, f"backward needs a scalar output, got shape {output.shape}",
                        shapes=(output.shape,))
    check_finite(output, "backward output")
    if not output.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def numerical_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar `f()` with respect to `array`, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = f()
        flat[i] = saved - eps
        minus = f()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


# optimisation

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def adam_step(params: Dict[str, Tensor], lr: float, state: AdamState,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update of every named parameter; clears their gradients."""
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise ren_error(NonFiniteError, f"non-finite gradient for parameter {name}", term=name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / bias1) * m / (np.sqrt(v / bias2) + eps)
        p.grad = None


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float, clip_norm: Optional[float] = None):
        self.params = dict(params)
        self.lr = lr
        self.clip_norm = clip_norm
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        if self.clip_norm:
            clip_grad_norm(self.params.values(), self.clip_norm)
        adam_step(self.params, self.lr, self.state)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"step": np.array([float(self.state.step)])}
        for name, value in self.state.m.items():
            out[f"m.{name}"] = value
        for name, value in self.state.v.items():
            out[f"v.{name}"] = value
        return out

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        self.state = AdamState(step=int(arrays.get("step", np.zeros(1))[0]))
        for key, value in arrays.items():
            if key.startswith("m."):
                self.state.m[key[2:]] = np.array(value, dtype=np.float64)
            elif key.startswith("v."):
                self.state.v[key[2:]] = np.array(value, dtype=np.float64)

"""Dense-tensor engine with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations record their parents and a
closure mapping the output gradient to one gradient per parent; ``backward``
walks the recorded graph in reverse topological order. Intermediate
gradients live only for the duration of one ``backward`` call, so two losses
that share a subgraph can be back-propagated one after the other.

Image tensors are ``C x H x W`` or batched ``N x C x H x W``; channel-wise
ops act on axis -3 and spatial ops on the last two axes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, InversionError, NonFiniteError

_DTYPES = {32: np.float32, 64: np.float64}
_precision = {"bits": 32}
_recording = {"enabled": True}

PARAM_GROUPS = ("encoder", "decoder", "references")


def set_precision(bits: int) -> None:
    """Select the global floating-point width (32 or 64) for new tensors."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision["bits"] = bits


def get_precision() -> int:
    return _precision["bits"]


def get_dtype() -> type:
    return _DTYPES[_precision["bits"]]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global precision."""
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording the graph."""
    previous = _recording["enabled"]
    _recording["enabled"] = False
    try:
        yield
    finally:
        _recording["enabled"] = previous


class Tensor:
    """N-dimensional array node of the autodiff graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor belonging to one optimizer group.

    Carries its own Adam moment buffers and step counter.
    """

    def __init__(self, data, group: str, name: str = ""):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(data, requires_grad=True)
        self._group = group
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def group(self) -> str:
        return self._group

    def cast(self) -> None:
        """Re-store value and moments in the current global precision."""
        dtype = get_dtype()
        self.data = self.data.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, group={self.group}, shape={self.shape})"


def _not_scalar(t: Tensor):
    raise GraphError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=get_dtype())
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    out.requires_grad = _recording["enabled"] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: {a.shape} vs {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "div")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward, "relu")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * data),)

    return _result(data, (a,), backward, "sqrt")


# ------------------------------------------------------------------ reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(data, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(data, (a,), backward, "mean")


# -------------------------------------------------------------- shape plumbing


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (a,), backward, "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(data, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate image tensors along the channel axis (-3)."""
    spatial = {t.shape[-2:] for t in tensors}
    if len(spatial) != 1:
        raise DimensionError(f"concat_channels: spatial dims differ {sorted(spatial)}")
    return concat(tensors, axis=-3)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "matmul")


def _gauss_jordan_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    aug = np.concatenate([a.astype(np.float64), np.eye(n)], axis=1)
    magnitude = np.abs(aug[:, :n]).max()
    tiny = n * np.finfo(np.float64).eps * magnitude
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if magnitude == 0.0 or abs(aug[pivot, col]) <= tiny:
            raise InversionError(f"matrix is singular (zero pivot in column {col})", math.inf)
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] /= aug[col, col]
        factors = aug[:, col].copy()
        factors[col] = 0.0
        aug -= np.outer(factors, aug[col])
    return aug[:, n:]


def mat_inverse(a: Tensor, cond_cap: float = 1e12) -> Tensor:
    """Inverse by Gauss-Jordan elimination with partial pivoting.

    Raises InversionError when a pivot vanishes or when the 1-norm condition
    estimate ``||A||_1 * ||A^-1||_1`` exceeds ``cond_cap``.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"mat_inverse: expected a square matrix, got {a.shape}")
    inv64 = _gauss_jordan_inverse(a.data)
    condition = float(np.abs(a.data.astype(np.float64)).sum(axis=0).max() * np.abs(inv64).sum(axis=0).max())
    if not math.isfinite(condition) or condition > cond_cap:
        raise InversionError(f"matrix is ill-conditioned (cond ~ {condition:.3e} > {cond_cap:.1e})", condition)
    inv = inv64.astype(get_dtype())

    def backward(g):
        return (-(inv.T @ g @ inv.T),)

    return _result(inv, (a,), backward, "mat_inverse")


# ---------------------------------------------------------------- convolutions


def _conv_out_extent(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(n, c * k * k, ho * wo)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of ``C_in x H x W`` (or batched) input with ``C_out x C_in x k x k``."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be C_out x C_in x k x k with odd k, got {kernel.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    c_out, c_in, k, _ = kernel.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    ho = _conv_out_extent(h, k, stride, dilation, padding)
    wo = _conv_out_extent(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output would be {ho}x{wo} for input {h}x{w}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    if k == 1 and stride == 1 and padding == 0:
        cols = xd.reshape(n, c, h * w)
        xp_shape = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        xp_shape = xp.shape
        cols = _im2col(np.ascontiguousarray(xp), k, stride, dilation, ho, wo)
    w2d = kernel.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2d, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)
    if not batched:
        out = out[0]

    def backward(g):
        g2 = (g if batched else g[None]).reshape(n, c_out, ho * wo)
        gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2d.T, g2)
            if xp_shape is None:
                gx = dcols.reshape(n, c, h, w)
            else:
                dcols = dcols.reshape(n, c, k, k, ho, wo)
                dxp = np.zeros(xp_shape, dtype=g.dtype)
                span_h = stride * (ho - 1) + 1
                span_w = stride * (wo - 1) + 1
                for i in range(k):
                    for j in range(k):
                        r0, c0 = i * dilation, j * dilation
                        dxp[:, :, r0 : r0 + span_h : stride, c0 : c0 + span_w : stride] += dcols[:, :, i, j]
                gx = dxp[:, :, padding : padding + h, padding : padding + w]
            if not batched:
                gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward, "conv2d")


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` mean pooling over the last two axes."""
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    data = x.data.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (up / (factor * factor),)

    return _result(data, (x,), backward, "avg_pool2d")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation on a corner-aligned grid over the last two axes."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    h, w = x.shape[-2:]
    ry = _interp_matrix(h, out_h).astype(get_dtype())
    rx = _interp_matrix(w, out_w).astype(get_dtype())
    data = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _result(data, (x,), backward, "bilinear_resize")


# ------------------------------------------------------------------- softmax


def softmax_channel(logits: Tensor, axis: int = -3) -> Tensor:
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _result(probs, (logits,), backward, "softmax")


def log_softmax_channel(logits: Tensor, axis: int = -3) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


# ------------------------------------------------------------------ backward


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, groups: Iterable[str] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``groups`` restricts accumulation to Parameters of the named groups;
    gradients reaching other Parameters are discarded. Each loss node may
    be back-propagated once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("this loss has already been back-propagated")
    allowed = None if groups is None else set(groups)
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(node, Parameter) and allowed is not None and node.group not in allowed:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ----------------------------------------------------------- gradient checking


def finite_diff_report(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-5,
) -> dict[int, float]:
    """Worst relative error per parameter (keyed by position in ``params``).

    The analytic gradient comes from one ``backward`` of ``loss_fn()``; the
    numeric one from central differences on a random subsample of
    coordinates. Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if get_precision() != 64:
        raise GraphError("finite-difference checks require 64-bit precision")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report: dict[int, float] = {}
    for pos, (p, grad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        count = min(coords_per_param, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, abs(a - numeric) / denom)
        report[pos] = worst
    for p in params:
        p.grad = None
    return report


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    report = finite_diff_report(loss_fn, params, h=h, coords_per_param=coords_per_param, rng=rng)
    return max(report.values(), default=0.0)

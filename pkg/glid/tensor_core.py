"""
Dense tensor with reverse-mode automatic differentiation

Storage is a plain row-major numpy array. Every primitive is a Function
subclass registered by name in OPS; a Tensor produced under grad mode keeps a
Node pointing at the Function, its saved context and its parents.

Two float widths are supported: float32 for training and float64 (switched on
with ``precision(np.float64)``) for finite-difference gradient checks.
"""
import contextlib
import logging
import threading
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
from scipy import special

from exceptions import GlidError, ShapeError

tensor_logger = logging.getLogger('glid.tensor')


class _GraphState(threading.local):
    """Per-thread dtype and grad-mode switches"""

    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_STATE = _GraphState()


def default_dtype():
    return _STATE.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the float width of newly created tensors"""
    previous = _STATE.dtype
    _STATE.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block"""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


def grad_enabled() -> bool:
    return _STATE.grad_enabled


class Context:
    """Scratch space a Function uses to hand arrays from forward to backward"""

    def __init__(self):
        self.saved: Tuple[Any, ...] = ()
        self.attrs: Dict[str, Any] = {}

    def save(self, *values):
        self.saved = values


class Node:
    """Backprop record: op tag + parents"""

    __slots__ = ('function', 'ctx', 'parents')

    def __init__(self, function: Type['Function'], ctx: Context, parents: Tuple[Optional['Tensor'], ...]):
        self.function = function
        self.ctx = ctx
        self.parents = parents

    @property
    def op(self) -> str:
        return self.function.name


class Tensor:
    """n-dimensional float array participating in a computation graph"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_STATE.dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array, dtype=_STATE.dtype)
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out

    # ------------------------------------------------------------------ #
    # Introspection
    # ------------------------------------------------------------------ #
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
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError('item', [self.shape], 'only single-element tensors convert to float')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = self.node.op if self.node else 'leaf'
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------ #
    # Backward
    # ------------------------------------------------------------------ #
    def backward(self):
        """Populate .grad of every tracked leaf with d(self)/d(leaf)"""
        if self.data.size != 1:
            raise ShapeError('backward', [self.shape], 'loss must be a scalar')
        if not self.requires_grad:
            raise GlidError("backward: loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for tensor in reversed(order):
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue
            node = tensor.node
            if node is None:
                # Leaf grads accumulate until the caller zeroes them
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                continue
            parent_grads = node.function.backward(node.ctx, grad)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent is None or parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                if parent_grad.shape != parent.shape:
                    raise ShapeError(f"{node.op}.backward", [parent_grad.shape, parent.shape])
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # ------------------------------------------------------------------ #
    # Operators
    # ------------------------------------------------------------------ #
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, key):
        return Slice.apply(self, key=key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self):
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return self.transpose(tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def abs(self):
        return Abs.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def softmax(self, axis: int = -1):
        return Softmax.apply(self, axis=axis)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over tracked tensors; each node appears exactly once"""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.parents):
                if parent is not None and parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


# ---------------------------------------------------------------------- #
# Function machinery
# ---------------------------------------------------------------------- #
OPS: Dict[str, Type['Function']] = {}


def register_op(cls):
    OPS[cls.name] = cls
    return cls


class Function:
    """A differentiable primitive: forward on arrays, backward on arrays"""

    name = 'function'

    @staticmethod
    def forward(ctx: Context, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        dtype = _STATE.dtype
        arrays = []
        for value in inputs:
            if isinstance(value, Tensor):
                arrays.append(value.data)
            else:
                arrays.append(np.asarray(value, dtype=dtype))
        ctx = Context()
        out = cls.forward(ctx, *arrays, **kwargs)
        result = Tensor._wrap(out)
        if _STATE.grad_enabled and any(isinstance(v, Tensor) and v.requires_grad for v in inputs):
            result.requires_grad = True
            result.node = Node(cls, ctx, tuple(v if isinstance(v, Tensor) else None for v in inputs))
        return result


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape], 'only leading-dimension and size-1 broadcasting is supported')


# ---------------------------------------------------------------------- #
# Elementwise arithmetic
# ---------------------------------------------------------------------- #
@register_op
class Add(Function):
    name = 'add'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast('add', a, b)
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        a_shape, b_shape = ctx.saved
        return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


@register_op
class Sub(Function):
    name = 'sub'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast('sub', a, b)
        ctx.save(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        a_shape, b_shape = ctx.saved
        return _unbroadcast(grad, a_shape), _unbroadcast(-grad, b_shape)


@register_op
class Mul(Function):
    name = 'mul'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast('mul', a, b)
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


@register_op
class Div(Function):
    name = 'div'

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast('div', a, b)
        ctx.save(a, b)
        return a / b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


@register_op
class Neg(Function):
    name = 'neg'

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return -grad


# ---------------------------------------------------------------------- #
# Contractions and layout
# ---------------------------------------------------------------------- #
@register_op
class MatMul(Function):
    """Matrix product; leading dims broadcast (batched matmul)"""

    name = 'matmul'

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError('matmul', [a.shape, b.shape])
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError('matmul', [a.shape, b.shape], 'batch dims do not broadcast')
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


@register_op
class Transpose(Function):
    name = 'transpose'

    @staticmethod
    def forward(ctx, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError('transpose', [a.shape], f'bad axes {axes}')
        ctx.save(axes)
        return np.transpose(a, axes).copy()

    @staticmethod
    def backward(ctx, grad):
        axes, = ctx.saved
        return np.transpose(grad, np.argsort(axes))


@register_op
class Reshape(Function):
    name = 'reshape'

    @staticmethod
    def forward(ctx, a, shape):
        try:
            out = a.reshape(shape)
        except ValueError:
            raise ShapeError('reshape', [a.shape, tuple(shape)])
        ctx.save(a.shape)
        return out.copy()

    @staticmethod
    def backward(ctx, grad):
        shape, = ctx.saved
        return grad.reshape(shape)


@register_op
class Slice(Function):
    """Basic (slice/int) indexing; produces a copy"""

    name = 'slice'

    @staticmethod
    def forward(ctx, a, key):
        ctx.save(a.shape, key)
        return np.array(a[key])

    @staticmethod
    def backward(ctx, grad):
        shape, key = ctx.saved
        out = np.zeros(shape, dtype=grad.dtype)
        out[key] += grad
        return out


@register_op
class Take(Function):
    """Gather along one axis with integer indices; repeated indices sum in backward"""

    name = 'take'

    @staticmethod
    def forward(ctx, a, indices, axis=0):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
            raise ShapeError('take', [a.shape, indices.shape], f'index out of range on axis {axis}')
        ctx.save(a.shape, indices, axis)
        return np.take(a, indices, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        shape, indices, axis = ctx.saved
        out = np.zeros(shape, dtype=grad.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(grad, axis, 0))
        return out


@register_op
class Concat(Function):
    name = 'concat'

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ndims = {a.ndim for a in arrays}
        if len(ndims) != 1:
            raise ShapeError('concat', [a.shape for a in arrays])
        reference = list(arrays[0].shape)
        for a in arrays[1:]:
            other = list(a.shape)
            other[axis] = reference[axis]
            if other != reference:
                raise ShapeError('concat', [arrays[0].shape, a.shape], f'axis {axis}')
        sizes = [a.shape[axis] for a in arrays]
        ctx.save(np.cumsum(sizes)[:-1], axis)
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        splits, axis = ctx.saved
        return tuple(np.split(grad, splits, axis=axis))


# ---------------------------------------------------------------------- #
# Nonlinearities
# ---------------------------------------------------------------------- #
@register_op
class Exp(Function):
    name = 'exp'

    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved
        return grad * out


@register_op
class Log(Function):
    name = 'log'

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        a, = ctx.saved
        return grad / a


@register_op
class Abs(Function):
    name = 'abs'

    @staticmethod
    def forward(ctx, a):
        ctx.save(np.sign(a))
        return np.abs(a)

    @staticmethod
    def backward(ctx, grad):
        sign, = ctx.saved
        return grad * sign


@register_op
class Sqrt(Function):
    """sqrt clamped at zero; the derivative at zero is held finite"""

    name = 'sqrt'

    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(np.maximum(a, 0.0))
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved
        return grad * 0.5 / np.maximum(out, 1e-12)


@register_op
class Sigmoid(Function):
    name = 'sigmoid'

    @staticmethod
    def forward(ctx, a):
        out = special.expit(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, = ctx.saved
        return grad * out * (1.0 - out)


@register_op
class Softplus(Function):
    name = 'softplus'

    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.logaddexp(0.0, a)

    @staticmethod
    def backward(ctx, grad):
        a, = ctx.saved
        return grad * special.expit(a)


@register_op
class GELU(Function):
    """Exact GELU, x * Phi(x)"""

    name = 'gelu'

    @staticmethod
    def forward(ctx, a):
        cdf = 0.5 * (1.0 + special.erf(a / np.sqrt(2.0)))
        ctx.save(a, cdf)
        return a * cdf

    @staticmethod
    def backward(ctx, grad):
        a, cdf = ctx.saved
        pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
        return grad * (cdf + a * pdf)


@register_op
class Softmax(Function):
    name = 'softmax'

    @staticmethod
    def forward(ctx, a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx.save(out, axis)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, axis = ctx.saved
        return out * (grad - (grad * out).sum(axis=axis, keepdims=True))


@register_op
class LayerNorm(Function):
    """Normalize over the last axis, then scale and shift"""

    name = 'layernorm'

    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise ShapeError('layernorm', [x.shape, gamma.shape, beta.shape])
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        xhat = centered * rstd
        ctx.save(xhat, rstd, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, grad):
        xhat, rstd, gamma = ctx.saved
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = (grad * xhat).sum(axis=lead)
        grad_beta = grad.sum(axis=lead)
        dxhat = grad * gamma
        grad_x = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------- #
# Reductions
# ---------------------------------------------------------------------- #
def _expand_reduced(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


@register_op
class Sum(Function):
    name = 'sum'

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(a.shape, axis, keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        shape, axis, keepdims = ctx.saved
        return np.array(_expand_reduced(grad, shape, axis, keepdims))


@register_op
class Mean(Function):
    name = 'mean'

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        ctx.save(a.shape, axis, keepdims, a.size // max(out.size, 1))
        return out

    @staticmethod
    def backward(ctx, grad):
        shape, axis, keepdims, count = ctx.saved
        return np.array(_expand_reduced(grad, shape, axis, keepdims)) / count


# ---------------------------------------------------------------------- #
# Losses
# ---------------------------------------------------------------------- #
@register_op
class MSELoss(Function):
    """mean((pred - target)^2) over all elements"""

    name = 'mse'

    @staticmethod
    def forward(ctx, pred, target):
        if pred.shape != target.shape:
            raise ShapeError('mse', [pred.shape, target.shape])
        diff = pred - target
        ctx.save(diff)
        return np.asarray((diff * diff).mean())

    @staticmethod
    def backward(ctx, grad):
        diff, = ctx.saved
        g = grad * 2.0 * diff / diff.size
        return g, -g


@register_op
class CrossEntropy(Function):
    """Class-weighted mean cross-entropy over rows of logits"""

    name = 'cross_entropy'

    @staticmethod
    def forward(ctx, logits, targets=None, class_weights=None):
        if logits.ndim != 2:
            raise ShapeError('cross_entropy', [logits.shape], 'logits must be rows x classes')
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (logits.shape[0],):
            raise ShapeError('cross_entropy', [logits.shape, targets.shape])
        if class_weights is None:
            weights = np.ones(logits.shape[0], dtype=logits.dtype)
        else:
            weights = np.asarray(class_weights, dtype=logits.dtype)[targets]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(logits.shape[0])
        total = weights.sum()
        ctx.save(np.exp(log_probs), targets, weights, total)
        return np.asarray(-(weights * log_probs[rows, targets]).sum() / total)

    @staticmethod
    def backward(ctx, grad):
        probs, targets, weights, total = ctx.saved
        g = probs.copy()
        g[np.arange(len(targets)), targets] -= 1.0
        return grad * g * (weights / total)[:, None]


@register_op
class SmoothL1(Function):
    """Elementwise Huber-style smooth L1, mean reduction"""

    name = 'smooth_l1'

    @staticmethod
    def forward(ctx, pred, target, beta=1.0):
        if pred.shape != target.shape:
            raise ShapeError('smooth_l1', [pred.shape, target.shape])
        diff = pred - target
        absdiff = np.abs(diff)
        loss = np.where(absdiff < beta, 0.5 * diff * diff / beta, absdiff - 0.5 * beta)
        ctx.save(diff, beta)
        return np.asarray(loss.mean())

    @staticmethod
    def backward(ctx, grad):
        diff, beta = ctx.saved
        g = np.where(np.abs(diff) < beta, diff / beta, np.sign(diff)) * grad / diff.size
        return g, -g


@register_op
class BCEWithLogits(Function):
    """Mean binary cross-entropy on logits (targets may be soft)"""

    name = 'bce_with_logits'

    @staticmethod
    def forward(ctx, logits, targets):
        if logits.shape != targets.shape:
            raise ShapeError('bce_with_logits', [logits.shape, targets.shape])
        loss = np.logaddexp(0.0, logits) - logits * targets
        ctx.save(logits, targets)
        return np.asarray(loss.mean())

    @staticmethod
    def backward(ctx, grad):
        logits, targets = ctx.saved
        n = logits.size
        return grad * (special.expit(logits) - targets) / n, -grad * logits / n


# ---------------------------------------------------------------------- #
# Spatial ops on (H, W, ...) maps
# ---------------------------------------------------------------------- #
@register_op
class Patchify(Function):
    """(H, W, C) image -> (H/p * W/p, p*p*C) row-major token grid"""

    name = 'patchify'

    @staticmethod
    def forward(ctx, image, patch=4):
        if image.ndim != 3 or image.shape[0] % patch or image.shape[1] % patch:
            raise ShapeError('patchify', [image.shape], f'sides must be divisible by patch {patch}')
        h, w, c = image.shape
        gh, gw = h // patch, w // patch
        out = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
        ctx.save(image.shape, patch)
        return out.reshape(gh * gw, patch * patch * c).copy()

    @staticmethod
    def backward(ctx, grad):
        (h, w, c), patch = ctx.saved
        gh, gw = h // patch, w // patch
        return grad.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


@register_op
class Upsample2x(Function):
    """Nearest-neighbour 2x upsampling over the two leading axes"""

    name = 'upsample2x'

    @staticmethod
    def forward(ctx, a):
        if a.ndim < 2:
            raise ShapeError('upsample2x', [a.shape])
        ctx.save(a.shape)
        return np.repeat(np.repeat(a, 2, axis=0), 2, axis=1)

    @staticmethod
    def backward(ctx, grad):
        shape, = ctx.saved
        h, w = shape[:2]
        return grad.reshape(h, 2, w, 2, *shape[2:]).sum(axis=(1, 3))


@register_op
class AvgPool2x(Function):
    """2x2 average pooling over the two leading axes"""

    name = 'avgpool2x'

    @staticmethod
    def forward(ctx, a):
        if a.ndim < 2 or a.shape[0] % 2 or a.shape[1] % 2:
            raise ShapeError('avgpool2x', [a.shape], 'leading sides must be even')
        h, w = a.shape[0] // 2, a.shape[1] // 2
        ctx.save(a.shape)
        return a.reshape(h, 2, w, 2, *a.shape[2:]).mean(axis=(1, 3))

    @staticmethod
    def backward(ctx, grad):
        shape, = ctx.saved
        return np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0


# ---------------------------------------------------------------------- #
# Functional surface
# ---------------------------------------------------------------------- #
def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    return Take.apply(a, indices=indices, axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def softplus(a: Tensor) -> Tensor:
    return Softplus.apply(a)


def gelu(a: Tensor) -> Tensor:
    return GELU.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def mse_loss(pred: Tensor, target) -> Tensor:
    return MSELoss.apply(pred, target)


def cross_entropy(logits: Tensor, targets, class_weights=None) -> Tensor:
    return CrossEntropy.apply(logits, targets=targets, class_weights=class_weights)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    return SmoothL1.apply(pred, target, beta=beta)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    return BCEWithLogits.apply(logits, targets)


def patchify(image: Tensor, patch: int) -> Tensor:
    return Patchify.apply(image, patch=patch)


def upsample2x(a: Tensor) -> Tensor:
    return Upsample2x.apply(a)


def avgpool2x(a: Tensor) -> Tensor:
    return AvgPool2x.apply(a)

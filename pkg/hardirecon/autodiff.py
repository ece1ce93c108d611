"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the encoder-decoder network needs are provided: strided 1D
convolution (cross-correlation) with optional bias, its transpose, ReLU, NMSE
loss, addition and scaling. Every operation records its parents and a closure
mapping the output gradient to parent gradients; ``backward`` walks the graph
in reverse topological order.

Shapes: activations are batch x channels x length. Convolution filters are
out x in x kernel, transposed convolution filters are in x out x kernel, so a
transposed layer and the convolution it mirrors share one filter shape.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError, UsageError, ValidationError
from .geometry import make_rng

PRECISIONS = {'f32': np.float32, 'f64': np.float64}
NMSE_EPSILON = 1e-12

# Test hook: op name -> factor applied to the gradients that op propagates
_GRADIENT_FAULTS = {}


def as_dtype(precision):
    if precision not in PRECISIONS:
        raise ValidationError('unknown precision %r, expected one of %s' % (precision, ', '.join(PRECISIONS)))
    return PRECISIONS[precision]


def _check_finite(values, op):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError('%s produced non-finite values' % op)


class Tensor:
    """Array with an optional gradient slot and the op that produced it."""

    def __init__(self, values, requires_grad=False, name=None, dtype=None):
        values = np.asarray(values, dtype=dtype)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, values, op, parents, backward):
        _check_finite(values, op)
        out = cls(values)
        out.op = op
        out._parents = parents
        out._backward = backward
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return self.values.item()

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, alpha):
        return scale(self, alpha)

    __rmul__ = __mul__

    def __repr__(self):
        label = self.name or self.op or 'leaf'
        return 'Tensor(%s, shape=%s, dtype=%s)' % (label, self.shape, self.dtype)


def _tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class ConvSpec:
    """Hyper-parameters of one (transposed) convolution layer."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    has_bias: bool = True
    transposed: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError('channel counts must be positive')
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValidationError('need kernel >= 1, stride >= 1 and padding >= 0, got %d, %d, %d'
                                  % (self.kernel, self.stride, self.padding))
        if not 0 <= self.output_padding < self.stride:
            raise ValidationError('output_padding must lie in [0, stride), got %d' % self.output_padding)
        if self.output_padding and not self.transposed:
            raise ValidationError('output_padding only applies to transposed convolutions')

    @property
    def filter_shape(self):
        if self.transposed:
            return (self.in_channels, self.out_channels, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel

    def output_length(self, n):
        """Output length for an input of length n; raises ShapeError when it is not positive."""

        if self.transposed:
            m = (n - 1) * self.stride - 2 * self.padding + self.kernel + self.output_padding
            if m <= 0:
                raise ShapeError('transposed convolution output length (%d - 1) * %d - 2 * %d + %d + %d = %d is not positive'
                                 % (n, self.stride, self.padding, self.kernel, self.output_padding, m))
            return m
        m = (n + 2 * self.padding - self.kernel) // self.stride + 1
        if m <= 0:
            raise ShapeError('convolution output length floor((%d + 2 * %d - %d) / %d) + 1 = %d is not positive'
                             % (n, self.padding, self.kernel, self.stride, m))
        return m


def _check_filters(x, weight, spec):
    if x.values.ndim != 3:
        raise ShapeError('expected a batch x channels x length input, got shape %s' % (x.shape,))
    if x.shape[1] != spec.in_channels:
        raise ShapeError('input has %d channels, layer expects %d' % (x.shape[1], spec.in_channels))
    if weight.shape != spec.filter_shape:
        raise ShapeError('filters have shape %s, layer expects %s' % (weight.shape, spec.filter_shape))


def conv1d(x, weight, bias, spec):
    """Strided cross-correlation with zero padding, plus a bias broadcast over length."""

    x, weight = _tensor(x), _tensor(weight)
    _check_filters(x, weight, spec)
    if spec.transposed:
        raise ValidationError('conv1d needs a non-transposed spec')
    if bias is not None:
        bias = _tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError('bias has shape %s, layer expects (%d,)' % (bias.shape, spec.out_channels))

    n = x.shape[2]
    m = spec.output_length(n)
    k, s, p = spec.kernel, spec.stride, spec.padding
    span = s * (m - 1) + 1

    padded = np.pad(x.values, ((0, 0), (0, 0), (p, p)))
    # Windows: batch x in x out_length x kernel
    columns = np.stack([padded[:, :, j:j + span:s] for j in range(k)], axis=-1)
    out = np.tensordot(columns, weight.values, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.values[None, :, None]

    def backward(grad):
        grad_weight = np.tensordot(grad, columns, axes=([0, 2], [0, 2]))
        grad_columns = np.tensordot(grad, weight.values, axes=([1], [0]))
        grad_padded = np.zeros_like(padded)
        for j in range(k):
            grad_padded[:, :, j:j + span:s] += grad_columns[:, :, :, j].transpose(0, 2, 1)
        grad_x = grad_padded[:, :, p:p + n]
        if bias is None:
            return grad_x, grad_weight
        return grad_x, grad_weight, grad.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(np.ascontiguousarray(out), 'conv1d', parents, backward)


def conv1d_transposed(x, weight, spec):
    """Transposed strided convolution, the adjoint of conv1d with the same spec."""

    x, weight = _tensor(x), _tensor(weight)
    _check_filters(x, weight, spec)
    if not spec.transposed:
        raise ValidationError('conv1d_transposed needs a transposed spec')

    n = x.shape[2]
    m = spec.output_length(n)
    k, s, p = spec.kernel, spec.stride, spec.padding
    span = s * (n - 1) + 1
    length = max(span + k - 1, p + m)

    # batch x in_length x out x kernel
    contributions = np.tensordot(x.values, weight.values, axes=([1], [0]))
    full = np.zeros((x.shape[0], spec.out_channels, length), dtype=np.result_type(x.values, weight.values))
    for j in range(k):
        full[:, :, j:j + span:s] += contributions[:, :, :, j].transpose(0, 2, 1)
    out = full[:, :, p:p + m]

    def backward(grad):
        grad_full = np.zeros_like(full)
        grad_full[:, :, p:p + m] = grad
        windows = np.stack([grad_full[:, :, j:j + span:s] for j in range(k)], axis=-1)
        grad_x = np.tensordot(windows, weight.values, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        grad_weight = np.tensordot(x.values, windows, axes=([0, 2], [0, 2]))
        return grad_x, grad_weight

    return Tensor._from_op(np.ascontiguousarray(out), 'conv1d_transposed', (x, weight), backward)


def relu(x):
    """max(0, x); the gradient at exactly 0 is 0."""

    x = _tensor(x)
    mask = x.values > 0

    def backward(grad):
        return (grad * mask,)

    return Tensor._from_op(np.where(mask, x.values, 0).astype(x.dtype), 'relu', (x,), backward)


def add(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError('cannot add shapes %s and %s' % (a.shape, b.shape))

    def backward(grad):
        return grad, grad

    return Tensor._from_op(a.values + b.values, 'add', (a, b), backward)


def scale(a, alpha):
    a = _tensor(a)
    alpha = float(alpha)

    def backward(grad):
        return (grad * alpha,)

    return Tensor._from_op(a.values * a.dtype.type(alpha), 'scale', (a,), backward)


def nmse_loss(pred, target):
    """Mean over the batch of ||pred_n - target_n||^2 / ||target_n||^2.

    The target is a constant; no gradient flows into it.
    """

    pred = _tensor(pred)
    target = target.values if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError('prediction shape %s differs from target shape %s' % (pred.shape, target.shape))

    batch = pred.shape[0]
    axes = tuple(range(1, pred.values.ndim))
    target = target.astype(pred.dtype, copy=False)
    energy = np.sum(target.astype(np.float64) ** 2, axis=axes)
    small = np.flatnonzero(np.sqrt(energy) <= NMSE_EPSILON)
    if small.size:
        raise ValidationError('target %d of the batch has norm below %g' % (small[0], NMSE_EPSILON))

    difference = pred.values - target
    energy = energy.astype(pred.dtype)
    value = np.mean(np.sum(difference ** 2, axis=axes) / energy)

    def backward(grad):
        shape = (batch,) + (1,) * len(axes)
        return (grad * 2.0 * difference / (batch * energy.reshape(shape)),)

    return Tensor._from_op(np.asarray(value, dtype=pred.dtype), 'nmse_loss', (pred,), backward)


def _topological_order(root):
    order, visited = [], set()
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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulates d loss / d leaf into the grad of every leaf that requires it.

    Returns:
        list of the leaves that received a gradient, in graph order.
    """

    if loss.op is None:
        raise UsageError('backward() needs the output of a recorded forward pass, got a leaf tensor')
    if loss.size != 1:
        raise UsageError('backward() needs a scalar loss, got shape %s' % (loss.shape,))

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.values)}
    leaves = []
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.op is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                leaves.append(node)
            continue

        fault = _GRADIENT_FAULTS.get(node.op)
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if fault is not None:
                parent_grad = parent_grad * fault
            _check_finite(parent_grad, node.op + ' gradient')
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return leaves


@contextlib.contextmanager
def inject_gradient_fault(op, factor=1.01):
    """Makes one op propagate wrong gradients while the context is active."""

    _GRADIENT_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRADIENT_FAULTS.pop(op, None)


def init_params(spec, seed, dtype=np.float32):
    """He-uniform filters with bound sqrt(6 / fan_in) and zero bias.

    Returns:
        (filters, bias) tensors; bias is None when the spec has no bias.
    """

    bound = np.sqrt(6.0 / spec.fan_in)
    values = make_rng(seed).uniform(-bound, bound, size=spec.filter_shape)
    weight = Tensor(values.astype(dtype), requires_grad=True)
    bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if spec.has_bias else None
    return weight, bias


@dataclass
class AdamState:
    """First and second moment estimates and the step counter."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update.

    Args:
        params: list of parameter arrays.
        grads: list of gradient arrays, same shapes.
        state: AdamState for these parameters.
    Returns:
        (new_params, new_state); the inputs are left untouched.
    """

    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError('got %d parameters, %d gradients and %d moment slots' % (len(params), len(grads), len(state.m)))

    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError('parameter shape %s, gradient shape %s, moment shape %s' % (p.shape, g.shape, m.shape))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_params, AdamState(new_m, new_v, t)


class Adam:
    """Adam over a list of parameter tensors; missing gradients count as zero."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.zeros_like([p.values for p in self.params])

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        values, self.state = adam_step([p.values for p in self.params], grads, self.state,
                                       self.lr, self.beta1, self.beta2, self.eps)
        for p, value in zip(self.params, values):
            p.values = value

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        return {'t': self.state.t, 'm': self.state.m, 'v': self.state.v}

    def load_state_arrays(self, t, m, v):
        self.state = AdamState([np.asarray(a, dtype=p.dtype) for a, p in zip(m, self.params)],
                               [np.asarray(a, dtype=p.dtype) for a, p in zip(v, self.params)], int(t))


class SGD:
    """Plain gradient descent, kept for ablations."""

    def __init__(self, params, lr=0.001):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.values = (p.values - self.lr * p.grad).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        return {'t': 0, 'm': [], 'v': []}

    def load_state_arrays(self, t, m, v):
        pass

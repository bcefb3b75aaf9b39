"""Dense float64 tensor engine with reverse-mode autodiff.

Deliberately small: only the operations the fusion pipeline needs. All
storage is float64 so gradient checks and the algebraic filter identities
can be asserted at tight tolerances. numpy supplies array storage and BLAS;
the tape, the layers and the optimizer live here.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array with optional gradient tracking.

    Every differentiable operation records its parents and a closure that
    maps the output gradient to per-parent gradients; `backward()` walks the
    resulting DAG in reverse topological order. Tensors are treated as
    immutable once created (the optimizer replaces `.data` wholesale).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    # ------------------------------------------------------------------
    # autodiff core

    def backward(self, grad=None):
        """Accumulate d(self)/d(ancestor) into every reachable `.grad`.

        `self` must be a scalar unless an explicit output gradient is given.
        Repeated calls keep accumulating; callers zero grads between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise DimensionError("output gradient shape mismatch")

        # reverse topological order via iterative post-order DFS
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        flows = {id(self): grad}
        for node in reversed(order):
            g = flows.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = flows.get(id(parent))
                flows[id(parent)] = pg if acc is None else acc + pg

        for node in order:
            g = flows.get(id(node))
            if g is None or not node.requires_grad:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g

    def detach(self):
        """Same data, cut from the tape (constant from here on)."""
        return Tensor(self.data)

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out = _record(self.data + other.data, (self, other), lambda g: (
            _unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)))
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _record(self.data - other.data, (self, other), lambda g: (
            _unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape)))

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        return _record(self.data * other.data, (self, other), lambda g: (
            _unbroadcast(g * other.data, self.data.shape),
            _unbroadcast(g * self.data, other.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return _record(self.data / other.data, (self, other), lambda g: (
            _unbroadcast(g / other.data, self.data.shape),
            _unbroadcast(-g * self.data / (other.data * other.data),
                         other.data.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        e = float(exponent)
        return _record(self.data ** e, (self,),
                       lambda g: (g * e * self.data ** (e - 1.0),))

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise DimensionError("matmul needs >= 2-D operands")

        def back(g):
            ga = np.matmul(g, other.data.swapaxes(-1, -2))
            gb = np.matmul(self.data.swapaxes(-1, -2), g)
            return (_unbroadcast(ga, self.data.shape),
                    _unbroadcast(gb, other.data.shape))

        return _record(np.matmul(self.data, other.data), (self, other), back)

    def __getitem__(self, idx):
        def back(g):
            dx = np.zeros_like(self.data)
            np.add.at(dx, idx, g)
            return (dx,)

        return _record(self.data[idx], (self,), back)

    # ------------------------------------------------------------------
    # shape ops

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return _record(self.data.reshape(shape), (self,),
                       lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        return _record(np.transpose(self.data, axes), (self,),
                       lambda g: (np.transpose(g, inv),))

    # ------------------------------------------------------------------
    # reductions and pointwise

    def sum(self, axis=None, keepdims=False):
        src = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, src).copy(),)

        return _record(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        out_data = np.exp(self.data)
        return _record(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        return _record(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return _record(out_data, (self,), lambda g: (g * 0.5 / out_data,))

    def abs(self):
        # subgradient 0 at the kink
        sign = np.sign(self.data)
        return _record(np.abs(self.data), (self,), lambda g: (g * sign,))


def _bad_item(t):
    raise ContractError(f"item() on non-scalar tensor of shape {t.data.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# neural primitives


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    return _record(out_data, (x,), lambda g: (g * (1.0 - out_data * out_data),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Stable softmax along `axis`; sums to 1 within 1e-12."""
    x = as_tensor(x)
    if x.data.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shift = Tensor(x.data.max(axis=axis, keepdims=True))  # constant, grad-free
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps=1e-8) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then scale."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + shift


def mean_pool(x: Tensor, axis) -> Tensor:
    return as_tensor(x).mean(axis=axis)


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """Affine map along the trailing axis; weight is [D_out, D_in]."""
    x = as_tensor(x)
    if x.data.shape[-1] != weight.data.shape[-1]:
        raise DimensionError(
            f"linear: input dim {x.data.shape[-1]} vs weight dim "
            f"{weight.data.shape[-1]}")
    squeeze_back = x.data.ndim == 1
    if squeeze_back:
        x = x.reshape(1, -1)
    out = x @ weight.transpose()
    if bias is not None:
        out = out + bias
    return out.reshape(out.data.shape[1:]) if squeeze_back else out


def conv1d(x: Tensor, kernel: Tensor, bias=None, pad_left=0, pad_right=0) -> Tensor:
    """1-D convolution over [B, C_in, L] with zero padding, as a width loop
    of batched matmuls (the widths here are tiny, the batches are not)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d expects [B, C, L], got {x.data.shape}")
    c_out, c_in, width = kernel.data.shape
    if x.data.shape[1] != c_in:
        raise DimensionError(
            f"conv1d: {x.data.shape[1]} input channels vs kernel {c_in}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right)))
    l_out = xp.shape[2] - width + 1
    if l_out < 1:
        raise DimensionError("conv1d: input shorter than kernel after padding")
    kdata = kernel.data
    out = np.zeros((x.data.shape[0], c_out, l_out))
    for w in range(width):
        out += np.matmul(kdata[:, :, w], xp[:, :, w:w + l_out])

    parents = [x, kernel]
    if bias is not None:
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def back(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kdata)
        for w in range(width):
            sl = xp[:, :, w:w + l_out]
            dk[:, :, w] = np.matmul(g, sl.swapaxes(1, 2)).sum(axis=0)
            dxp[:, :, w:w + l_out] += np.matmul(kdata[:, :, w].T, g)
        L = x.data.shape[2]
        dx = dxp[:, :, pad_left:pad_left + L]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _record(out, tuple(parents), back)


def causal_conv1d(x: Tensor, kernel: Tensor, bias=None) -> Tensor:
    """Length-preserving causal convolution: output at t sees inputs <= t."""
    width = kernel.data.shape[2]
    return conv1d(x, kernel, bias, pad_left=width - 1, pad_right=0)


def same_conv1d(x: Tensor, kernel: Tensor, bias=None) -> Tensor:
    """Length-preserving centered convolution (symmetric zero padding)."""
    width = kernel.data.shape[2]
    return conv1d(x, kernel, bias, pad_left=(width - 1) // 2, pad_right=width // 2)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), back)


def backward(loss: Tensor) -> None:
    """Free-function spelling of `loss.backward()`."""
    as_tensor(loss).backward()


# ----------------------------------------------------------------------
# parameters, init, optimizer


class Parameter:
    """A named trainable tensor plus its Adam state (m, v, step)."""

    def __init__(self, data, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.tensor.data.shape:
            raise DimensionError(
                f"cannot assign shape {value.shape} to parameter "
                f"{self.name} of shape {self.tensor.data.shape}")
        self.tensor.data = value

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.data.shape})"


def he_normal(rng: np.random.Generator, shape, fan_in: int):
    """He (fan-in) normal initialization."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place Adam update with bias correction; grads are not zeroed.

    Parameters whose grad is None (e.g. gated off by hard routing on this
    batch) are skipped entirely, including their step counters.
    """
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)

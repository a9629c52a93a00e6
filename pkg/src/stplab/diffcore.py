"""Minimal dense-tensor autodiff kernel.

Define-by-run reverse mode: every operation records its parents and a
closure that scatters the upstream gradient back to them. ``backward``
on a scalar tensor topologically sorts the recorded graph and runs the
closures in reverse. Gradients never flow into sampling coordinates or
integer maps; those stay plain numpy arrays.

Values are float64 throughout; 32-bit storage is accepted on input but
promoted, which keeps test and training code paths identical.
"""

import math
import warnings

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if track:
            return Tensor(data, requires_grad=True, _parents=parents,
                          _backward=backward, _op=op)
        return Tensor(data)

    @staticmethod
    def as_tensor(value):
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor.as_tensor(other)
        try:
            out_data = self.data + other.data
        except ValueError:
            raise DimensionError(
                f"add: cannot broadcast {self.shape} with {other.shape}") from None

        def backward(grad, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad, b.shape))

        return Tensor._result(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(grad, a=self):
            if a.requires_grad:
                a._accumulate(-grad)

        return Tensor._result(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        return self + (-Tensor.as_tensor(other))

    def __rsub__(self, other):
        return Tensor.as_tensor(other) + (-self)

    def __mul__(self, other):
        other = Tensor.as_tensor(other)
        try:
            out_data = self.data * other.data
        except ValueError:
            raise DimensionError(
                f"mul: cannot broadcast {self.shape} with {other.shape}") from None

        def backward(grad, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad * a.data, b.shape))

        return Tensor._result(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.as_tensor(other)

        def backward(grad, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

        return Tensor._result(self.data / other.data, (self, other), backward, "div")

    def __matmul__(self, other):
        other = Tensor.as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul: {self.shape} @ {other.shape}")

        def backward(grad, a=self, b=other):
            if a.requires_grad:
                a._accumulate(grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ grad)

        return Tensor._result(self.data @ other.data, (self, other), backward, "matmul")

    @property
    def T(self):
        def backward(grad, a=self):
            if a.requires_grad:
                a._accumulate(grad.T)

        return Tensor._result(self.data.T, (self,), backward, "transpose")

    # -- pointwise nonlinearities ----------------------------------------------

    def relu(self):
        mask = self.data > 0

        def backward(grad, a=self, m=mask):
            if a.requires_grad:
                a._accumulate(grad * m)

        return Tensor._result(self.data * mask, (self,), backward, "relu")

    def sigmoid(self):
        out_data = _sigmoid(self.data)

        def backward(grad, a=self, s=out_data):
            if a.requires_grad:
                a._accumulate(grad * s * (1.0 - s))

        return Tensor._result(out_data, (self,), backward, "sigmoid")

    def exp(self):
        out_data = np.exp(self.data)

        def backward(grad, a=self, e=out_data):
            if a.requires_grad:
                a._accumulate(grad * e)

        return Tensor._result(out_data, (self,), backward, "exp")

    def log(self):
        def backward(grad, a=self):
            if a.requires_grad:
                a._accumulate(grad / a.data)

        return Tensor._result(np.log(self.data), (self,), backward, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(grad, a=self, r=out_data):
            if a.requires_grad:
                a._accumulate(grad * 0.5 / r)

        return Tensor._result(out_data, (self,), backward, "sqrt")

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(grad, a=self):
            if a.requires_grad:
                a._accumulate(grad.reshape(a.shape))

        return Tensor._result(self.data.reshape(shape), (self,), backward, "reshape")

    def __getitem__(self, index):
        norm = index
        fancy = isinstance(norm, np.ndarray)
        if isinstance(norm, tuple):
            fancy = any(isinstance(i, np.ndarray) for i in norm)
        out_data = self.data[norm]

        def backward(grad, a=self, idx=norm, adv=fancy):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                if adv:
                    np.add.at(buf, idx, grad)
                else:
                    buf[idx] = grad
                a._accumulate(buf)

        return Tensor._result(out_data, (self,), backward, "getitem")

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(grad, a=self, ax=axis, kd=keepdims):
            if not a.requires_grad:
                return
            g = np.asarray(grad)
            if ax is not None and not kd:
                axes = (ax,) if isinstance(ax, int) else tuple(ax)
                axes = tuple(x % a.ndim for x in axes)
                for x in sorted(axes):
                    g = np.expand_dims(g, x)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._result(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[x % self.ndim] for x in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def fsum(self):
        """Exactly rounded scalar sum of a 1-D tensor (order invariant)."""
        if self.ndim != 1:
            raise DimensionError(f"fsum expects a 1-D tensor, got {self.shape}")
        out_data = math.fsum(self.data.tolist())

        def backward(grad, a=self):
            if a.requires_grad:
                a._accumulate(np.full(a.shape, float(grad)))

        return Tensor._result(out_data, (self,), backward, "fsum")


    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- reverse pass --------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# elementwise surface
# ---------------------------------------------------------------------------

def add(a, b):
    return Tensor.as_tensor(a) + b


def mul(a, b):
    return Tensor.as_tensor(a) * b


def relu(x):
    return Tensor.as_tensor(x).relu()


def sigmoid(x):
    return Tensor.as_tensor(x).sigmoid()


def scale(x, alpha):
    return Tensor.as_tensor(x) * float(alpha)


def concat(tensors, axis=0):
    tensors = [Tensor.as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(grad, parts=tensors, ax=axis, cuts=bounds):
        for i, part in enumerate(parts):
            if part.requires_grad:
                sl = [slice(None)] * grad.ndim
                sl[ax] = slice(cuts[i], cuts[i + 1])
                part._accumulate(grad[tuple(sl)])

    return Tensor._result(out_data, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [Tensor.as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(grad, parts=tensors, ax=axis):
        for i, part in enumerate(parts):
            if part.requires_grad:
                part._accumulate(np.take(grad, i, axis=ax))

    return Tensor._result(out_data, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias):
    """y = x @ W + b for x:[N,Din], W:[Din,Dout], b:[Dout]."""
    x, weight, bias = map(Tensor.as_tensor, (x, weight, bias))
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: x {x.shape} does not conform with W {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not conform with W {weight.shape}")
    return x @ weight + bias


def conv2d(x, kernel, bias, padding, stride=1):
    """Cross-correlation of x:[C,H,W] with kernel:[Cout,C,k,k].

    Odd square kernels only; with padding=(k-1)//2 and stride 1 the output
    keeps the input's spatial size.
    """
    x, kernel, bias = map(Tensor.as_tensor, (x, kernel, bias))
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel must be [Cout,C,k,k], got {kernel.shape}")
    cout, cin, k, _ = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    if x.ndim != 3 or x.shape[0] != cin:
        raise DimensionError(
            f"conv2d: input {x.shape} does not match kernel channels {kernel.shape}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match Cout={cout}")
    _, h, w = x.shape
    p, s = int(padding), int(stride)
    if s < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {s}")
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {k} too large for input {x.shape} with padding {p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    out = np.zeros((cout, oh, ow))
    wflat = kernel.data.reshape(cout, cin, k * k)
    for i in range(k):
        for j in range(k):
            patch = xp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
            out += np.tensordot(wflat[:, :, i * k + j], patch, axes=(1, 0))
    out += bias.data[:, None, None]

    def backward(grad, a=x, kern=kernel, b=bias, pad_x=xp):
        if b.requires_grad:
            b._accumulate(grad.sum(axis=(1, 2)))
        need_x = a.requires_grad
        need_k = kern.requires_grad
        if not (need_x or need_k):
            return
        gxp = np.zeros_like(pad_x) if need_x else None
        gk = np.zeros_like(kern.data) if need_k else None
        for i in range(k):
            for j in range(k):
                patch = pad_x[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
                if need_k:
                    gk[:, :, i, j] = np.tensordot(grad, patch, axes=((1, 2), (1, 2)))
                if need_x:
                    gxp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += (
                        np.tensordot(kern.data[:, :, i, j], grad, axes=(0, 0)))
        if need_k:
            kern._accumulate(gk)
        if need_x:
            if p:
                a._accumulate(gxp[:, p:-p, p:-p])
            else:
                a._accumulate(gxp)

    return Tensor._result(out, (x, kernel, bias), backward, "conv2d")


_POOL_AXES = ("spatial", "channel", "channel_and_spatial")


def pool(x, kind, axes):
    """Reduce over named axes with kept singleton dims.

    ``axes`` names the reduction set relative to a trailing [..,H,W]
    layout: "spatial" is the last two axes, "channel" everything before
    them, "channel_and_spatial" all axes. Max routes its gradient to the
    first maximal element in row-major scan order.
    """
    x = Tensor.as_tensor(x)
    if kind not in ("avg", "max"):
        raise ConfigError(f"pool: unknown kind {kind!r}")
    if axes not in _POOL_AXES:
        raise ConfigError(f"pool: unknown axis set {axes!r}")
    nd = x.ndim
    if axes == "spatial":
        ax = tuple(range(max(nd - 2, 0), nd))
    elif axes == "channel":
        ax = tuple(range(0, nd - 2))
    else:
        ax = tuple(range(nd))
    if not ax:
        raise ConfigError(f"pool: empty reduction set for axes={axes!r} on shape {x.shape}")

    if kind == "avg":
        count = int(np.prod([x.shape[i] for i in ax]))
        out_data = x.data.mean(axis=ax, keepdims=True)

        def backward(grad, a=x, n=count):
            if a.requires_grad:
                a._accumulate(np.broadcast_to(grad / n, a.shape).copy())

        return Tensor._result(out_data, (x,), backward, "avgpool")

    kept = tuple(i for i in range(nd) if i not in ax)
    perm = kept + ax
    kept_shape = tuple(x.shape[i] for i in kept)
    red = int(np.prod([x.shape[i] for i in ax]))
    blocks = x.data.transpose(perm).reshape(kept_shape + (red,))
    arg = blocks.argmax(axis=-1)
    out_flat = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if i in ax else x.shape[i] for i in range(nd))
    out_data = out_flat.reshape(out_shape)

    def backward(grad, a=x, idx=arg, p=perm):
        if not a.requires_grad:
            return
        gblocks = np.zeros(kept_shape + (red,))
        np.put_along_axis(gblocks, idx[..., None], grad.reshape(kept_shape + (1,)), axis=-1)
        inv = np.argsort(p)
        a._accumulate(gblocks.reshape(tuple(a.shape[i] for i in p)).transpose(inv))

    return Tensor._result(out_data, (x,), backward, "maxpool")


def bilinear_sample(x, coords):
    """Sample x:[C,H,W] at per-pixel source locations coords:[2,H',W'].

    coords[0] holds row positions, coords[1] column positions. Locations
    outside [0,H-1]x[0,W-1] read zeros. Gradients flow into x only; the
    coordinate grid is a constant.
    """
    x = Tensor.as_tensor(x)
    coords = np.asarray(coords, dtype=np.float64)
    if x.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise DimensionError(
            f"bilinear_sample: x {x.shape}, coords {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ContractError("bilinear_sample: coordinates must be finite")
    c, h, w = x.shape
    cy, cx = coords[0], coords[1]
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    fy = cy - y0
    fx = cx - x0

    corners = []
    for dy, dx, wy, wx in (
        (0, 0, 1.0 - fy, 1.0 - fx),
        (0, 1, 1.0 - fy, fx),
        (1, 0, fy, 1.0 - fx),
        (1, 1, fy, fx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        weight = wy * wx * valid
        corners.append((yc, xc, weight))

    out = np.zeros((c,) + cy.shape)
    for yc, xc, weight in corners:
        out += x.data[:, yc, xc] * weight

    def backward(grad, a=x, parts=corners):
        if not a.requires_grad:
            return
        gx = np.zeros((c, h * w))
        chan = np.arange(c)[:, None, None]
        for yc, xc, weight in parts:
            flat = (yc * w + xc)[None, :, :]
            np.add.at(gx, (chan, flat), grad * weight)
        a._accumulate(gx.reshape(c, h, w))

    return Tensor._result(out, (x,), backward, "bilinear_sample")


def softmax_cross_entropy(logits, targets, mask):
    """Mean negative log-softmax over masked pixels of logits:[K,H,W].

    An all-false mask contributes no pixels; a zero-loss constant is
    returned and a warning is issued so callers can skip the step.
    """
    logits = Tensor.as_tensor(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 3:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}")
    k, h, w = logits.shape
    if targets.shape != (h, w) or mask.shape != (h, w):
        raise DimensionError(
            f"softmax_cross_entropy: targets {targets.shape} / mask {mask.shape} "
            f"vs logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise ConfigError(f"softmax_cross_entropy: target ids outside [0,{k})")
    n = int(mask.sum())
    if n == 0:
        warnings.warn("softmax_cross_entropy: empty mask, returning zero loss")
        return Tensor(0.0)

    z = logits.data
    zmax = z.max(axis=0, keepdims=True)
    ez = np.exp(z - zmax)
    prob = ez / ez.sum(axis=0, keepdims=True)
    tgt = targets.astype(np.int64)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    picked = prob[tgt, rows, cols]
    loss = float(-np.log(picked[mask]).sum() / n)

    def backward(grad, a=logits):
        if not a.requires_grad:
            return
        g = prob.copy()
        g[tgt, rows, cols] -= 1.0
        g *= mask[None, :, :]
        a._accumulate(g * (float(grad) / n))

    return Tensor._result(np.float64(loss), (logits,), backward, "softmax_ce")

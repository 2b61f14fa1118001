"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: exactly the operations the rescoring model needs, all on
contiguous row-major numpy arrays. Every op records its parents and a backward
closure on a dynamic tape; the tape is rebuilt on every forward pass, so
variable sequence lengths cost nothing. `no_grad()` switches recording off for
inference. `grad_check` provides the central-finite-difference oracle used to
validate every backward rule.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

# Recording state is per-thread so concurrent inference workers cannot
# corrupt each other (or a training loop) by toggling a shared flag.
_STATE = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    prev = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class Tensor:
    """A float64 ndarray plus the tape bookkeeping needed for backward().

    `_parents` holds the input tensors of the op that produced this value and
    `_bwd(g)` returns one gradient array per parent. Leaf tensors (parameters,
    inputs) have no parents; their gradient lands in `.grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; delegates to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


GradientSet = dict[str, Tensor]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    """Build an op result, recording the tape edge only when gradients can
    flow through it (requires_grad propagates from parents to children)."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form), as one tape node."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * local,)

    return _make(data, (a,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0. `rng` makes it seedable."""
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    data = a.data * mask

    def bwd(g):
        return (g * mask,)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors, returned as a scalar tensor."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError("dot expects two vectors of identical length")
    data = np.dot(a.data, b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _make(data, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty list")
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _make(data, tensors, bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ValueError("stack of empty list")
    tensors = tuple(tensors)
    data = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(data, tensors, bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather along the leading axis; doubles as the embedding lookup."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ValueError("take_rows index out of range")
    data = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1, *a.data.shape[1:]))
        return (ga,)

    return _make(data, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)

    return _make(data, (a,), bwd)


def conv1d(a: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """1-D convolution over the frame axis with "same" padding.

    Input is (frames, in_channels) or (batch, frames, in_channels) — batching
    requires equal frame counts, which keeps the padding identical per row.
    weight is (kernel_width, in_channels, out_channels); output length is
    ceil(frames / stride). Differentiable w.r.t. input, weight and bias.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive: {stride}")
    if a.ndim not in (2, 3):
        raise ValueError("conv1d expects (frames, channels) or (batch, frames, channels)")
    frames, cin = a.data.shape[-2], a.data.shape[-1]
    if frames == 0:
        raise ValueError("empty sequence")
    k, w_cin, cout = weight.data.shape
    if w_cin != cin:
        raise ValueError(f"channel mismatch: input {cin}, weight {w_cin}")
    out_len = -(-frames // stride)
    pad_total = max((out_len - 1) * stride + k - frames, 0)
    pad_left = pad_total // 2
    pad_shape = (*a.data.shape[:-2], frames + pad_total, cin)
    padded = np.zeros(pad_shape)
    padded[..., pad_left:pad_left + frames, :] = a.data
    span = (out_len - 1) * stride + 1
    data = np.broadcast_to(bias.data, (*a.data.shape[:-2], out_len, cout)).copy()
    for j in range(k):
        data += np.matmul(padded[..., j:j + span:stride, :], weight.data[j])

    def bwd(g):
        gw = np.empty_like(weight.data)
        gp = np.zeros_like(padded)
        lead = tuple(range(g.ndim - 2))
        for j in range(k):
            seg = padded[..., j:j + span:stride, :]
            gwj = np.matmul(np.swapaxes(seg, -1, -2), g)
            gw[j] = gwj.sum(axis=lead) if lead else gwj
            gp[..., j:j + span:stride, :] += np.matmul(g, weight.data[j].T)
        gb = g.sum(axis=tuple(range(g.ndim - 1)))
        return gp[..., pad_left:pad_left + frames, :], gw, gb

    return _make(data, (a, weight, bias), bwd)


def conv_output_length(frames: int, strides: Iterable[int]) -> int:
    """Sequence length after a chain of "same"-padded strided convolutions."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1: {frames}")
    n = frames
    for s in strides:
        if s <= 0:
            raise ValueError(f"stride must be positive: {s}")
        n = -(-n // s)
    return n


# ---------------------------------------------------------------------------
# normalization, softmax, losses, pooling
# ---------------------------------------------------------------------------

def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead)
        db = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dg, db

    return _make(data, (a, gain, bias), bwd)


def softmax(a: Tensor, mask_bias: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis; `mask_bias` is added (untracked)
    to the logits first, which is how attention padding is masked out."""
    x = a.data if mask_bias is None else a.data + mask_bias
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (data * (g - (g * data).sum(axis=-1, keepdims=True)),)

    return _make(data, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis (max subtraction)."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    data = x - lse

    def bwd(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _make(data, (a,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Negative log-softmax probability of the labels.

    1-D logits with an integer label give a scalar; (N, V) logits with N
    labels give the per-row loss vector (callers average as needed).
    """
    lab = np.asarray(labels, dtype=np.intp)
    v = logits.data.shape[-1]
    if lab.size == 0 or lab.min() < 0 or lab.max() >= v:
        raise ValueError(f"label out of range for {v} classes")
    if logits.ndim == 1:
        if lab.ndim != 0:
            raise ValueError("scalar label expected for 1-D logits")
        rows = logits.data[None, :]
        lab2 = lab.reshape(1)
    elif logits.ndim == 2:
        if lab.shape != (logits.data.shape[0],):
            raise ValueError("one label per logits row expected")
        rows = logits.data
        lab2 = lab
    else:
        raise ValueError("cross_entropy expects 1-D or 2-D logits")

    shifted = rows - rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    n = rows.shape[0]
    losses = -logp[np.arange(n), lab2]
    data = losses[0] if logits.ndim == 1 else losses

    def bwd(g):
        grows = np.exp(logp)
        onehot_scale = np.asarray(g).reshape(n, 1)
        grows = grows * onehot_scale
        grows[np.arange(n), lab2] -= np.asarray(g).reshape(n)
        return (grows[0] if logits.ndim == 1 else grows,)

    return _make(data, (logits,), bwd)


def mean_pool(a: Tensor, valid_mask) -> Tensor:
    """Mean over the valid rows of a (T, d) sequence."""
    mask = np.asarray(valid_mask, dtype=bool)
    if a.ndim != 2 or mask.shape != (a.data.shape[0],):
        raise ValueError("mean_pool expects (T, d) input and a length-T mask")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty pool")
    data = a.data[mask].sum(axis=0) / n

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[mask] = g / n
        return (ga,)

    return _make(data, (a,), bwd)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis (no masking; all rows count)."""
    n = a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _make(np.asarray(data), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.sum() / n

    def bwd(g):
        return (np.full_like(a.data, float(g) / n),)

    return _make(np.asarray(data), (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS (graphs can exceed the recursion limit)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> GradientSet:
    """Reverse-mode sweep from a scalar loss.

    Writes `.grad` on every leaf tensor with requires_grad (overwriting any
    previous value) and, when `params` is given, returns the gradient per
    named parameter — zeros for parameters not on the computation path.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is not None:
            for parent, pg in zip(node._parents, node._bwd(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            node.grad = np.array(g, dtype=np.float64)
    out: GradientSet = {}
    if params is not None:
        for name, p in params.items():
            out[name] = Tensor(p.grad if p.grad is not None else np.zeros_like(p.data))
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 200,
    full_below: int = 2000,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    `f` must rebuild its graph on every call and be deterministic. All
    coordinates are checked when the total parameter count is below
    `full_below`; otherwise a seeded sample of `max_coords` coordinates.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-6, 1e-3] for double precision: {eps}")
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise ValueError("non-finite objective")
    analytic = backward(loss, params)

    coords: list[tuple[str, int]] = []
    for name, p in params.items():
        coords.extend((name, i) for i in range(p.data.size))
    if len(coords) >= full_below:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=min(max_coords, len(coords)), replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            f_plus = f().item()
        flat[i] = orig - eps
        with no_grad():
            f_minus = f().item()
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("non-finite objective during perturbation")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].data.reshape(-1)[i])
        denom = max(abs(a), abs(numeric))
        if denom < 1e-8:
            continue
        worst = max(worst, abs(a - numeric) / max(denom, 1e-6))
    return worst

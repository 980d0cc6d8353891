"""Dense-tensor engine with reverse-mode automatic differentiation.

The layer set is exactly what the mask-to-matte network needs: 2-d
convolution, batch normalization, leaky ReLU, sigmoid, spatial self-attention,
bilinear/pyramid resampling, channel concatenation, and the elementwise and
reduction ops that losses are built from. Ops record a closure-based graph;
``Tensor.backward()`` visits it once in reverse topological order and
accumulates (+=) into ``grad`` buffers.

Conventions:
  * spatial tensors are C,H,W or N,C,H,W (ops accept either and preserve it);
  * 32-bit is the training dtype, 64-bit is used for gradient checking;
  * reductions run in a fixed order, so results are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _sepmat
from .errors import ConfigError, ContractError, ResourceError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-d array with an optional gradient buffer and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, value: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += value

    def backward(self):
        """Reverse-mode sweep from a scalar; grads accumulate into buffers.

        Interior nodes get a fresh gradient each sweep; only leaves retain
        theirs, so calling backward twice doubles leaf grads.
        """
        if self.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor):
    """Iterative post-order over the recorded graph; each node visited once."""
    order, visited, stack = [], set(), [(root, False)]
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


def backward(loss: Tensor):
    """Module-level alias for ``loss.backward()``."""
    loss.backward()


def _make_node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _wants(t: Tensor) -> bool:
    """Whether a parent participates in the backward sweep."""
    return t.requires_grad or bool(t._parents)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _make_node(a.data + b, (a,), None)
        if out._parents:
            out._backward = lambda: a.accumulate_grad(out.grad)
        return out
    _check_same_shape(a, b, "add")
    out = _make_node(a.data + b.data, (a, b), None)
    if out._parents:
        def _back():
            if _wants(a):
                a.accumulate_grad(out.grad)
            if _wants(b):
                b.accumulate_grad(out.grad)
        out._backward = _back
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = _make_node(a.data - b.data, (a, b), None)
    if out._parents:
        def _back():
            if _wants(a):
                a.accumulate_grad(out.grad)
            if _wants(b):
                b.accumulate_grad(-out.grad)
        out._backward = _back
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _make_node(a.data * b, (a,), None)
        if out._parents:
            out._backward = lambda: a.accumulate_grad(out.grad * b)
        return out
    _check_same_shape(a, b, "mul")
    out = _make_node(a.data * b.data, (a, b), None)
    if out._parents:
        def _back():
            if _wants(a):
                a.accumulate_grad(out.grad * b.data)
            if _wants(b):
                b.accumulate_grad(out.grad * a.data)
        out._backward = _back
    return out


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a one-element tensor (a learned gate)."""
    if s.size != 1:
        raise ShapeError(f"scale_by gate must have one element, got {s.shape}")
    sval = s.data.reshape(())
    out = _make_node(x.data * sval, (x, s), None)
    if out._parents:
        def _back():
            if _wants(x):
                x.accumulate_grad(out.grad * sval)
            if _wants(s):
                s.accumulate_grad(np.asarray(np.sum(out.grad * x.data),
                                             dtype=s.dtype).reshape(s.shape))
        out._backward = _back
    return out


def abs_(x: Tensor) -> Tensor:
    out = _make_node(np.abs(x.data), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(out.grad * np.sign(x.data))
    return out


def sum_(x: Tensor) -> Tensor:
    out = _make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(
            np.full_like(x.data, out.grad))
    return out


def mean_(x: Tensor) -> Tensor:
    n = x.size
    out = _make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(
            np.full_like(x.data, out.grad / n))
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the subgradient at 0 is slope."""
    out = _make_node(np.where(x.data > 0, x.data, x.data * slope), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(
            out.grad * np.where(x.data > 0, 1.0, slope).astype(x.dtype))
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = _make_node(s, (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(out.grad * s * (1.0 - s))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make_node(s, (x,), None)
    if out._parents:
        def _back():
            g = out.grad
            x.accumulate_grad(s * (g - (g * s).sum(axis=axis, keepdims=True)))
        out._backward = _back
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = _make_node(x.data.reshape(shape), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(out.grad.reshape(x.shape))
    return out


def transpose_last2(x: Tensor) -> Tensor:
    out = _make_node(np.swapaxes(x.data, -1, -2), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(
            np.swapaxes(out.grad, -1, -2))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading axes must match."""
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = _make_node(np.matmul(a.data, b.data), (a, b), None)
    if out._parents:
        def _back():
            if _wants(a):
                a.accumulate_grad(np.matmul(out.grad, np.swapaxes(b.data, -1, -2)))
            if _wants(b):
                b.accumulate_grad(np.matmul(np.swapaxes(a.data, -1, -2), out.grad))
        out._backward = _back
    return out


def concat_channels(inputs) -> Tensor:
    """Concatenate along the channel axis; spatial extents must agree."""
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    ndim = inputs[0].ndim
    if ndim not in (3, 4):
        raise ShapeError("concat_channels expects C,H,W or N,C,H,W tensors")
    axis = ndim - 3
    spatial = inputs[0].shape[-2:]
    lead = inputs[0].shape[:axis]
    for t in inputs:
        if t.ndim != ndim or t.shape[-2:] != spatial or t.shape[:axis] != lead:
            raise ShapeError(
                f"concat_channels: spatial mismatch {t.shape} vs {inputs[0].shape}")
    out = _make_node(np.concatenate([t.data for t in inputs], axis=axis),
                     tuple(inputs), None)
    if out._parents:
        sizes = [t.shape[axis] for t in inputs]
        def _back():
            offset = 0
            for t, c in zip(inputs, sizes):
                if _wants(t):
                    idx = [slice(None)] * ndim
                    idx[axis] = slice(offset, offset + c)
                    t.accumulate_grad(out.grad[tuple(idx)])
                offset += c
        out._backward = _back
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    axis = x.ndim - 3
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _make_node(x.data[idx].copy(), (x,), None)
    if out._parents:
        def _back():
            g = np.zeros_like(x.data)
            g[idx] = out.grad
            x.accumulate_grad(g)
        out._backward = _back
    return out


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def sep_linear2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ plane @ cols.T`` to every channel.

    The backward pass is the transposed product, so any fixed linear spatial
    transform (resize, blur, decimate, expand) gets exact gradients for free.
    """
    if x.ndim not in (2, 3, 4):
        raise ShapeError("sep_linear2d expects (...,H,W) input with ndim 2..4")
    if rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"sep_linear2d: operator {rows.shape}x{cols.shape} does not fit input {x.shape}")
    r = rows.astype(x.dtype, copy=False)
    c = cols.astype(x.dtype, copy=False)
    out = _make_node(np.matmul(np.matmul(r, x.data), c.T), (x,), None)
    if out._parents:
        out._backward = lambda: x.accumulate_grad(
            np.matmul(r.T, np.matmul(out.grad, c)))
    return out


def resample_bilinear(x: Tensor, scale=None, size=None) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping.

    Give either a scale factor or explicit target extents (h, w).
    """
    h, w = x.shape[-2], x.shape[-1]
    if size is not None:
        th, tw = int(size[0]), int(size[1])
    elif scale is not None:
        th, tw = round(h * scale), round(w * scale)
    else:
        raise ConfigError("resample_bilinear: give scale or size")
    if th < 1 or tw < 1:
        raise ConfigError(f"resample_bilinear: target extent {th}x{tw} < 1")
    return sep_linear2d(x, _sepmat.bilinear_matrix(h, th),
                        _sepmat.bilinear_matrix(w, tw))


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding (the usual convolution layer).

    x: (C_in,H,W) or (N,C_in,H,W); weight: (C_out,C_in,k,k); bias: (C_out,).
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-d or 4-d, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out,C_in,k,k), got {weight.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c_in, h, w = xd.shape
    c_out, wc_in, k, _ = weight.shape
    if wc_in != c_in:
        raise ShapeError(
            f"conv2d: input has {c_in} channels but weight expects {wc_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if k % 2 != 1:
        raise ConfigError(f"conv2d: kernel size {k} must be odd")
    if padding < 0 or stride < 1:
        raise ConfigError("conv2d: padding must be >= 0 and stride >= 1")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigError(
            f"conv2d: extent {h}x{w} with pad {padding} is smaller than the "
            f"{k}x{k} kernel; output extent would be empty")
    # floor semantics: a trailing partial window is discarded
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(n, c_in, h * w)        # view, no copy
    else:
        xp = xd if padding == 0 else np.pad(
            xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k),
                                                           axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]      # N,C,Ho,Wo,k,k
        cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)) \
            .reshape(n, c_in * k * k, ho * wo)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out_d = np.matmul(w2, cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out_d = out_d + bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out_d = out_d[0]

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make_node(out_d, parents, None)
    if out._parents:
        hp, wp = h + 2 * padding, w + 2 * padding
        def _back():
            g = out.grad[None] if squeeze else out.grad
            g2 = g.reshape(n, c_out, ho * wo)
            if bias is not None and _wants(bias):
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)).astype(bias.dtype))
            if _wants(weight):
                dw = np.einsum("noq,npq->op", g2, cols)
                weight.accumulate_grad(dw.reshape(weight.shape))
            if _wants(x):
                if pointwise:
                    dx = np.matmul(w2.T, g2).reshape(n, c_in, h, w)
                else:
                    dcols = np.matmul(w2.T, g2).reshape(n, c_in, k, k, ho, wo)
                    dxp = np.zeros((n, c_in, hp, wp), dtype=x.dtype)
                    for i in range(k):
                        for j in range(k):
                            dxp[:, :, i:i + stride * ho:stride,
                                j:j + stride * wo:stride] += dcols[:, :, i, j]
                    dx = dxp[:, :, padding:padding + h, padding:padding + w]
                x.accumulate_grad(dx[0] if squeeze else dx)
        out._backward = _back
    return out


@dataclass
class BNState:
    """Running statistics of a batch-norm layer (buffers, not parameters)."""
    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def fresh(channels: int, dtype=np.float32) -> "BNState":
        return BNState(np.zeros(channels, dtype=dtype),
                       np.ones(channels, dtype=dtype))

    def copy(self) -> "BNState":
        return BNState(self.mean.copy(), self.var.copy())


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState,
               training: bool, eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over all non-channel axes.

    Training mode uses the current batch statistics (biased variance) and
    updates the running stats in place by EMA; inference mode uses the
    running stats as constants.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm: eps must be > 0, got {eps}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"batch_norm: input must be 3-d or 4-d, got {x.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta must have {c} entries, got {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    cshape = (1, c, 1, 1)

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
    else:
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(cshape)) * inv.reshape(cshape)
    out_d = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    out = _make_node(out_d[0] if squeeze else out_d, (x, gamma, beta), None)
    if out._parents:
        n_stat = xd.shape[0] * xd.shape[2] * xd.shape[3]
        def _back():
            g = out.grad[None] if squeeze else out.grad
            if _wants(beta):
                beta.accumulate_grad(g.sum(axis=axes).astype(beta.dtype))
            if _wants(gamma):
                gamma.accumulate_grad(
                    (g * xhat).sum(axis=axes).astype(gamma.dtype))
            if _wants(x):
                gx = g * gamma.data.reshape(cshape)
                if training:
                    m1 = gx.sum(axis=axes) / n_stat
                    m2 = (gx * xhat).sum(axis=axes) / n_stat
                    dx = inv.reshape(cshape) * (
                        gx - m1.reshape(cshape) - xhat * m2.reshape(cshape))
                else:
                    dx = gx * inv.reshape(cshape)
                x.accumulate_grad(dx[0] if squeeze else dx)
        out._backward = _back
    return out


@dataclass
class AttentionParams:
    """1x1 query/key/value/output projections plus the residual gate."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wp: Tensor
    bp: Tensor
    gate: Tensor

    def tensors(self):
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wp": self.wp, "bp": self.bp,
                "gate": self.gate}


def self_attention2d(x: Tensor, params: AttentionParams,
                     max_positions: int = 16384) -> Tensor:
    """Gated residual self-attention over all spatial positions.

    out = x + gate * project(softmax(Q^T K / sqrt(d_k)) V). With gate == 0
    this is the identity, which is also how fresh layers are initialized.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"self_attention2d: input must be 3-d or 4-d, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    hw = h * w
    if hw > max_positions:
        raise ResourceError(
            f"self_attention2d: {h}x{w} gives a {hw}x{hw} attention matrix, above "
            f"the cap of {max_positions} positions; restrict attention to the "
            "1/8-scale (os8) blocks or raise the cap")
    c = x.shape[-3]
    ck = params.wq.shape[0]
    lead = x.shape[:-3]

    q = reshape(conv2d(x, params.wq, params.bq), lead + (ck, hw))
    k = reshape(conv2d(x, params.wk, params.bk), lead + (ck, hw))
    v = reshape(conv2d(x, params.wv, params.bv), lead + (c, hw))
    energy = mul(matmul(transpose_last2(q), k), 1.0 / math.sqrt(ck))
    attn = softmax(energy, axis=-1)                       # rows sum to 1
    mixed = reshape(matmul(v, transpose_last2(attn)), x.shape)
    projected = conv2d(mixed, params.wp, params.bp)
    return add(x, scale_by(projected, params.gate))


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamSet:
    """Named map from parameter path to Tensor, iterated lexicographically."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, path: str, t: Tensor) -> Tensor:
        if path in self._store:
            raise ContractError(f"duplicate parameter path {path!r}")
        if not t.requires_grad:
            raise ContractError(f"parameter {path!r} must require grad")
        self._store[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._store[path]

    def __contains__(self, path: str) -> bool:
        return path in self._store

    def __len__(self) -> int:
        return len(self._store)

    def paths(self):
        return sorted(self._store)

    def items(self):
        for path in self.paths():
            yield path, self._store[path]

    def total_count(self) -> int:
        return sum(t.size for t in self._store.values())

    def zero_grads(self):
        for t in self._store.values():
            t.zero_grad()

    def merged_with(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for p, t in self.items():
            out.add(p, t)
        for p, t in other.items():
            out.add(p, t)
        return out


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamSet, state: AdamState, lr: float,
              beta1: float = 0.5, beta2: float = 0.99, eps: float = 1e-8):
    """One bias-corrected Adam update. Grads are left untouched; the caller
    zeroes them."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for path, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {path!r} has no gradient")
        g = p.grad
        if path not in state.m:
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        m = state.m[path]
        v = state.v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int,
                    slope: float = 0.2, dtype=np.float32) -> np.ndarray:
    """Kaiming-uniform draw for a leaky-ReLU conv stack."""
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def finite_check(data: np.ndarray, context: str):
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{context}: non-finite values produced")

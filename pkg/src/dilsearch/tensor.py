"""Dense tensors with tape-based reverse-mode differentiation.

Ops only record onto a tape inside a ``with Tape():`` block and only when one
of their inputs requires a gradient. Outside a tape they are plain numpy
computations, which is how inference runs.

    >>> x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    >>> with Tape():
    ...     loss = tsum(relu(x))
    >>> _ = backward(loss)
    >>> x.grad
    array([0., 1.])
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import NumericError

_ACTIVE: list = []


class Tensor:
    """A float array plus autodiff bookkeeping.

    Activations are 4-D ``(N, C, H, W)``; parameters (biases, BN scales, gate
    logits) use whatever rank they need.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None
        self.tape_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: Optional[Callable]


class Tape:
    """Ordered record of differentiable ops; recording order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, out, backward_fn):
        if self.consumed:
            raise RuntimeError("tape was already consumed by backward(); open a new Tape")
        out.requires_grad = True
        out.tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), backward_fn))
        return out


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(op, inputs, data, backward_fn):
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t is not None and t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _needs(t):
    return t is not None and t.requires_grad


def backward(loss):
    """Propagate d(loss)/d(.) to every leaf that requires a gradient.

    Leaf ``.grad`` fields accumulate (call ``zero_grad`` between steps). The
    returned dict maps each leaf to the gradient contributed by this call.
    A tape can be walked once; its saved activations are released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape (compute it inside `with Tape():`)")
    if tape.consumed:
        raise RuntimeError("backward() already ran on this tape; re-record the forward pass")

    pending = {loss.tape_id: np.ones_like(loss.data)}
    leaves: dict = {}
    for idx in range(loss.tape_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not _needs(t):
                continue
            if t.tape is tape:
                prev = pending.get(t.tape_id)
                pending[t.tape_id] = gi if prev is None else prev + gi
            elif t.tape is None:
                prev = leaves.get(id(t))
                leaves[id(t)] = (t, gi if prev is None else prev[1] + gi)
    tape.consumed = True
    for node in tape.nodes:
        node.backward = None

    result = {}
    for t, g in leaves.values():
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    return result


def _pair(v):
    a, b = (v, v) if np.isscalar(v) else tuple(v)
    return int(a), int(b)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


# ---------------------------------------------------------------- elementwise

def relu(x):
    data = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return _emit("relu", (x,), data, bw)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return g, g

    return _emit("add", (a, b), a.data + b.data, bw)


def mul(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return (g * b.data if _needs(a) else None, g * a.data if _needs(b) else None)

    return _emit("mul", (a, b), a.data * b.data, bw)


def tsum(x):
    """Sum of all elements as a 0-d tensor."""

    def bw(g):
        return (np.full_like(x.data, g),)

    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), bw)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor):
    """``sum_i weights[i] * tensors[i]``, reduced in list order."""
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise ValueError(f"weighted_sum: {len(tensors)} tensors but weights of shape {weights.shape}")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"weighted_sum: shape mismatch {t.shape} vs {shape}")
    w = weights.data
    acc = w[0] * tensors[0].data
    for i in range(1, len(tensors)):
        acc = acc + w[i] * tensors[i].data

    def bw(g):
        grads = [w[i] * g if _needs(t) else None for i, t in enumerate(tensors)]
        gw = None
        if weights.requires_grad:
            gw = np.array([np.vdot(g, t.data) for t in tensors], dtype=w.dtype)
        return (*grads, gw)

    return _emit("weighted_sum", (*tensors, weights), acc, bw)


# ---------------------------------------------------------------- convolution

def conv_output_size(size, k, s, d, p):
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D (Cout,Cin,kh,kw), got shape {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input channels C={c} do not match weight Cin={ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match Cout={co}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    ph, pw = _pair(padding)
    if min(sh, sw, dh, dw) < 1:
        raise ValueError(f"conv2d: stride and dilation must be >= 1, got stride={stride} dilation={dilation}")
    if min(ph, pw) < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    oh = conv_output_size(h, kh, sh, dh, ph)
    ow = conv_output_size(w, kw, sw, dw, pw)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: output size {oh}x{ow} < 1 for input {h}x{w}, kernel {kh}x{kw}, dilation {dilation}, padding {padding}")

    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow)
    w2 = weight.data.reshape(co, -1)
    # (N*P, Cout) orientation keeps the long axis as BLAS rows.
    out = (cols.T @ w2.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, n * oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if _needs(bias):
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = w2.T @ g2
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow)
        return gx, gw, gb

    return _emit("conv2d", (x, weight, bias), out, bw)


def maxpool2d(x, kernel=3, stride=2, padding=1):
    n, c, h, w = x.shape
    if padding > kernel // 2:
        raise ValueError(f"maxpool2d: padding {padding} exceeds half the kernel size {kernel}")
    oh = conv_output_size(h, kernel, stride, 1, padding)
    ow = conv_output_size(w, kernel, stride, 1, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d: output size {oh}x{ow} < 1 for input {h}x{w}")
    out, idx = kernels.maxpool_forward(x.data, kernel, stride, padding, oh, ow)

    def bw(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w),)

    return _emit("maxpool2d", (x,), out, bw)


# ---------------------------------------------------------------- normalization

def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In training mode the batch statistics over (N, H, W) normalize the input
    and ``running_mean``/``running_var`` (numpy arrays) are updated in place
    by an exponential moving average. Variances are the biased (population)
    estimates in both places.
    """
    n, c, h, w = x.shape
    for name, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ValueError(f"batchnorm2d: {name} has shape {v.shape}, expected ({c},)")
    if eps < 0:
        raise ValueError(f"batchnorm2d: eps must be >= 0, got {eps}")
    m = n * h * w
    if m == 0:
        raise ValueError("batchnorm2d: empty batch/spatial extent")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if momentum:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = (invstd.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(1, c, 1, 1)
        return gx, gg, gb

    return _emit("batchnorm2d", (x, gamma, beta), out, bw)


# ---------------------------------------------------------------- resampling

@lru_cache(maxsize=64)
def _interp_matrix(size, factor, dtype_str):
    """Rows map output index -> weights over inputs (half-pixel centers)."""
    out = size * factor
    a = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    a = a.astype(dtype_str)
    a.flags.writeable = False
    return a


def bilinear_upsample(x, factor):
    """Bilinear upsampling by an integer factor, align_corners=False style."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    n, c, h, w = x.shape
    if factor == 1:
        return _emit("upsample", (x,), x.data.copy(), lambda g: (g,))
    ah = _interp_matrix(h, factor, x.dtype.str)
    aw = _interp_matrix(w, factor, x.dtype.str)
    out = np.matmul(ah, x.data @ aw.T)

    def bw(g):
        return ((ah.T @ g) @ aw,)

    return _emit("upsample", (x,), out, bw)


# ---------------------------------------------------------------- losses / gates

def softmax_cross_entropy(logits, targets, ignore_label=None):
    """Mean pixel-wise cross-entropy over non-ignored pixels.

    ``logits`` is (N, C, H, W); ``targets`` an integer array (N, H, W).
    """
    if logits.ndim != 4:
        raise ValueError(f"softmax_cross_entropy: logits must be (N,C,H,W), got {logits.shape}")
    n, c, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ValueError(f"softmax_cross_entropy: targets shape {targets.shape} != {(n, h, w)}")
    valid = np.ones(targets.shape, dtype=bool) if ignore_label is None else targets != ignore_label
    bad = valid & ((targets < 0) | (targets >= c))
    if bad.any():
        raise ValueError(f"softmax_cross_entropy: target value {targets[bad].flat[0]} outside [0, {c})")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: no contributing pixels")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    se = e.sum(axis=1, keepdims=True)
    safe_t = np.where(valid, targets, 0)[:, None]
    picked = np.take_along_axis(shifted, safe_t, axis=1)[:, 0]
    nll = np.log(se[:, 0]) - picked
    loss = np.asarray(nll[valid].sum() / count, dtype=z.dtype)

    def bw(g):
        p = e / se
        np.put_along_axis(p, safe_t, np.take_along_axis(p, safe_t, axis=1) - 1, axis=1)
        p *= valid[:, None]
        return (p * (g / count),)

    return _emit("softmax_cross_entropy", (logits,), loss, bw)


def gumbel_softmax(log_alpha, noise, tau):
    """``softmax((log_alpha + noise) / tau)`` for a 1-D logit vector."""
    if tau <= 0:
        raise ValueError(f"gumbel_softmax: tau must be > 0, got {tau}")
    noise = np.asarray(noise, dtype=log_alpha.dtype)
    if noise.shape != log_alpha.shape or log_alpha.ndim != 1:
        raise ValueError(f"gumbel_softmax: noise {noise.shape} vs logits {log_alpha.shape}")
    y = (log_alpha.data + noise) / tau
    e = np.exp(y - y.max())
    z = e / e.sum()

    def bw(g):
        return ((z * (g - np.dot(g, z))) / tau,)

    return _emit("gumbel_softmax", (log_alpha,), z, bw)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param, grad, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns the new parameter array.

    ``state`` is advanced in place.
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"adam_step: shape mismatch param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("adam_step: non-finite gradient")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1**state.t)
    vhat = state.v / (1 - b2**state.t)
    return (param - lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


class Adam:
    """Adam over a dict of named parameter tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.state = {k: AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            try:
                p.data = adam_step(p.data, p.grad, self.state[name], lr, self.betas, self.eps)
            except NumericError as exc:
                raise NumericError(f"{exc} for parameter {name!r}") from None

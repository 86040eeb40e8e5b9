"""Central finite-difference checks for tape gradients."""

import numpy as np

from .tensor import Tape, Tensor, backward, mul, tsum


def numeric_grad(fn, inputs, index, h=1e-5):
    """d fn / d inputs[index] by central differences; ``fn`` maps Tensors to a
    0-d Tensor and must not record (it is called outside any tape)."""
    x = inputs[index].data
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(*inputs).data)
        flat[i] = orig - h
        down = float(fn(*inputs).data)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def analytic_grads(fn, inputs):
    for t in inputs:
        t.grad = None
    with Tape():
        out = fn(*inputs)
    backward(out)
    return [None if t.grad is None else np.asarray(t.grad, dtype=np.float64) for t in inputs]


def relative_error(analytic, numeric):
    """Max abs deviation normalized by the largest numeric gradient entry."""
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def check(fn, inputs, h=1e-5):
    """Max relative error over every input that requires a gradient."""
    grads = analytic_grads(fn, inputs)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        a = grads[i] if grads[i] is not None else np.zeros(t.shape)
        worst = max(worst, relative_error(a, numeric_grad(fn, inputs, i, h)))
    return worst


def projected(op, proj):
    """Wrap a tensor-valued op as ``sum(op(...) * proj)`` so it has a scalar output."""

    def fn(*inputs):
        out = op(*inputs)
        return tsum(mul(out, Tensor(proj)))

    return fn

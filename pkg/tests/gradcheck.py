"""Central finite-difference oracle, independent of the tape."""

import numpy as np

from affectformer.autograd import Tape, Tensor


def numerical_grad(f, arrays, i, h=1e-5):
    """d f(*arrays) / d arrays[i] by central differences; ``f`` maps arrays to a float."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(*arrays)
        x[idx] = orig - h
        fm = f(*arrays)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    """max |a - n| over the tensor, relative to the tensor's largest magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_grads(build, arrays, h=1e-5, wrt=None):
    """Compare tape gradients of scalar ``build(*tensors)`` with central differences.

    Returns the largest relative error over the inputs in ``wrt`` (default all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
        tape.backward(out)

    def f(*xs):
        return float(build(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for i in wrt:
        num = numerical_grad(f, arrays, i, h)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, max_rel_err(ana, num))
    return worst

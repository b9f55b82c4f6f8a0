import numpy as np

from braidnet import nn

FD_STEP = 1e-5
# denominator floor so exactly-zero gradients (dead ReLUs) compare as absolute error
REL_FLOOR = 1e-6


def central_diff(f, arr, h=FD_STEP, index=None):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = range(arr.size) if index is None else index
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in it:
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=REL_FLOOR):
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_layer(fn, x, params=(), key="p", rng=None):
    """Worst relative error of tape gradients for ``sum(R * fn(x, *params, tape))``, R random."""
    rng = np.random.default_rng(0) if rng is None else rng
    R = rng.standard_normal(fn(x, *params, None).shape)

    def loss():
        return float(np.sum(R * fn(x, *params, None)))

    tape = nn.GradientTape(keep_input_grad=True)
    fn(x, *params, tape)
    grads = tape.backward(R)
    errs = [max_rel_error(tape.input_grad, central_diff(loss, x))]
    for k, p in enumerate(params):
        errs.append(max_rel_error(grads[key][k], central_diff(loss, p)))
    return max(errs)

"""Central finite-difference checks for layer backward passes."""

import numpy as np

from ..errors import NonFiniteError
from .layers import SoftmaxLoss


def relative_error(analytic, numeric, floor=1e-12):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f, x, eps=1e-5):
    """Central differences of the scalar function ``f()`` w.r.t. ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_check(layer, x, eps=1e-5, labels=None, seed=0, mask=None):
    """Largest relative error between analytic and numeric gradients.

    For ordinary layers the probe loss is ``sum(forward(x) * r)`` with a
    fixed random ``r`` whose entries have magnitude in [0.5, 1.5]; for :class:`SoftmaxLoss` it is the loss itself and
    ``labels`` must be given. ``mask`` (same shape as ``x``) restricts which
    input entries are compared, e.g. to skip the kink of a ReLU.

    Parameters and inputs must be float64.
    """
    x = np.array(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NonFiniteError("gradient_check input contains non-finite values")

    if isinstance(layer, SoftmaxLoss):
        def f():
            return layer.forward(x, labels)[0]

        f()
        analytic = {"input": layer.backward()}
        probe_params = {}
    else:
        out = layer.forward(x)
        # random signs with magnitudes in [0.5, 1.5]: no near-zero probe
        # weights, so no output gradient vanishes below finite-difference noise
        rng = np.random.default_rng(seed)
        r = rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 1.5, size=out.shape)

        def f():
            return float(np.sum(layer.forward(x) * r))

        layer.forward(x)
        analytic = {"input": layer.backward(r)}
        for k, g in layer.grads.items():
            analytic[k] = g.copy()
        probe_params = layer.params

    worst = 0.0
    for key, grad in analytic.items():
        target = x if key == "input" else probe_params[key]
        numeric = numerical_gradient(f, target, eps)
        if not (np.isfinite(grad).all() and np.isfinite(numeric).all()):
            raise NonFiniteError(f"non-finite gradient for {key}")
        err = relative_error(grad, numeric)
        if key == "input" and mask is not None:
            err = err[np.asarray(mask, dtype=bool)]
        if err.size:
            worst = max(worst, float(err.max()))
    return worst

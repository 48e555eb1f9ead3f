"""Stateful layer objects wrapping the kernels in :mod:`.functional`.

Every layer exposes ``forward(x, train=False, rng=None)`` and
``backward(grad_out)``. Parameters live in ``layer.params`` and the
gradients from the last backward pass in ``layer.grads`` (same keys).
"""

import numpy as np

from ..errors import StateError
from . import functional as F


class Layer:
    kind = "layer"

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self._cache

    def clear_cache(self):
        self._cache = None

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, weight, bias, params, name=None):
        super().__init__(name)
        self.conv = params
        self.params = {"weight": weight, "bias": bias}

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return F.conv2d_forward(x, self.params["weight"], self.params["bias"], self.conv)

    def backward(self, grad_out):
        x = self._require_cache()
        gx, gw, gb = F.conv2d_backward(grad_out, x, self.params["weight"], self.conv)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return F.relu_forward(x)

    def backward(self, grad_out):
        return F.relu_backward(grad_out, self._require_cache())


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, size, stride, name=None):
        super().__init__(name)
        self.size = size
        self.stride = stride

    def forward(self, x, train=False, rng=None):
        out, arg = F.maxpool_forward(x, self.size, self.stride)
        self._cache = (x.shape, arg)
        return out

    def backward(self, grad_out):
        shape, arg = self._require_cache()
        return F.maxpool_backward(grad_out, arg, shape, self.size, self.stride)


class LRN(Layer):
    kind = "lrn"

    def __init__(self, n=5, alpha=1e-4, beta=0.75, k=1.0, name=None):
        super().__init__(name)
        self.n, self.alpha, self.beta, self.k = n, alpha, beta, k

    def forward(self, x, train=False, rng=None):
        out, scale = F.lrn_forward(x, self.n, self.alpha, self.beta, self.k)
        self._cache = (x, scale)
        return out

    def backward(self, grad_out):
        x, scale = self._require_cache()
        return F.lrn_backward(grad_out, x, scale, self.n, self.alpha, self.beta)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._require_cache())


class FullyConnected(Layer):
    """Affine map; weight has shape (in_features, out_features)."""

    kind = "fully_connected"

    def __init__(self, weight, bias, name=None):
        super().__init__(name)
        self.params = {"weight": weight, "bias": bias}

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return F.fc_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad_out):
        x = self._require_cache()
        w = self.params["weight"]
        buf = self.grads.get("weight")
        if buf is None or buf.dtype != np.result_type(x, grad_out):
            buf = None
        gx, gw, gb = F.fc_backward(grad_out, x, w, buf)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class SoftmaxClassifier(FullyConnected):
    """The terminal ``xS`` layer: an affine map to class logits.

    The softmax itself is applied by the loss (training) or by
    :meth:`matforge.network.Network.predict`.
    """

    kind = "softmax"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, ratio=0.5, name=None):
        super().__init__(name)
        self.ratio = ratio

    def forward(self, x, train=False, rng=None):
        out, mask = F.dropout_forward(x, self.ratio, train, rng)
        self._cache = (mask,)
        return out

    def backward(self, grad_out):
        (mask,) = self._require_cache()
        return F.dropout_backward(grad_out, mask)


class SoftmaxLoss:
    """Softmax + mean negative log-likelihood, kept apart from the layer stack."""

    kind = "softmax_loss"

    def __init__(self):
        self._grad = None

    def forward(self, logits, labels):
        loss, probs, grad = F.softmax_loss(logits, labels)
        self._grad = grad
        return loss, probs

    def backward(self):
        if self._grad is None:
            raise StateError("softmax_loss: backward called before forward")
        return self._grad

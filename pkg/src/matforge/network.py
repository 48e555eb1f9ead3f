"""Runtime for :class:`~matforge.architectures.NetworkSpec`: parameters,
forward/backward passes and prediction."""

import numpy as np

from .architectures import conv_params, infer_shapes
from .errors import ConfigurationError, NonFiniteError
from .nn import layers as L
from .nn.functional import softmax, softmax_loss

CONV_STD = 0.01
FC_STD = 0.005
# layers whose bias starts at 1 when ``bias_one`` is set (reference-model convention)
BIAS_ONE_LAYERS = frozenset({"conv2", "conv4", "conv5", "fc6", "fc7"})


def _build_layer(ls, in_shape, rng, dtype, bias_one):
    k, h = ls.kind, ls.hyper
    if k == "conv":
        cp = conv_params(ls)
        w = (rng.standard_normal(cp.weight_shape(in_shape[0])) * CONV_STD).astype(dtype)
        b = np.full(cp.out_channels, 1.0 if bias_one and ls.name in BIAS_ONE_LAYERS else 0.0, dtype=dtype)
        return L.Conv2D(w, b, cp, name=ls.name)
    if k in ("fully_connected", "softmax"):
        cls = L.SoftmaxClassifier if k == "softmax" else L.FullyConnected
        w = (rng.standard_normal((in_shape[0], h["outputs"])) * FC_STD).astype(dtype)
        b = np.full(h["outputs"], 1.0 if bias_one and ls.name in BIAS_ONE_LAYERS else 0.0, dtype=dtype)
        return cls(w, b, name=ls.name)
    if k == "relu":
        return L.ReLU(name=ls.name)
    if k == "maxpool":
        return L.MaxPool(h["size"], h["stride"], name=ls.name)
    if k == "lrn":
        return L.LRN(h.get("n", 5), h.get("alpha", 1e-4), h.get("beta", 0.75), h.get("k", 1.0), name=ls.name)
    if k == "dropout":
        return L.Dropout(h.get("ratio", 0.5), name=ls.name)
    if k == "flatten":
        return L.Flatten(name=ls.name)
    raise ConfigurationError(f"no runtime layer for kind {k!r}")


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values after {where}")


class Network:
    """Parameters plus forward/backward over a NetworkSpec.

    Parameter identifiers are ``"<layer>.weight"`` / ``"<layer>.bias"``,
    prefixed with ``"<tower>."`` inside branched nets.
    """

    def __init__(self, spec, seed=0, dtype=np.float32, bias_one=False):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        shapes = dict(infer_shapes(spec))
        h, w = spec.input_size

        def build(stack, prefix, shape):
            built = []
            for ls in stack:
                layer = _build_layer(ls, shape, rng, self.dtype, bias_one)
                built.append((ls, layer))
                shape = shapes[prefix + ls.name]
            return built

        self.towers = []
        for br in spec.branches:
            self.towers.append((br, build(br.layers, br.name + ".", (br.channels, h, w))))
        if spec.is_branched:
            fuse = spec.layers[0]
            self.fusion = fuse.hyper.get("mode", "concat")
            self.head = build(spec.layers[1:], "", shapes[fuse.name])
        else:
            self.fusion = None
            self.head = build(spec.layers, "", (spec.input_channels, h, w))
        self._fused_widths = None

    # -- parameter access -------------------------------------------------

    def _named_layers(self):
        for br, stack in self.towers:
            for ls, layer in stack:
                yield br.name + "." + ls.name, ls, layer
        for ls, layer in self.head:
            yield ls.name, ls, layer

    def parameters(self):
        """Ordered ``{identifier: array}`` view of all parameters (arrays are live)."""
        out = {}
        for qname, _, layer in self._named_layers():
            for key, arr in layer.params.items():
                out[f"{qname}.{key}"] = arr
        return out

    def gradients(self):
        out = {}
        for qname, _, layer in self._named_layers():
            for key, arr in layer.grads.items():
                out[f"{qname}.{key}"] = arr
        return out

    def parameter_stages(self):
        return {f"{q}.{k}": ls.stage for q, ls, layer in self._named_layers() for k in layer.params}

    def set_parameter(self, name, value):
        qname, key = name.rsplit(".", 1)
        for q, _, layer in self._named_layers():
            if q == qname and key in layer.params:
                cur = layer.params[key]
                if cur.shape != tuple(value.shape):
                    raise ConfigurationError(f"{name}: shape {tuple(value.shape)} != expected {cur.shape}")
                cur[...] = value
                return
        raise KeyError(name)

    def load_parameters(self, params):
        for name, value in params.items():
            self.set_parameter(name, np.asarray(value))

    def reinitialize(self, names, seed=0):
        """Draw fresh initial values for the listed parameters."""
        rng = np.random.default_rng(seed)
        params = self.parameters()
        for name in names:
            arr = params[name]
            if name.endswith(".bias"):
                arr[...] = 0
            else:
                std = CONV_STD if arr.ndim == 4 else FC_STD
                arr[...] = rng.standard_normal(arr.shape) * std

    # -- passes -----------------------------------------------------------

    def _check_input(self, x):
        h, w = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (self.spec.input_channels, h, w):
            raise ConfigurationError(
                f"batch shape {x.shape} does not match network input "
                f"(N, {self.spec.input_channels}, {h}, {w})")

    @staticmethod
    def _run(stack, x, train, rng, check):
        for ls, layer in stack:
            x = layer.forward(x, train=train, rng=rng)
            if check:
                _check_finite(x, ls.name)
        return x

    def forward(self, x, train=False, rng=None, check=True):
        """Logits for a batch ``x`` of shape (N, C, H, W)."""
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        if self.towers:
            feats, start = [], 0
            for br, stack in self.towers:
                feats.append(self._run(stack, x[:, start:start + br.channels], train, rng, check))
                start += br.channels
            self._fused_widths = [f.shape[1] for f in feats]
            x = np.concatenate(feats, axis=1) if self.fusion == "concat" else sum(feats[1:], feats[0])
        return self._run(self.head, x, train, rng, check)

    @staticmethod
    def _frozen_prefix(stack, frozen):
        """Length of the leading run of layers whose stage is in ``frozen``."""
        n = 0
        for ls, _ in stack:
            if ls.stage not in frozen:
                break
            n += 1
        return n

    def _backprop(self, stack, g, frozen, check, need_input):
        stop = self._frozen_prefix(stack, frozen) if frozen else 0
        if need_input:
            stop = 0
        for i in range(len(stack) - 1, stop - 1, -1):
            ls, layer = stack[i]
            g = layer.backward(g)
            if check:
                _check_finite(g, ls.name + " (backward)")
        return g if stop == 0 else None

    def backward(self, grad_logits, check=True, frozen_stages=None, need_input_grad=True):
        """Backpropagate from the logits; fills every layer's ``grads``.

        With ``frozen_stages`` given and ``need_input_grad`` false, layers in
        a leading all-frozen run are skipped (their gradients are not needed).
        Returns the input gradient, or None when it was not computed.
        """
        frozen = frozenset(frozen_stages or ())
        g = self._backprop(self.head, grad_logits, frozen, check, need_input_grad or bool(self.towers))
        if not self.towers:
            return g
        if self.fusion == "concat":
            parts = np.split(g, np.cumsum(self._fused_widths)[:-1], axis=1)
        else:
            parts = [g] * len(self.towers)
        grads_in = [self._backprop(stack, gp, frozen, check, need_input_grad)
                    for (_, stack), gp in zip(self.towers, parts)]
        if any(gi is None for gi in grads_in):
            return None
        return np.concatenate(grads_in, axis=1)

    def loss_and_gradients(self, x, labels, rng=None, train=True, frozen_stages=None):
        logits = self.forward(x, train=train, rng=rng)
        loss, probs, grad = softmax_loss(logits, labels)
        if not np.isfinite(loss):
            raise NonFiniteError("loss is not finite")
        self.backward(grad.astype(self.dtype, copy=False), frozen_stages=frozen_stages,
                      need_input_grad=frozen_stages is None)
        return loss, probs

    def predict(self, x):
        """Class probabilities, test mode (dropout off)."""
        return softmax(self.forward(x, train=False).astype(np.float64))

    def clear_caches(self):
        for _, _, layer in self._named_layers():
            layer.clear_cache()


def forward(net, batch):
    """Probabilities for ``batch``; prediction is the row argmax, confidence the row max."""
    return net.predict(batch)

"""Network layouts: the vanilla net, the five-stage deep net and the
two-tower branched net, plus filter-stage freezing.

A :class:`NetworkSpec` is an immutable description. Runtime parameters are
created from it by :class:`matforge.network.Network`.
"""

import json
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .nn.functional import ConvParams, pool_output_hw

NUM_CLASSES = 10
LAYER_KINDS = frozenset(
    {"conv", "relu", "maxpool", "lrn", "fully_connected", "dropout", "softmax", "flatten", "concat"}
)
LRN_DEFAULTS = {"n": 5, "alpha": 1e-4, "beta": 0.75, "k": 1.0}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    stage: int = 0
    hyper: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "stage": self.stage, "hyper": dict(self.hyper)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["name"], int(d.get("stage", 0)), dict(d.get("hyper", {})))


@dataclass(frozen=True)
class Branch:
    """One tower of a branched net, fed by ``channels`` consecutive input channels."""

    name: str
    channels: int
    layers: tuple


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list.

    For branched nets ``branches`` holds the towers. The input then carries
    the towers' channels stacked along the channel axis, and ``layers``
    starts with the ``concat`` fusion layer.
    """

    layers: tuple
    input_channels: int
    input_size: tuple
    num_classes: int = NUM_CLASSES
    branches: tuple = ()
    arch: str = "custom"

    @property
    def is_branched(self):
        return bool(self.branches)

    def all_layers(self):
        """Yield ``(prefix, LayerSpec)`` for every layer including tower layers."""
        for br in self.branches:
            for layer in br.layers:
                yield br.name + ".", layer
        for layer in self.layers:
            yield "", layer

    def stages(self):
        return sorted({ls.stage for _, ls in self.all_layers() if ls.stage > 0})

    def to_dict(self):
        return {
            "arch": self.arch,
            "input_channels": self.input_channels,
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
            "branches": [
                {"name": b.name, "channels": b.channels, "layers": [l.to_dict() for l in b.layers]}
                for b in self.branches
            ],
            "layers": [l.to_dict() for l in self.layers],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        branches = tuple(
            Branch(b["name"], int(b["channels"]), tuple(LayerSpec.from_dict(l) for l in b["layers"]))
            for b in d.get("branches", [])
        )
        spec = cls(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            input_channels=int(d["input_channels"]),
            input_size=tuple(int(v) for v in d["input_size"]),
            num_classes=int(d.get("num_classes", NUM_CLASSES)),
            branches=branches,
            arch=d.get("arch", "custom"),
        )
        validate(spec)
        return spec

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class FreezeMask:
    frozen_stages: frozenset = frozenset()

    def is_frozen(self, stage):
        return stage in self.frozen_stages


def _size2(size):
    if isinstance(size, int):
        return (size, size)
    h, w = size
    return (int(h), int(w))


def conv_params(spec):
    h = spec.hyper
    return ConvParams(
        out_channels=h["out_channels"],
        kernel_h=h["kernel"],
        kernel_w=h["kernel"],
        stride=h.get("stride", 1),
        pad=h.get("pad", 0),
        groups=h.get("groups", 1),
    )


def _infer_stack(layers, shape, num_classes):
    shapes = []
    for ls in layers:
        k = ls.kind
        if k == "conv":
            if len(shape) != 3:
                raise ConfigurationError(f"{ls.name}: conv needs a C×H×W input, got {shape}")
            cp = conv_params(ls)
            cp.weight_shape(shape[0])
            shape = (cp.out_channels, *cp.output_hw(shape[1], shape[2]))
        elif k == "maxpool":
            if len(shape) != 3:
                raise ConfigurationError(f"{ls.name}: maxpool needs a C×H×W input, got {shape}")
            shape = (shape[0], *pool_output_hw(shape[1], shape[2], ls.hyper["size"], ls.hyper["stride"]))
        elif k == "lrn":
            if ls.hyper.get("n", 5) % 2 == 0:
                raise ConfigurationError(f"{ls.name}: LRN window must be odd")
        elif k == "flatten":
            d = 1
            for v in shape:
                d *= v
            shape = (d,)
        elif k in ("fully_connected", "softmax"):
            if len(shape) != 1:
                raise ConfigurationError(f"{ls.name}: {k} needs a flat input, got {shape}")
            shape = (ls.hyper["outputs"],)
            if k == "softmax" and shape[0] != num_classes:
                raise ConfigurationError(f"{ls.name}: softmax has {shape[0]} outputs, expected {num_classes}")
        shapes.append((ls.name, shape))
    return shape, shapes


def infer_shapes(spec):
    """Symbolic shape pass; returns ``[(qualified_name, shape), ...]`` without the batch axis.

    Raises ConfigurationError if any consecutive pair of layers does not compose.
    """
    h, w = _size2(spec.input_size)
    out = []
    if spec.is_branched:
        if sum(b.channels for b in spec.branches) != spec.input_channels:
            raise ConfigurationError("branch channels do not add up to input_channels")
        widths = []
        for br in spec.branches:
            final, shapes = _infer_stack(br.layers, (br.channels, h, w), spec.num_classes)
            out.extend((f"{br.name}.{n}", s) for n, s in shapes)
            if len(final) != 1:
                raise ConfigurationError(f"branch {br.name} must end in a flat feature vector")
            widths.append(final[0])
        fusion = spec.layers[0]
        if fusion.kind != "concat":
            raise ConfigurationError("branched nets must start their head with a concat layer")
        mode = fusion.hyper.get("mode", "concat")
        if mode == "concat":
            shape = (sum(widths),)
        else:
            if len(set(widths)) != 1:
                raise ConfigurationError("sum fusion needs equal branch widths")
            shape = (widths[0],)
        out.append((fusion.name, shape))
        _, shapes = _infer_stack(spec.layers[1:], shape, spec.num_classes)
    else:
        _, shapes = _infer_stack(spec.layers, (spec.input_channels, h, w), spec.num_classes)
    out.extend(shapes)
    return out


def validate(spec):
    """Check the structural invariants and shape composition of ``spec``."""
    terminal = [ls for _, ls in spec.all_layers() if ls.kind == "softmax"]
    if len(terminal) != 1 or spec.layers[-1].kind != "softmax":
        raise ConfigurationError("a network needs exactly one softmax layer, at the end")
    stacks = [b.layers for b in spec.branches] + [spec.layers]
    for stack in stacks:
        stages = [ls.stage for ls in stack if ls.stage > 0]
        if stages != sorted(stages):
            raise ConfigurationError("stage indices must be nondecreasing along the network")
    names = [p + ls.name for p, ls in spec.all_layers()]
    if len(names) != len(set(names)):
        raise ConfigurationError("layer names must be unique")
    infer_shapes(spec)
    return spec


def build_vanilla(input_size=227, in_channels=3, num_classes=NUM_CLASSES, fc_width=4096):
    """``96F(11x11) - relu - maxpool 6x6 - dropout 0.5 - 4096I - relu - 4096I - 10S``.

    Conv stride 4 / pad 0 and pool stride 6 are not given by the layout and
    follow the reference architecture.
    """
    layers = (
        LayerSpec("conv", "conv1", 1, {"out_channels": 96, "kernel": 11, "stride": 4, "pad": 0, "groups": 1}),
        LayerSpec("relu", "relu1", 1),
        LayerSpec("maxpool", "pool1", 1, {"size": 6, "stride": 6}),
        LayerSpec("dropout", "drop1", 0, {"ratio": 0.5}),
        LayerSpec("flatten", "flatten", 0),
        LayerSpec("fully_connected", "fc6", 0, {"outputs": fc_width}),
        LayerSpec("relu", "relu6", 0),
        LayerSpec("fully_connected", "fc7", 0, {"outputs": fc_width}),
        LayerSpec("softmax", "fc8", 0, {"outputs": num_classes}),
    )
    spec = NetworkSpec(layers, in_channels, _size2(input_size), num_classes, arch="vanilla")
    try:
        return validate(spec)
    except ConfigurationError as exc:
        raise ConfigurationError(f"input size {input_size} too small for the vanilla net: {exc}") from exc


DEEP_WIDTHS = (96, 256, 384, 384, 384)


def _deep_stages(widths, groups, lrn):
    w1, w2, w3, w4, w5 = widths
    lrn = {**LRN_DEFAULTS, **(lrn or {})}

    def conv(name, stage, out, kernel, stride, pad, g):
        return LayerSpec("conv", name, stage,
                         {"out_channels": out, "kernel": kernel, "stride": stride, "pad": pad, "groups": g})

    pool = {"size": 3, "stride": 2}
    return [
        conv("conv1", 1, w1, 11, 4, 0, 1),
        LayerSpec("relu", "relu1", 1),
        LayerSpec("maxpool", "pool1", 1, dict(pool)),
        LayerSpec("lrn", "norm1", 1, dict(lrn)),
        conv("conv2", 2, w2, 5, 1, 2, groups),
        LayerSpec("relu", "relu2", 2),
        LayerSpec("maxpool", "pool2", 2, dict(pool)),
        LayerSpec("lrn", "norm2", 2, dict(lrn)),
        conv("conv3", 3, w3, 3, 1, 1, 1),
        LayerSpec("relu", "relu3", 3),
        conv("conv4", 4, w4, 3, 1, 1, groups),
        LayerSpec("relu", "relu4", 4),
        conv("conv5", 5, w5, 3, 1, 1, groups),
        LayerSpec("relu", "relu5", 5),
        LayerSpec("maxpool", "pool5", 5, dict(pool)),
    ]


def _mlp(fc_width):
    return [
        LayerSpec("flatten", "flatten", 0),
        LayerSpec("fully_connected", "fc6", 0, {"outputs": fc_width}),
        LayerSpec("relu", "relu6", 0),
        LayerSpec("dropout", "drop6", 0, {"ratio": 0.5}),
        LayerSpec("fully_connected", "fc7", 0, {"outputs": fc_width}),
        LayerSpec("relu", "relu7", 0),
        LayerSpec("dropout", "drop7", 0, {"ratio": 0.5}),
    ]


def build_deep(input_channels=3, input_size=227, num_classes=NUM_CLASSES, widths=DEEP_WIDTHS,
               fc_width=4096, groups=2, lrn=None):
    """Five filter stages (stage_index 1..5) followed by the dropout MLP (stage 0).

    ``widths``/``fc_width`` exist so tests can run the same topology at a
    fraction of the cost; the defaults are the published layout.
    """
    layers = _deep_stages(widths, groups, lrn) + _mlp(fc_width)
    layers.append(LayerSpec("softmax", "fc8", 0, {"outputs": num_classes}))
    return validate(NetworkSpec(tuple(layers), input_channels, _size2(input_size), num_classes, arch="deep"))


def build_branched(fusion="concat", input_size=227, num_classes=NUM_CLASSES, widths=DEEP_WIDTHS,
                   fc_width=4096, groups=2, lrn=None):
    """Reflectance and shading towers sharing one softmax layer.

    The input carries six channels: reflectance (3) then replicated
    shading (3). ``fusion="concat"`` joins the penultimate features,
    ``fusion="sum"`` adds per-tower logits; either way one softmax.
    """
    if fusion not in ("concat", "sum"):
        raise ConfigurationError(f"unknown fusion {fusion!r}")
    tower = tuple(_deep_stages(widths, groups, lrn) + _mlp(fc_width))
    branches = (Branch("reflectance", 3, tower), Branch("shading", 3, tower))
    head = (
        LayerSpec("concat", "fuse", 0, {"mode": fusion}),
        LayerSpec("softmax", "fc8", 0, {"outputs": num_classes}),
    )
    spec = NetworkSpec(head, 6, _size2(input_size), num_classes, branches=branches, arch="branched")
    return validate(spec)


def freeze_stages(net, k):
    """Freeze filter stages ``1..k``; the MLP head (stage 0) always trains."""
    n_stages = len(net.stages())
    if not 0 <= k <= n_stages:
        raise ConfigurationError(f"cannot freeze {k} stages of a net with {n_stages}")
    return FreezeMask(frozenset(range(1, k + 1)))

"""Convnet material classification on numpy: layers, architectures, AdaGrad
training, intrinsic-image inputs, dataset curation and diagnostics."""

__version__ = "0.1.0"

from .architectures import (  # noqa: E402
    FreezeMask,
    LayerSpec,
    NetworkSpec,
    build_branched,
    build_deep,
    build_vanilla,
    freeze_stages,
    infer_shapes,
)
from .errors import (  # noqa: E402
    ConfigurationError,
    DatasetError,
    MatforgeError,
    NonFiniteError,
    StateError,
    TrainingError,
    WeightsError,
)
from .network import Network, forward  # noqa: E402
from .optim import AdaGradState, TrainingConfig, adagrad_step, evaluate, lr_at, train  # noqa: E402

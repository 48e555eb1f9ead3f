"""Tensor kernels and layers. Tensors are plain numpy arrays in (N, C, H, W) order."""

from .functional import (
    ConvParams,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    dropout_forward,
    fc_backward,
    fc_forward,
    lrn_backward,
    lrn_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_loss,
)
from .gradcheck import gradient_check, numerical_gradient, relative_error
from .layers import (
    LRN,
    Conv2D,
    Dropout,
    Flatten,
    FullyConnected,
    Layer,
    MaxPool,
    ReLU,
    SoftmaxClassifier,
    SoftmaxLoss,
)

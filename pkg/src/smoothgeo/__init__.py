"""smoothgeo: robustness of gradient-based attributions at desk scale."""

from .autodiff import Tensor, backward, finite_diff_gradient, finite_diff_hessian
from .nn import (
    Network,
    QuantityOfInterest,
    ScalarQoI,
    forward_logits,
    init_network,
    input_jacobian,
    load_checkpoint,
    predict,
    quantity,
    save_checkpoint,
    with_softplus,
)

__version__ = "0.1.0"

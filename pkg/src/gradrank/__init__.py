"""Gradient-rank analysis: an autodiff engine for dense, recurrent and
convolutional networks, closed-form gradient rank bounds, and experiments
that measure numerical ranks against them."""

__version__ = "0.1.0"

from .bounds import (  # noqa: E402
    BoundInputs, conv_bound, conv_out_size, linear_bound, leaky_threshold_post,
    leaky_threshold_pre, rnn_bound,
)
from .estimator import GradientRankNetwork  # noqa: E402
from .linalg import DecompositionError, machine_epsilon, numerical_rank, svd  # noqa: E402
from .network import (  # noqa: E402
    Activation, Conv, Dense, NetworkSpec, Recurrent, backward, forward, init_parameters,
)

__all__ = [
    "Activation", "BoundInputs", "Conv", "DecompositionError", "Dense", "GradientRankNetwork",
    "NetworkSpec", "Recurrent", "backward", "conv_bound", "conv_out_size", "forward",
    "init_parameters", "leaky_threshold_post", "leaky_threshold_pre", "linear_bound",
    "machine_epsilon", "numerical_rank", "rnn_bound", "svd",
]

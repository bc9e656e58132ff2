from .tensor import Tensor, concat, log_softmax, logsumexp, no_grad, softmax, stack, where_const
from .layers import (
    Conv2d,
    Dense,
    GroupNorm,
    Lambda,
    LayerNorm,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    Sequential,
    Transformer,
    TransformerBlock,
    upsample2x,
)
from .gmm import (
    LOG_2PI,
    floor_std,
    gaussian_kl,
    gaussian_reparameterize,
    gmm_log_prob,
    gmm_sample,
    kl_to_gaussian_mixture,
)
from .optim import Adam, adam_step
from .gradcheck import check_input_gradient, check_module_gradients
from .checkpoint import CheckpointError, load_arrays, load_module, save_arrays, save_module

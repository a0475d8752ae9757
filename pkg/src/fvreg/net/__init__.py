"""Toy localization network: layers, dual-branch model, and training."""

from .layers import (
    AdamState,
    adam_step,
    avgpool2,
    avgpool2_backward,
    conv2d_backward,
    conv2d_forward,
    conv3d_backward,
    conv3d_forward,
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
    relu_backward,
)
from .model import (
    FvrNetConfig,
    backward,
    forward,
    frame_branch,
    fuse_and_localize,
    infer,
    init_params,
    loss_and_grad,
    volume_branch,
)
from .train import (
    LOG_CSV_HEADER,
    TrainConfig,
    TrainSample,
    load_params,
    log_to_csv,
    sample_pair,
    save_params,
    train,
)

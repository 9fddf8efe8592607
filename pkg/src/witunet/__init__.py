"""Windowed-transformer U-net with nested dense skip pathways for low-dose-CT
style image denoising, built on a small numpy autodiff core."""

from .errors import (
    ConfigError,
    ShapeError,
    StateError,
    TrainingDiverged,
    UsageError,
    WitunetError,
)
from .tensor import Tensor, GradTape, no_grad, load_wten, save_wten
from .nn import ConvSpec, conv2d, conv_transpose2d, depthwise_conv2d, gelu, layer_norm, linear, softmax
from .window import (
    AttentionParams,
    WindowGrid,
    attention_flops,
    relative_position_index,
    w_msa,
    window_merge,
    window_partition,
)
from .blocks import LiPeParams, MlpParams, WTBlockParams, channel_projection, lipe, wt_block, wt_stack
from .network import (
    NetConfig,
    NodeId,
    ParamStore,
    WiTUnet,
    downsample,
    forward,
    init_params,
    input_embed,
    intermediate_node,
    load_checkpoint,
    node_graph,
    param_count,
    save_checkpoint,
    upsample,
)
from .metrics import MetricConfig, MetricReport, mse, psnr, report, rmse, ssim
from .data import (
    ImagePair,
    NoiseSpec,
    PhantomSpec,
    augment,
    build_corpus,
    degrade,
    denormalize,
    make_phantom,
    normalize,
)
from .training import OptimConfig, TrainLog, adamw_step, evaluate, loss_mse, train

__version__ = "0.1.0"

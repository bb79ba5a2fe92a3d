"""Max-Min pooling and Edge Attention Module branches for small CNNs."""

from .eam import EamBranch, EamConfig, ablation_swap_pool, attach_branches, build_eam, strip_branches
from .errors import (
    ConfigurationError,
    DatasetError,
    DimensionError,
    EamError,
    TrainingDivergedError,
    UsageError,
    ValidationError,
)
from .graph import NetworkGraph
from .layers import ConvSpec, concat_channels, conv2d, dense, global_average_pool, softmax_xent
from .model import VARIANTS, BlockSpec, Model, build_backbone, default_blocks, make_variant
from .pooling import PoolSpec, WindowStats, edge_map, max_pool, maxmin_pool, output_extent, pool_backward, window_stats
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

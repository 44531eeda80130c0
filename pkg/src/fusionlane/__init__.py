"""Lane marking segmentation from fused LIDAR bird's-eye-view rasters and
camera-derived segmentation maps."""

from .bev import CbevImage, LbevImage, colorize_labels, ipm_transform, rasterize_lbev, world_to_pixel
from .dataset import (
    Sample,
    SequenceSample,
    expand_training_set,
    load_dataset,
    make_sequences,
    random_crop_sequence,
    rotate_augment,
)
from .metrics import ConfusionMatrix
from .network import ConvLstmCell, FusionLaneModel, forward_sequence
from .optim import ParamStore, optimizer_step
from .pointcloud import LidarPoint, PointCloudFrame, filter_roi, read_velodyne_bin
from .tensor import (
    Tensor,
    backward,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    conv2d,
    depthwise_separable_conv,
    global_average_pool,
    no_grad,
    weighted_cross_entropy,
)
from .trainer import (
    TrainConfig,
    TrainLog,
    compute_class_weights,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

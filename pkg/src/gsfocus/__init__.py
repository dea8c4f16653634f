"""Differentiable Gaussian splatting with attention-weighted losses, scale
constraints and block-wise reconstruction of large scenes."""

from ._backend import BACKEND
from .attention import QKVProjector, assemble_attention_map, attention_map, compute_patch_attention, enhance
from .config import TrainConfig, load_config, scaled_schedule
from .constraints import (ConstraintConfig, DensifyConfig, apply_scale_constraint, densify_and_prune,
                          init_scales, selective_split)
from .core import Camera, GaussianCloud, RenderSettings, covariance_3d, project_gaussian
from .errors import (ContractError, FormatError, GSFocusError, InsufficientDataError,
                     InvalidParameterError, NumericalAbort, UnsupportedModelError, ValidationError)
from .losses import (LossReport, LossWeights, dssim_loss, edge_loss, frequency_loss, l1_loss, psnr, ssim,
                     total_loss)
from .optimizer import AdamState, TrainingData, adam_step, train
from .partitioner import (assign_cameras, compute_bounds, export_bundles, filter_outliers, merge_blocks,
                          subdivide)
from .ply import read_ply, write_ply
from .rasterizer import GradientBuffer, render, render_backward
from .sfm import load_sfm, write_sfm

__version__ = "0.1.0"

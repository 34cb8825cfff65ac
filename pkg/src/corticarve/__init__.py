"""Synthesis-trained 3D brain extraction toolkit."""

from .distance import (
    SDTVolume,
    band_target,
    exact_edt,
    mask_from_sdt,
    signed_distance_transform,
    surface_voxels,
)
from .geometry import (
    AffineSample,
    DenseDeformation,
    VelocityField,
    integrate_svf,
    sample_affine,
    warp_volume,
)
from .inference import strip
from .losses import LossResult, dice_loss, sdt_loss
from .metrics import (
    CohortSummary,
    MaskReport,
    dice_overlap,
    discordant_voxel_pct,
    exposed_boundary_pct,
    paired_t_test,
    surface_distances,
    volume_difference,
)
from .synthesis import (
    SynthesisConfig,
    SynthSample,
    fit_extracerebral_labels,
    merge_brain_labels,
    synthesize_sample,
)
from .train import TrainConfig, TrainState, train_loop, update_lr_on_plateau
from .unet import UNetConfig, UNetModel, adam_step, load_checkpoint, save_checkpoint, unet_backward, unet_forward
from .volume import BinaryMask, Grid, LabelVolume, ScalarVolume, conform, resample_to_grid, trilinear_sample

__version__ = "0.1.0"

"""Hemispherical-array photoacoustic simulation, compensation, and recon."""

from .geometry import (
    SystemConfig,
    TransducerPose,
    VoxelGrid,
    build_array,
    config_hash,
    desk_config,
    pose_arrays,
)
from .forward import (
    FrequencyGrid,
    PressureTensor,
    Sphere,
    add_noise,
    noise_scale,
    simulate,
    sir_spectrum,
    sphere_trace_point,
)
from .dataset import (
    SphereDistribution,
    deterministic_spheres,
    generate_dataset,
    load_sample,
)
from .recon import Volume, presmooth, time_derivative, ubp, ubp_points
from .metrics import (
    FwhmFit,
    ShellMask,
    dice,
    fit_fwhm,
    frangi,
    mann_whitney_one_sided,
    ncc,
    rse,
    shell_mask,
    triangle_threshold,
)
from .compensation import (
    DeconvNetModel,
    Hyperparams,
    PatchSpec,
    SirKernel,
    SynthesisNetSpec,
    forward_patch,
    infer_full,
    init_model,
    load_checkpoint,
    mae_loss,
    save_checkpoint,
    train,
    wiener_deconvolve,
)

__version__ = "0.1.0"

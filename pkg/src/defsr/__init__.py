"""Reference-based x4 super-resolution with guided diffusion enhancement.

The pipeline enhances a low-resolution input with null-space-guided
diffusion sampling, matches its feature pyramid against a reference
image, transfers reference texture through confidence-gated deformable
sampling, and aggregates the result back onto the enhanced image.
"""

from .correspond import (
    FeaturePyramid,
    build_correspondence,
    build_extractor,
    correspondence_fields,
    extract_pyramid,
)
from .diffusion import (
    GaussianPriorDenoiser,
    LearnedTinyDenoiser,
    NoiseSchedule,
    OracleDenoiser,
    SamplerConfig,
    ZeroDenoiser,
    build_schedule,
    forward_diffuse,
    sample,
)
from .imagecore import bicubic_resize, load_image, save_image, to_y_channel
from .linop import LinearOperator, build_downsampler
from .metrics import psnr_y, ssim_y, write_report
from .rng import derive_seed, make_rng, spawn_rng
from .tiling import plan_tiles, tiled_sample
from .training import (
    CorpusSpec,
    LossConfig,
    TrainConfig,
    adam_step,
    composite_loss,
    evaluate_corpus,
    load_checkpoint,
    make_corpus,
    prepare_pairs,
    save_checkpoint,
    train,
    train_denoiser,
    write_corpus,
)
from .transfer import (
    build_level_inputs,
    forward_sr,
    gradient_selfcheck,
    init_aggregator_params,
    init_transfer_params,
)
from .cli import PipelineConfig, enhance, run_ablation, run_pipeline

__version__ = "0.1.0"

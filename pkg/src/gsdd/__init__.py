"""Sparse 2D-Gaussian parameterization of image datasets.

Images are represented as small sets of 2D Gaussian primitives (position,
Cholesky covariance factor, color, opacity) rendered by a batched
differentiable splatter with analytic gradients, anti-aliasing, and bf16
quantization; fitting and distribution-matching distillation loops build
synthetic datasets under explicit storage budgets.
"""

from .core import (
    BudgetSpec,
    DistilledSet,
    Gaussian2D,
    RenderConfig,
    TileLayout,
    budget_points,
    clip_positions,
    decompose_tile_id,
    global_tile_id,
    normalized_to_pixel,
    param_offset,
    pixel_to_normalized,
)
from .raster import (
    ImageBuffer,
    IntersectionRecords,
    build_intersection_records,
    cov_from_cholesky,
    prefilter_cov,
    render_batched,
    render_reference,
    ssaa_offsets,
)
from .gradients import (
    GradBuffer,
    bf16_cast,
    bf16_round,
    gradcheck,
    gradcheck_suite,
    render_backward,
)
from .optimize import (
    AdamState,
    FeatureNetSpec,
    TrainConfig,
    adam_step,
    boundary_loss,
    distill_dm,
    dm_loss_grad,
    fit_images,
    mse_loss_grad,
    psnr,
)
from .data_io import (
    LabeledImageDataset,
    export_image,
    load_cifar_binary,
    load_gsd,
    save_gsd,
)
from .analysis import (
    EvalSpec,
    PruneStrategy,
    bench_render,
    importance_score,
    prune_dataset,
    train_eval_classifier,
)

__version__ = "0.1.0"

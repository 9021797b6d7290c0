"""Certified attribution maps for small feedforward networks.

Scores input regions by the drop in the certified adversarial overlap
(the verified worst-case wrong-class margin) when the region is frozen,
with sampled, hybrid, and targeted variants, plus reference attribution
methods and fidelity/robustness metrics.
"""

__version__ = "0.1.0"

from .baselines import (
    AdvResult,
    PgdConfig,
    gradcam,
    gradcampp,
    gradient_input,
    integrated_gradients,
    min_adv_radius,
    occlusion,
    pgd_attack,
    rise,
    saliency,
    smoothgrad,
    vargrad,
)
from .bounds import (
    AffineBounds,
    IntervalBounds,
    LayerBoundsTrace,
    backward_bounds,
    bounds,
    bounds_from_activation,
    combine_bounds,
    forward_affine_bounds,
    ibp_bounds,
)
from .estimators import (
    AttributionMap,
    OverlapScore,
    ao_empirical,
    ao_targeted_upper,
    ao_upper,
    empirical_map,
    eva_empirical,
    eva_hybrid,
    eva_map,
    eva_score,
    hybrid_activation_box,
    hybrid_map,
    targeted_map,
)
from .metrics import (
    MetricReport,
    deletion_auc,
    insertion_auc,
    mu_fidelity,
    mu_fidelity_full,
    robustness_curve,
    robustness_sr,
    stability_check,
    tightness,
)
from .model_io import (
    DataFormatError,
    DatasetSlice,
    ModelFormatError,
    TrainingDiverged,
    cifar_cnn_config,
    load_idx,
    load_model,
    mnist_mlp_config,
    save_idx,
    save_model,
    train_fixture,
)
from .network import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    ReLU,
    ShapeError,
    Softmax,
    forward,
    forward_batch,
    forward_probs,
    gradient,
)
from .perturbation import (
    CellGrid,
    PerturbBox,
    grid_cells,
    grid_for_shape,
    linf_ball,
    lp_ball,
    mask_ball,
    sample_uniform,
    sign_split,
)

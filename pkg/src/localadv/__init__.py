"""Query-efficient local black-box adversarial attacks on image classifiers.

Two-phase attacks: a white-box reference model localizes the discriminative
areas (CAM salience -> binary mask) and pre-perturbs inside them; a
black-box engine (masked gradient estimation or random search) finishes the
job against a query-counted top-1 oracle. Baselines, metrics, and an
experiment harness round out the package.
"""

from .attacks import (
    AdversarialHit,
    PixelGroup,
    fd_gradient_masked,
    ge_attack,
    ge_attack_global,
    local_black_box_attack,
    make_pixel_groups,
    rs_attack,
    rs_attack_fixed_value,
)
from .harness import (
    AttackConfigs,
    BudgetedOracle,
    ExperimentSpec,
    MethodSpec,
    QueryBudgetExceeded,
    RunRecord,
    parse_method,
    run_experiment,
    run_single_attack,
)
from .metrics import (
    CaseBoth,
    LpDistances,
    lp_distances,
    noq_case_all,
    noq_case_both,
    psnr,
    success_rate,
)
from .models import (
    SyntheticDataset,
    ToyConvNet,
    ToyReferenceModel,
    TrainingError,
    accuracy,
    load_model,
    make_black_box,
    make_dataset,
    make_reference,
    save_model,
    train,
)
from .oracle import (
    BlackBoxOracle,
    IdentityAdapter,
    InputAdapter,
    MeanSubtractAdapter,
    Prediction,
    RangeAdapter,
    input_gradient,
    is_adversarial,
    query,
)
from .preattack import (
    local_bim_step,
    multi_reference_preprocess,
    preprocess,
    union_mask,
)
from .salience import (
    binarize,
    grad_cam,
    invert_mask,
    mask_iou,
    random_mask,
    resize_image,
    resize_salience,
    salience_mask,
)
from .types import (
    AttackResult,
    BinaryMask,
    DEFAULT_DOMAIN,
    GEConfig,
    ImageTensor,
    PixelDomain,
    PreprocessConfig,
    RSConfig,
    SalienceMap,
    apply_masked_step,
    clip,
    sign,
)

__version__ = "0.1.0"

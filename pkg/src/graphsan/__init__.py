"""graphsan: sanitize structurally poisoned graphs and measure the recovery.

The pipeline: a poisoner plants ground-truth edge edits, victim detectors
flag suspicious nodes, and the sanitizer greedily deletes the candidate edge
with the largest outer-loss gradient, one edge per step, until the budget is
spent. Metrics compare the deletions against the attacker's edit set, and an
experiment harness reruns the whole thing over seeded grids.
"""

from .bundle import (
    EdgeSet,
    GraphBundle,
    PoisonRecord,
    Split,
    apply_edits,
    laplacian,
    load_bundle,
    load_poison_record,
    normalize_adjacency,
    pca_reduce,
    save_bundle,
    save_poison_record,
    smoothness,
)
from .detectors import (
    DetectorOutput,
    DgmmModel,
    GmeanThreshold,
    HybridFeatures,
    LinkPredModel,
    ThresholdState,
    adaptive_threshold,
    build_hybrid_features,
    classdiv_detect,
    dgmm_energy,
    dgmm_train,
    gmean_threshold,
    js_divergence,
    linkpred_detect,
    linkpred_scores,
    linkpred_train,
    pairwise_kl,
    proximity_metrics,
    reweight_gamma,
    soft_class_prob,
    threshold_init,
)
from .experiment import run_experiment
from .gnn import (
    TrainConfig,
    TrainedGnn,
    accuracy,
    feature_matrix,
    forward,
    load_weights,
    predict,
    propagate,
    row_softmax,
    save_weights,
    train_inner,
)
from .metagrad import (
    LambdaPair,
    OuterLossConfig,
    lambda_schedule,
    mask_gradient,
    meta_gradient,
    outer_loss,
    outer_loss_value,
    select_edge,
)
from .metrics import MetricsReport, cr, esr, evaluate_defense, f1
from .poison import AttackConfig, mettack_like, mixed_prune_fixture, random_attack
from .sanitize import (
    SanitationResult,
    SanitizerConfig,
    StepRecord,
    ensemble,
    focused_cleaner,
    gasoline_d,
    jaccard_prune,
    linkpred_only,
    run_sanitizer,
    save_result,
)
from .synth import plant_cross_edges, sbm_bundle

__version__ = "0.1.0"

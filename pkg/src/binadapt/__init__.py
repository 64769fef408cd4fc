"""Unsupervised domain-adaptive document image binarization.

An encoder-decoder binarizer, its adversarial domain-adaptation variant built
on a gradient-reversal layer, and a probability-histogram correlation gate
that decides per target domain whether adaptation is worth applying.
"""

__version__ = "0.1.0"

from .autodiff import (
    Graph,
    GraphError,
    Tensor,
    adam,
    backward,
    forward,
    grad_check,
    load_checkpoint,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
    sgd,
    write_checkpoint,
)
from .data import (
    Dataset,
    GroundTruth,
    Page,
    PatchGrid,
    PgmError,
    assemble,
    load_dataset,
    make_synthetic_domains,
    read_pgm,
    split_patches,
    write_pgm,
)
from .layers import ConvSpec, GrlSpec, bce_loss, conv2d, conv2d_transpose, dropout, gradient_reversal, grl_lambda_at, relu, sigmoid
from .metrics import Confusion, confusion, f1, precision, recall
from .models import (
    BinDannConfig,
    Model,
    SaeConfig,
    build_bindann,
    build_sae,
    load_model,
    predict_prob_map,
    save_model,
)
from .similarity import (
    USE_DA,
    USE_SAE,
    DegenerateHistogramError,
    DomainHistogram,
    SimilarityReport,
    accumulate_histogram,
    autobindann,
    compare_histograms,
    domain_histogram,
    gate_decision,
    hist_intersection,
    intra_domain_rho,
    js_divergence,
    kl_divergence,
    normalize_histogram,
    pearson,
    run_autobindann,
)
from .training import (
    TrainConfig,
    TrainedBinarizer,
    binarize,
    load_binarizer,
    save_binarizer,
    sweep_threshold,
    train_bindann,
    train_sae,
)

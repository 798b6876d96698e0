"""Uncertainty-aware amalgamation of teachers trained on disjoint label subsets."""
from .amalgamation import (
    METHODS,
    AmalgamationConfig,
    SupervisionTarget,
    amalgamate,
    build_supervision,
    pad,
    synthesize_hard,
    synthesize_soft,
    synthesize_vanilla_kd,
    uhc_loss,
)
from .data import (
    GaussianMixtureConfig,
    LabeledDataset,
    LabelPartition,
    UnlabeledDataset,
    generate_gaussian_mixture,
    partition_labels,
    restrict,
    strip_labels,
)
from .evaluation import accuracy, confusion_matrix, selection_error_analysis, supervision_quality, uncertainty_histogram
from .nn_core import ModelSpec, backward, forward, init_params, softmax, weighted_kl_loss
from .teachers import Classifier, TeacherModel, TrainConfig, train_oracle, train_teacher
from .uncertainty import MCConfig, assess, calibration_error, confidence, margin_weight, mc_dropout_predict, soft_weights

__version__ = "0.1.0"

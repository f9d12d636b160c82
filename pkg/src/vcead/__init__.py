"""vcead: ensemble anomaly detection for video capsule endoscopy images.

Three base learners (supervised classifier, reconstruction autoencoder,
semi-supervised autoencoder + head) share one lightweight depthwise-
separable backbone; a random forest or SVM stacks their outputs into the
final anomaly decision. Everything runs on an in-package tensor engine
with reverse-mode autodiff.
"""

from .tensor import Tensor, Graph, ShapeError, backward, no_grad
from .ops import forward_op
from .optim import Adam, MissingGradientError
from .base import BaseEstimator, NotFittedError
from .nets import (
    BlockSpec,
    EncoderPreset,
    ModelBundle,
    PRESETS,
    build_bundle,
    count_parameters,
    get_preset,
    load_checkpoint,
    save_checkpoint,
    classifier_forward,
    ae_forward,
    semi_forward,
)
from .data import (
    AugmentPolicy,
    ClassMap,
    KVASIR_CLASS_MAP,
    GALAR_CLASS_MAP,
    Sample,
    SplitSpec,
    augment,
    load_manifest,
    patient_split,
    resize,
    synth_dataset,
    weighted_sampler,
)
from .train import (
    TrainConfig,
    TrainReport,
    ce_loss,
    mse_loss,
    train_autoencoder,
    train_classifier,
    train_semi,
)
from .forest import ForestClassifier
from .svm import SvmClassifier
from .ensemble import (
    FeatureVector,
    StackedEnsemble,
    extract_features,
    feature_matrix,
    random_search,
)
from .metrics import ConfusionCounts, MetricsReport, auc, confusion, mcc, prf_accuracy

__version__ = "0.1.0"

"""Bounded parametric-sigmoid feature squashing for small classifiers.

The package bundles a float64 autodiff tensor core, the squashing layer
with its seven fixed/trainable parameter modes, three classification
losses (cross-entropy and two angular-margin softmaxes), small MLP and
residual backbones, an SGD training protocol, evaluation tools, and a
CLI with bit-exact checkpoints.
"""

from .tensor import Tensor, grad_check
from .psn import PsnMode, PsnParams, psn_from_mode, psn_partials, psn_value, sigmoid
from .losses import AngularSoftmax, ArcFace, CrossEntropy, LossOutput
from .models import BackboneConfig, PsnetModel, build_model, forward_features, forward_logits
from .training import TrainConfig, lr_at_epoch, train
from .data_eval import (
    Dataset,
    ArraySet,
    cluster_centroid_report,
    evaluate_classification,
    evaluate_verification,
    load_idx,
    make_synthetic,
    normalize,
)

__version__ = "0.1.0"

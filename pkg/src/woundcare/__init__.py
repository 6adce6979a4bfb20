"""Multi-label surgical wound assessment.

Pipeline: decode and CLAHE-normalize smartphone wound photos, fine-tune
three truncated VGG-16 variants (frozen through layers 6, 10, and 14),
combine them by per-label majority vote, evaluate with confusion
metrics and ROC/AUC, and serve assessments over HTTP.
"""

from .dataset import LABELS, LabelVector, ManifestEntry, DatasetSplit
from .ensemble import Assessment, EnsembleBundle, assess, majority_vote
from .imaging import ClaheConfig, ModelInput, RawImage, apply_clahe, decode_image
from .network import ModelHandle, ModelVariant, VARIANTS, build_model, predict
from .training import TrainConfig, TrainReport, bce_loss, train

__version__ = "0.1.0"

__all__ = [
    "LABELS",
    "LabelVector",
    "ManifestEntry",
    "DatasetSplit",
    "Assessment",
    "EnsembleBundle",
    "assess",
    "majority_vote",
    "ClaheConfig",
    "ModelInput",
    "RawImage",
    "apply_clahe",
    "decode_image",
    "ModelHandle",
    "ModelVariant",
    "VARIANTS",
    "build_model",
    "predict",
    "TrainConfig",
    "TrainReport",
    "bce_loss",
    "train",
    "__version__",
]

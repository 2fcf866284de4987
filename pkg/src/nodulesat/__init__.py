"""NoduleSAT: set attention over bags of nodules, on a float64 numpy autograd core."""

from .attention import GSALayer, SATConfig, SetAttentionTransformer, gsa_forward, param_count_ratio, sat_forward
from .backbone import FPR_BACKBONE, MALIGNANCY_BACKBONE, TINY_BACKBONE, BackboneConfig, DenseNet3D, backbone_forward
from .estimator import HUNormalizer, IsotropicResampler, NoduleSATClassifier
from .metrics import Candidate, auc, cpm, froc, kfold_by_patient
from .mil import InstanceBag, NoduleSAT, batch_sets, masked_bce, nodulesat_forward, train_bag_batch
from .preprocess import AugmentSpec, Volume, augment, crop_patch, hu_normalize, resample_trilinear
from .synth import NoduleAnnotation, SynthSpec, generate_bags, label_from_scores

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "BackboneConfig",
    "Candidate",
    "DenseNet3D",
    "FPR_BACKBONE",
    "GSALayer",
    "HUNormalizer",
    "InstanceBag",
    "IsotropicResampler",
    "MALIGNANCY_BACKBONE",
    "NoduleAnnotation",
    "NoduleSAT",
    "NoduleSATClassifier",
    "SATConfig",
    "SetAttentionTransformer",
    "SynthSpec",
    "TINY_BACKBONE",
    "Volume",
    "auc",
    "augment",
    "backbone_forward",
    "batch_sets",
    "cpm",
    "crop_patch",
    "froc",
    "generate_bags",
    "gsa_forward",
    "hu_normalize",
    "kfold_by_patient",
    "label_from_scores",
    "masked_bce",
    "nodulesat_forward",
    "param_count_ratio",
    "resample_trilinear",
    "sat_forward",
    "train_bag_batch",
]

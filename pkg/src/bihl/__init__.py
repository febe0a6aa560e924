"""Binarized HL-feature object proposals with border merging."""

from .binmodel import BinarizedModel, decompose, load_model, save_model, score_patch
from .boxes import Proposals, ScoredBox, iou
from .errors import BihlError
from .hlfeat import hl_map
from .imgpyr import ImagePlane, ScaleSpec, enumerate_scales, pyramid, read_image
from .merger import MergeConfig, merge_boxes
from .proposer import ProposerConfig, nms, propose
from .trainer import TrainConfig, train_model

__version__ = "0.1.0"

__all__ = [
    "BihlError", "BinarizedModel", "ImagePlane", "MergeConfig", "Proposals", "ProposerConfig",
    "ScaleSpec", "ScoredBox", "TrainConfig", "decompose", "enumerate_scales", "hl_map", "iou",
    "load_model", "merge_boxes", "nms", "propose", "pyramid", "read_image", "save_model",
    "score_patch", "train_model",
]

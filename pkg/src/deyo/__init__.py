"""Step-by-step trained end-to-end detector with a convolutional dense branch and a query decoder."""
from .config import ConfigError, ModelConfig
from .data import DatasetManifest, ImageSample, generate_synthetic, load_coco, synthesize
from .evaluation import Detections, EvalReport, GroundTruth, compute_ap, compute_mmr, nms
from .geometry import BoundingBox, giou, iou
from .matching import hungarian
from .query import DEYO, predict
from .trainer import TrainConfig, init_phase2, train_phase1, train_phase2

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "ConfigError", "DEYO", "DatasetManifest", "Detections", "EvalReport", "GroundTruth",
    "ImageSample", "ModelConfig", "TrainConfig", "compute_ap", "compute_mmr", "generate_synthetic", "giou",
    "hungarian", "init_phase2", "iou", "load_coco", "nms", "predict", "synthesize", "train_phase1",
    "train_phase2",
]

"""Network stability analysis (NSA) for unsupervised domain-adaptive object detection."""

from .config import RunConfig, load_config
from .detector import ToyDetector, decode_detections
from .disturbance import DisturbanceConfig, make_hid, make_insd, make_lid
from .evaluation import evaluate_detections
from .geometry import Box, GeoRecord, ImageSample, LabelSet
from .losses import LossConfig, LossReport, WeightConfig, total_objective
from .trainer import TrainState, ema_update, load_checkpoint, run_stage, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Box", "DisturbanceConfig", "GeoRecord", "ImageSample", "LabelSet", "LossConfig", "LossReport",
    "RunConfig", "ToyDetector", "TrainState", "WeightConfig", "decode_detections", "ema_update",
    "evaluate_detections", "load_checkpoint", "load_config", "make_hid", "make_insd", "make_lid",
    "run_stage", "save_checkpoint", "total_objective",
]

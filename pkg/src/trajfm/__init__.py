"""Trajectory foundation model with spatio-temporal rotary attention."""

from .data import Dataset, Poi, PoiIndex, SynthConfig, Trajectory, TrajPoint, generate_synthetic, preprocess
from .embedding import FilePoiProvider, SyntheticPoiProvider
from .geo import LngLat, NormXY, RegionConfig
from .pretrain import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint
from .strformer import ModelConfig, STRFormer
from .tasks import evaluate

__version__ = "0.1.0"

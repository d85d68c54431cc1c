"""Cross-attention fusion of eye-movement, PPG and video-semantic sequences for learner emotion recognition."""

from .data import Dataset, Sample, SynthSpec, generate_dataset, load_dataset
from .model import ModelConfig, forward, init_params
from .preprocess import PrepConfig, Preprocessor
from .training import TrainConfig, fit, run_cv

__version__ = "0.1.0"

__all__ = ["Dataset", "Sample", "SynthSpec", "generate_dataset", "load_dataset", "ModelConfig", "forward",
           "init_params", "PrepConfig", "Preprocessor", "TrainConfig", "fit", "run_cv"]

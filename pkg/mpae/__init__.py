from mpae.harness import ExperimentConfig, GridSearchSpace
from mpae.metrics import dice, evaluate, hausdorff, summarize
from mpae.model import Autoencoder, ModelConfig, TrainConfig, build, load_checkpoint, train
from mpae.representation import Representation, convert, signed_distance
from mpae.store import RunStore
from mpae.synthgen import SynthConfig, generate_dataset
from mpae.volume import DatasetManifest, PhaseMask, VoxelGrid

__all__ = [
    "Autoencoder",
    "DatasetManifest",
    "ExperimentConfig",
    "GridSearchSpace",
    "ModelConfig",
    "PhaseMask",
    "Representation",
    "RunStore",
    "SynthConfig",
    "TrainConfig",
    "VoxelGrid",
    "build",
    "convert",
    "dice",
    "evaluate",
    "generate_dataset",
    "hausdorff",
    "load_checkpoint",
    "signed_distance",
    "summarize",
    "train",
]

"""aberronet: a compact 3D CNN that regresses Zernike amplitudes from PSF
stacks, trained on data streamed from the aberro toolkit."""

from .model import NetSpec, build_model, load_checkpoint, normalize_volume, save_checkpoint
from .stream import FolderSource, PipeSource, StreamFormatError, open_source
from .train import TrainSpec, train

__all__ = [
    "FolderSource",
    "NetSpec",
    "PipeSource",
    "StreamFormatError",
    "TrainSpec",
    "build_model",
    "load_checkpoint",
    "normalize_volume",
    "open_source",
    "save_checkpoint",
    "train",
]

from .layers import ArchitectureError, LayerSpec
from .model import (
    ForwardResult,
    Model,
    backward,
    build_model,
    build_spectrogram_model,
    build_waveform_model,
    forward,
)
from .optim import AdamState, adam_step
from .tensor import Tape, TapeError, Tensor

__all__ = [
    "AdamState", "ArchitectureError", "ForwardResult", "LayerSpec", "Model", "Tape",
    "TapeError", "Tensor", "adam_step", "backward", "build_model",
    "build_spectrogram_model", "build_waveform_model", "forward",
]

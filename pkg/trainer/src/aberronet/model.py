"""The regressor: five conv blocks, two dense layers, linear output.

Each block is two 3x3x3 convolutions followed by max pooling; tanh on every
hidden layer. Pooling pads with "same" semantics (ceil division) so the five
blocks apply to non-power-of-two inputs like 50^3. With the default widths
the model lands near 0.9M parameters for a 32^3 input.

Input volumes are normalized by their own maximum before entering the
network, identically at training and prediction time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

DEFAULT_WIDTHS = (8, 16, 32, 64, 128)
DEFAULT_DENSE = 64


@dataclass(frozen=True)
class NetSpec:
    input_shape: tuple[int, int, int]  # (nz, ny, nx)
    mode_set: tuple[int, ...]
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dense_units: int = DEFAULT_DENSE

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "mode_set": list(self.mode_set),
            "widths": list(self.widths),
            "dense_units": self.dense_units,
            "normalization": "divide by per-volume max",
            "conv_padding": "same, with biases",
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NetSpec":
        return cls(
            input_shape=tuple(obj["input_shape"]),
            mode_set=tuple(obj["mode_set"]),
            widths=tuple(obj.get("widths", DEFAULT_WIDTHS)),
            dense_units=int(obj.get("dense_units", DEFAULT_DENSE)),
        )


def normalize_volume(vol: np.ndarray) -> np.ndarray:
    """Per-volume max normalization; zero volumes pass through unchanged."""
    vol = np.asarray(vol, dtype=np.float32)
    peak = float(vol.max())
    return vol / peak if peak > 0 else vol


def build_model(spec: NetSpec):
    from tensorflow import keras
    from keras import layers

    inp = keras.Input(shape=(*spec.input_shape, 1))
    x = inp
    for width in spec.widths:
        x = layers.Conv3D(width, 3, padding="same", activation="tanh")(x)
        x = layers.Conv3D(width, 3, padding="same", activation="tanh")(x)
        x = layers.MaxPool3D(pool_size=2, padding="same")(x)
    x = layers.Flatten()(x)
    x = layers.Dense(spec.dense_units, activation="tanh")(x)
    out = layers.Dense(len(spec.mode_set), activation="linear")(x)
    return keras.Model(inp, out)


def save_checkpoint(model, spec: NetSpec, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.save(directory / "model.keras")
    (directory / "netspec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return directory


def load_checkpoint(directory: str | Path):
    from tensorflow import keras

    directory = Path(directory)
    spec = NetSpec.from_dict(json.loads((directory / "netspec.json").read_text()))
    model = keras.models.load_model(directory / "model.keras")
    return model, spec

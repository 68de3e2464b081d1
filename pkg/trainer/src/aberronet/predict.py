"""Batched prediction from NPY stacks to the toolkit's amplitude JSON."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import load_checkpoint, normalize_volume


def predict_stacks(checkpoint: str | Path, stack_paths: list[str | Path]) -> dict[str, dict[str, float]]:
    """One forward pass over all stacks; keys are the file stems.

    The returned mapping {stem: {noll: amplitude_um}} is the primary
    toolkit's amplitude-vector JSON schema, directly consumable by its
    evaluation commands.
    """
    model, spec = load_checkpoint(checkpoint)
    volumes = []
    for path in stack_paths:
        vol = np.load(path)
        if vol.shape != spec.input_shape:
            raise ValueError(
                f"{path}: stack shape {vol.shape} does not match the "
                f"checkpoint input {spec.input_shape}"
            )
        volumes.append(normalize_volume(vol))
    x = np.stack(volumes)[..., None]
    preds = model.predict(x, verbose=0)
    out = {}
    for path, row in zip(stack_paths, preds):
        out[Path(path).stem] = {
            str(noll): float(a) for noll, a in zip(spec.mode_set, row)
        }
    return out

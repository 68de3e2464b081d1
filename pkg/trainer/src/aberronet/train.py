"""Training loop: MSE on amplitudes, Adam at 1e-4, streamed batches."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import NetSpec, build_model, normalize_volume, save_checkpoint


@dataclass(frozen=True)
class TrainSpec:
    steps: int = 3000  # desk scale; the full-scale reference setting is 50000
    batch_size: int = 2
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train(source, spec: TrainSpec, out_dir: str | Path, log_every: int = 100) -> Path:
    """Consume a batch source (pipe or folder) and write a checkpoint.

    The source's header fixes the input shape and mode set. Deterministic for
    a fixed seed and stream up to framework kernel reproducibility. Writes
    model.keras, netspec.json and a per-step loss.csv.
    """
    import tensorflow as tf

    tf.keras.utils.set_random_seed(spec.seed)

    cfg = source.header["config"]
    net = NetSpec(
        input_shape=(cfg["nz"], cfg["ny"], cfg["nx"]),
        mode_set=tuple(source.header["sampler"]["mode_set"]),
    )
    model = build_model(net)
    model.compile(
        optimizer=tf.keras.optimizers.Adam(spec.learning_rate), loss="mse"
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    t0 = time.perf_counter()
    batches = source.batches()
    for step in range(1, spec.steps + 1):
        vols, amps = next(batches)
        x = np.stack([normalize_volume(v) for v in vols])[..., None]
        loss = float(model.train_on_batch(x, amps))
        losses.append(loss)
        if log_every and step % log_every == 0:
            recent = np.mean(losses[-log_every:])
            print(f"step {step}/{spec.steps}  loss {recent:.3e}", flush=True)

    save_checkpoint(model, net, out_dir)
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mse"])
        for i, loss in enumerate(losses, start=1):
            writer.writerow([i, repr(loss)])
    elapsed = time.perf_counter() - t0
    print(f"trained {spec.steps} steps in {elapsed:.0f}s -> {out_dir}", flush=True)
    return out_dir

"""aberronet: train the amplitude regressor, predict from NPY stacks."""

from __future__ import annotations

import json
import time
from pathlib import Path

import click

from .stream import open_source
from .train import TrainSpec, train as run_train


@click.group()
def main():
    """Desk-scale CNN amplitude regressor for PSF stacks."""


@main.command("train")
@click.option("--source", required=True,
              help='Dataset directory, or "preset:<name>" to stream live.')
@click.option("--steps", type=int, default=3000, show_default=True)
@click.option("--batch", type=int, default=2, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--modes", default="5-15", show_default=True,
              help="Mode set for live streaming sources.")
@click.option("--photons", type=float, default=5000.0, show_default=True)
@click.option("--gaussian-sigma", type=float, default=2.0, show_default=True)
@click.option("--out", required=True, help="Checkpoint directory.")
def train_cmd(source, steps, batch, lr, seed, modes, photons, gaussian_sigma, out):
    """Train on a stream or folder; writes model.keras, netspec.json, loss.csv."""
    spec = TrainSpec(steps=steps, batch_size=batch, learning_rate=lr, seed=seed)
    kwargs = {}
    if source.startswith("preset:"):
        kwargs = {
            "mode_set": _parse_modes(modes),
            "seed": seed,
            "photons": photons,
            "gaussian_sigma": gaussian_sigma,
        }
    with open_source(source, batch_size=batch, **kwargs) as src:
        run_train(src, spec, out)


def _parse_modes(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(t) for t in text.split(",") if t)


@main.command("predict")
@click.option("--checkpoint", required=True)
@click.option("--stacks", required=True, multiple=True,
              help="NPY stack path or glob (repeatable).")
@click.option("--out", required=True, help="Predictions JSON path.")
def predict_cmd(checkpoint, stacks, out):
    """Predict amplitudes for NPY stacks in one batched forward pass."""
    from .predict import predict_stacks

    paths: list[Path] = []
    for pattern in stacks:
        p = Path(pattern)
        matches = sorted(p.parent.glob(p.name)) if any(c in p.name for c in "*?[") else [p]
        paths.extend(matches)
    if not paths:
        raise click.ClickException("no stacks matched")
    t0 = time.perf_counter()
    preds = predict_stacks(checkpoint, paths)
    elapsed = time.perf_counter() - t0
    Path(out).write_text(json.dumps(preds, indent=1) + "\n")
    click.echo(
        f"predicted {len(paths)} stacks in {elapsed:.2f}s "
        f"({elapsed / len(paths) * 1e3:.1f} ms/image) -> {out}"
    )


if __name__ == "__main__":
    main()

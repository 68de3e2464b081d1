"""Secondary acceptance: desk-scale training beats the zero predictor and
batch prediction outpaces the iterative fit.

Run with `pytest tests/test_acceptance.py -v -s`. The whole file talks to the
PSF toolkit only through its CLI and file formats.
"""

import json
import subprocess
import time
from pathlib import Path

import numpy as np
import pytest

from aberronet import PipeSource, TrainSpec, train
from aberronet.predict import predict_stacks

MODES = (5, 7)
STEPS = 3000
HELD_OUT = 200
ZERO_PREDICTOR_RMS = 0.15 / np.sqrt(12)  # std of uniform(-0.075, 0.075)


def aberro(*args, timeout=900):
    return subprocess.run(["aberro", *args], check=True, capture_output=True,
                          timeout=timeout)


@pytest.fixture(scope="module")
def desk_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "ckpt"
    t0 = time.perf_counter()
    with PipeSource("point_scanning", mode_set=MODES, seed=7, batch_size=2) as src:
        train(src, TrainSpec(steps=STEPS, batch_size=2, seed=7), out, log_every=500)
    print(f"[info] desk training: {time.perf_counter() - t0:.0f}s for {STEPS} steps")
    return out


@pytest.fixture(scope="module")
def held_out(tmp_path_factory):
    path = tmp_path_factory.mktemp("val") / "d"
    aberro("--seed", "1234", "dataset", "gen", "--preset", "point_scanning",
           "--count", str(HELD_OUT), "--modes", "5,7", "--out", str(path))
    return path


def test_desk_training_beats_zero_predictor(desk_checkpoint, held_out):
    t0 = time.perf_counter()
    manifest = json.loads((held_out / "manifest.json").read_text())
    paths = [held_out / rec["file"] for rec in manifest["samples"]]
    preds = predict_stacks(desk_checkpoint, paths)
    per_mode_err = {m: [] for m in MODES}
    for rec, path in zip(manifest["samples"], paths):
        p = preds[Path(path).stem]
        for m in MODES:
            per_mode_err[m].append(p[str(m)] - rec["amplitudes"][str(m)])
    rmse = {m: float(np.sqrt(np.mean(np.square(e)))) for m, e in per_mode_err.items()}
    worst = max(rmse.values())
    ok = worst < 0.02 and worst < ZERO_PREDICTOR_RMS / 2
    print(
        f"[{'PASS' if ok else 'FAIL'}] desk-training: per-mode RMSE "
        f"{ {m: round(v, 4) for m, v in rmse.items()} } um on {HELD_OUT} held-out "
        f"samples (tol 0.02; zero predictor {ZERO_PREDICTOR_RMS:.4f}) "
        f"({time.perf_counter() - t0:.0f}s)"
    )
    assert ok


def test_batch_prediction_faster_than_fit(desk_checkpoint, held_out, tmp_path):
    t0 = time.perf_counter()
    manifest = json.loads((held_out / "manifest.json").read_text())
    paths = [held_out / rec["file"] for rec in manifest["samples"][:50]]

    predict_stacks(desk_checkpoint, paths[:2])  # warmup
    t1 = time.perf_counter()
    predict_stacks(desk_checkpoint, paths)
    per_image_cnn = (time.perf_counter() - t1) / len(paths)

    fit_out = tmp_path / "fit.json"
    aberro("retrieve", "fit", "--input", str(paths[0]),
           "--config", "point_scanning", "--out", str(fit_out))
    per_image_fit = json.loads(fit_out.read_text())["wall_time_ms"] / 1e3

    ok = per_image_cnn < per_image_fit
    print(
        f"[{'PASS' if ok else 'FAIL'}] prediction-speed: CNN "
        f"{per_image_cnn * 1e3:.1f} ms/image (batch of 50) vs fit "
        f"{per_image_fit * 1e3:.0f} ms/image ({time.perf_counter() - t0:.0f}s)"
    )
    assert ok

"""Evaluation harness: RMSE statistics, sweeps, plane ablation, timing.

The headline metric everywhere is the pupil-averaged wavefront RMSE between
reconstructions composed from predicted and true Zernike amplitudes, with
box summaries in the Tukey convention (quartiles, whiskers at 1.5 IQR
clamped to the data extrema).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import optics
from .dataset import plane_subset
from .optics import NoiseSpec, Preset, PsfStack
from .zernike import (
    DEFAULT_MODES,
    AmplitudeVector,
    PupilGrid,
    compose_wavefront,
    noll_to_nm,
    wavefront_rmse,
)

Retriever = Callable[[PsfStack], AmplitudeVector]


@dataclass(frozen=True)
class ModeClass:
    """Partition by wavefront symmetry: a mode is even when its azimuthal
    order m is even, i.e. the wavefront is invariant under point reflection
    and the PSF mirrors axially when the amplitude flips sign. Those modes
    are ambiguous from a single focal plane; odd modes are not."""

    even: tuple[int, ...]
    odd: tuple[int, ...]

    @classmethod
    def partition(cls, mode_set: Iterable[int] = DEFAULT_MODES) -> "ModeClass":
        even, odd = [], []
        for noll in mode_set:
            _, m = noll_to_nm(noll)
            (even if m % 2 == 0 else odd).append(noll)
        return cls(even=tuple(even), odd=tuple(odd))


def mode_class_of(noll: int) -> str:
    _, m = noll_to_nm(noll)
    return "even" if m % 2 == 0 else "odd"


def tukey_summary(values: Sequence[float]) -> dict[str, float]:
    """Median, quartiles, and 1.5 IQR whiskers clamped to the data extrema."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot summarize an empty sample")
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    in_lo = arr[arr >= lo_fence]
    in_hi = arr[arr <= hi_fence]
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_lo": float(in_lo.min()) if in_lo.size else float(arr.min()),
        "whisker_hi": float(in_hi.max()) if in_hi.size else float(arr.max()),
    }


@dataclass
class EvalReport:
    per_sample: list[dict]
    summary: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"per_sample": self.per_sample, "summary": self.summary}


def evaluate(
    predictions: Mapping[str, AmplitudeVector] | Mapping[str, Mapping[str, AmplitudeVector]],
    truths: Mapping[str, AmplitudeVector],
    grid: PupilGrid | None = None,
    wall_times_ms: Mapping[str, float] | None = None,
) -> EvalReport:
    """Per-sample wavefront RMSE plus per-method box summaries.

    predictions may be keyed by sample id directly (one anonymous method) or
    by method name first. Sample ids must match the truth table exactly.
    """
    if grid is None:
        grid = PupilGrid.unit_disk(256)
    first = next(iter(predictions.values()), None)
    if first is None or isinstance(first, AmplitudeVector):
        by_method = {"pred": predictions}
    else:
        by_method = predictions

    per_sample: list[dict] = []
    summary: dict[str, dict[str, float]] = {}
    truth_fields = {k: compose_wavefront(v, grid) for k, v in truths.items()}
    for method, preds in by_method.items():
        if set(preds) != set(truths):
            missing = set(truths) ^ set(preds)
            raise ValueError(f"sample ids do not match truths (difference: {sorted(missing)[:5]})")
        rmses = []
        for sample_id in sorted(preds):
            pred = preds[sample_id]
            rmse = wavefront_rmse(compose_wavefront(pred, grid), truth_fields[sample_id], grid)
            rmses.append(rmse)
            per_sample.append({
                "sample_id": sample_id,
                "method": method,
                "rmse_um": rmse,
                "wall_time_ms": (wall_times_ms or {}).get(sample_id),
                "predicted": pred.to_json_obj(),
                "true": truths[sample_id].to_json_obj(),
            })
        summary[method] = tukey_summary(rmses)
    return EvalReport(per_sample=per_sample, summary=summary)


# -- single-mode sweep ----------------------------------------------------------


def _noise_for(noise: NoiseSpec | None, seed: int, index: int) -> NoiseSpec | None:
    if noise is None or (noise.photons_peak == 0 and noise.gaussian_sigma == 0):
        return None
    derived = int(
        np.random.SeedSequence(entropy=seed, spawn_key=(97, index)).generate_state(1, np.uint64)[0]
    )
    return NoiseSpec(noise.photons_peak, noise.gaussian_sigma, derived)


def _synth_sample(
    preset: Preset, amps: AmplitudeVector, noise: NoiseSpec | None, bead: bool = True
) -> PsfStack:
    stack = optics.synth_psf(preset.config, amps)
    if bead and preset.bead_diameter_um > 0:
        stack = optics.bead_convolve(stack, preset.bead_diameter_um, preset.config)
    if noise is not None:
        stack = optics.apply_noise(stack, noise)
    return stack


def single_mode_sweep(
    retrieve: Retriever,
    preset: Preset,
    mode: int,
    amp_grid: Sequence[float],
    noise: NoiseSpec | None = None,
    seed: int = 0,
    threads: int = 1,
    bead: bool = True,
) -> list[dict]:
    """Introduce one mode at each amplitude, retrieve, record the response.

    Each row carries the introduced-mode prediction and the distribution of
    cross-predicted (non-introduced) modes.
    """

    def run(item: tuple[int, float]) -> dict:
        index, amp = item
        truth = AmplitudeVector({mode: float(amp)})
        stack = _synth_sample(preset, truth, _noise_for(noise, seed, index), bead=bead)
        pred = retrieve(stack)
        cross = [v for k, v in pred.items() if k != mode]
        return {
            "mode": mode,
            "amp_true": float(amp),
            "amp_pred": pred.get(mode),
            "cross_max_abs": max((abs(v) for v in cross), default=0.0),
            "predicted": pred.to_json_obj(),
        }

    items = list(enumerate(amp_grid))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]


# -- plane ablation ---------------------------------------------------------------


def plane_ablation(
    retrieve: Retriever,
    preset: Preset,
    n_z_list: Sequence[int],
    truths: Sequence[AmplitudeVector],
    noise: NoiseSpec | None = None,
    seed: int = 0,
    threads: int = 1,
    bead: bool = True,
) -> dict[int, dict[str, list[float]]]:
    """Per plane-count and mode-class error distributions.

    For every sample the amplitude error vector is restricted to each class
    and reported as the wavefront RMSE of that class-restricted difference
    (via composition, so it equals the Euclidean norm of the restricted
    amplitude difference on a fine grid).
    """
    classes = ModeClass.partition(DEFAULT_MODES)
    grid = PupilGrid.unit_disk(256)
    full_stacks = [
        _synth_sample(preset, truth, _noise_for(noise, seed, i), bead=bead)
        for i, truth in enumerate(truths)
    ]
    out: dict[int, dict[str, list[float]]] = {}
    for n_z in n_z_list:
        subsets = [plane_subset(stack, n_z) for stack in full_stacks]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = list(pool.map(retrieve, subsets))
        else:
            preds = [retrieve(s) for s in subsets]
        per_class: dict[str, list[float]] = {"even": [], "odd": []}
        for truth, pred in zip(truths, preds):
            delta = AmplitudeVector({
                j: pred.get(j) - truth.get(j) for j in DEFAULT_MODES
            })
            for name, members in (("even", classes.even), ("odd", classes.odd)):
                restricted = delta.restricted(members)
                err = wavefront_rmse(
                    compose_wavefront(restricted, grid), np.zeros(grid.shape), grid
                )
                per_class[name].append(err)
        out[int(n_z)] = per_class
    return out


# -- timing -----------------------------------------------------------------------


def bench(
    methods: Mapping[str, tuple[Callable[[PsfStack], object], Callable[[list[PsfStack]], object] | None]],
    preset: Preset,
    n_images: int = 50,
    repeats: int = 5,
) -> list[dict]:
    """Wall-clock medians for single-image and batched retrieval.

    methods maps a name to (single_call, batch_call); batch_call may be None
    to fall back to a loop of single calls. A warmup call is excluded from
    the timings; the monotonic clock and the median of `repeats` runs are
    used throughout. The probe stack carries realistic noise so iterative
    methods run their full configured budget instead of early-stopping on a
    machine-precision optimum.
    """
    amps = AmplitudeVector({5: 0.03, 7: -0.02})
    stack = _synth_sample(preset, amps, NoiseSpec(photons_peak=5000, gaussian_sigma=2.0, seed=0))
    stacks = [stack] * n_images
    rows = []
    for name, (single, batch) in methods.items():
        single(stack)  # warmup
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            single(stack)
            times.append(time.perf_counter() - t0)
        t_single = float(np.median(times))
        rows.append({"method": name, "n": 1, "seconds": t_single, "per_image_s": t_single})

        runner = batch if batch is not None else (lambda xs: [single(x) for x in xs])
        runner(stacks[: min(2, n_images)])  # warmup
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            runner(stacks)
            times.append(time.perf_counter() - t0)
        t_batch = float(np.median(times))
        rows.append({
            "method": name, "n": n_images, "seconds": t_batch,
            "per_image_s": t_batch / n_images,
        })
    return rows


# -- plots --------------------------------------------------------------------------


def plot_box(report: EvalReport, out_path: str) -> None:
    """Box plot of per-method RMSE distributions (SVG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted(report.summary)
    data = [
        [rec["rmse_um"] for rec in report.per_sample if rec["method"] == m]
        for m in methods
    ]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(methods), 3.2))
    ax.boxplot(data, tick_labels=methods, whis=1.5)
    ax.set_ylabel("wavefront RMSE (um)")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_sweep(rows: list[dict], out_path: str) -> None:
    """Scatter of predicted vs true amplitude for one swept mode (SVG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    true = [r["amp_true"] for r in rows]
    pred = [r["amp_pred"] for r in rows]
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    lim = max(max(map(abs, true)) * 1.2, 1e-3)
    ax.plot([-lim, lim], [-lim, lim], "k-", lw=1)
    ax.plot(true, pred, "ko", ms=4)
    mode = rows[0]["mode"] if rows else "?"
    ax.set_xlabel(f"true a{mode} (um)")
    ax.set_ylabel(f"predicted a{mode} (um)")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)

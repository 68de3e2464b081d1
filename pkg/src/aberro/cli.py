"""Command-line interface: one executable, JSON and NPY in and out.

Machine-readable results go to --out (JSON, including a stable error code on
failure); a short human summary goes to stdout. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import optics
from .errors import (
    AberroError,
    DegenerateInputError,
    FitDivergedError,
    GridMismatchError,
    IllPosedError,
)
from .optics import MicroscopeConfig, NoiseSpec, Preset, load_preset
from .retrieval_fit import FitOptions, fit_retrieve, fit_retrieve_batch
from .retrieval_gs import GsOptions, gs_retrieve, gs_retrieve_batch
from .zernike import AmplitudeVector, compose_wavefront, wavefront_rmse

_ERROR_CODES = [
    (GridMismatchError, "grid-mismatch"),
    (IllPosedError, "ill-posed"),
    (DegenerateInputError, "degenerate-input"),
    (FitDivergedError, "fit-diverged"),
    (FileNotFoundError, "not-found"),
    (OSError, "io-error"),
    (ValueError, "invalid-argument"),
    (AberroError, "runtime-error"),
]


def _error_code(exc: BaseException) -> str:
    for etype, code in _ERROR_CODES:
        if isinstance(exc, etype):
            return code
    return "internal"


def _write_json(path: str | None, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("ABERRO_THREADS", "").strip()
        threads = int(env) if env else 0
    if threads < 0:
        raise ValueError("threads must be >= 0")
    return threads if threads > 0 else (os.cpu_count() or 1)


def _load_preset_arg(preset: str | None, config: str | None) -> Preset:
    ref = preset or config
    if ref is None:
        raise ValueError("a --preset name/path or --config JSON path is required")
    return load_preset(ref)


def _parse_amps(text: str | None) -> AmplitudeVector:
    if not text:
        return AmplitudeVector()
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    return AmplitudeVector.from_json_obj(json.loads(text))


def _load_truths(path: str) -> dict[str, AmplitudeVector]:
    """Manifest truths are keyed by file stem (psf_000000), matching
    prediction tables produced from the NPY files; amplitudes.csv is keyed
    by its sample_id column."""
    p = Path(path)
    if p.name == "manifest.json" or p.is_dir():
        manifest = ds.load_manifest(p)
        return {Path(name).stem: amps for name, amps in manifest.sample_files}
    if p.suffix == ".csv":
        return ds.read_amplitude_csv(p.read_text())
    obj = json.loads(p.read_text())
    return {k: AmplitudeVector.from_json_obj(v) for k, v in obj.items()}


class _Failure(click.ClickException):
    """Runtime failure with exit code 1 (click reserves 2 for usage errors)."""

    exit_code = 1


def _run(ctx: click.Context, out: str | None, body):
    try:
        return body()
    except click.ClickException:
        raise
    except BaseException as exc:  # noqa: BLE001 - reported with a stable code
        if isinstance(exc, KeyboardInterrupt):
            raise
        _write_json(out, {"error": {"code": _error_code(exc), "message": str(exc)}})
        raise _Failure(f"[{_error_code(exc)}] {exc}") from exc


@click.group()
@click.option("--threads", type=int, default=None,
              help="Worker threads (0 = auto; ABERRO_THREADS is the fallback).")
@click.option("--seed", type=int, default=0, show_default=True, help="Base RNG seed.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, threads, seed, verbose):
    """Synthetic aberrated PSF toolkit: forward model, retrieval, evaluation."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = _resolve_threads(threads)
    ctx.obj["seed"] = seed
    ctx.obj["verbose"] = verbose


@main.command()
@click.option("--preset", help="Preset name or JSON path.")
@click.option("--config", help="Microscope config JSON path.")
@click.option("--amps", help='Zernike amplitudes as JSON, e.g. \'{"5":0.05}\', or @file.')
@click.option("--bead/--no-bead", default=False, show_default=True,
              help="Convolve with the preset bead.")
@click.option("--photons", type=float, default=0.0, show_default=True,
              help="Poisson photon budget at the unaberrated peak (0 = noiseless).")
@click.option("--gaussian-sigma", type=float, default=0.0, show_default=True)
@click.option("--out", required=True, help="Output NPY path.")
@click.pass_context
def synth(ctx, preset, config, amps, bead, photons, gaussian_sigma, out):
    """Synthesize one PSF stack from Zernike amplitudes."""

    def body():
        ps = _load_preset_arg(preset, config)
        amplitudes = _parse_amps(amps)
        stack = optics.synth_psf(ps.config, amplitudes)
        if bead and ps.bead_diameter_um > 0:
            stack = optics.bead_convolve(stack, ps.bead_diameter_um, ps.config)
        noise = None
        if photons > 0:
            noise = NoiseSpec(photons, gaussian_sigma, ctx.obj["seed"])
            stack = optics.apply_noise(stack, noise)
        optics.save_stack(stack, out, config=ps.config, noise=noise, truth=amplitudes)
        click.echo(f"wrote {out} shape={stack.shape} peak={stack.data.max():.4g}")

    _run(ctx, None, body)


@main.group()
def dataset():
    """Dataset generation and streaming."""


@dataset.command("gen")
@click.option("--preset", help="Preset name or JSON path.")
@click.option("--config", help="Microscope config JSON path.")
@click.option("--count", type=int, required=True)
@click.option("--modes", default="5-15", show_default=True,
              help='Mode set, e.g. "5-15" or "5,7".')
@click.option("--amp-range", type=(float, float), default=(-0.075, 0.075), show_default=True)
@click.option("--photons", type=float, default=5000.0, show_default=True)
@click.option("--gaussian-sigma", type=float, default=2.0, show_default=True)
@click.option("--bead/--no-bead", default=True, show_default=True)
@click.option("--out", "out_dir", required=True)
@click.pass_context
def dataset_gen(ctx, preset, config, count, modes, amp_range, photons, gaussian_sigma, bead, out_dir):
    """Generate a reproducible on-disk dataset."""

    def body():
        ps = _load_preset_arg(preset, config)
        spec = ds.DatasetSpec(
            config=ps.config,
            sampler=ds.SamplerSpec(
                mode_set=_parse_modes(modes), amp_range_um=amp_range,
                seed=ctx.obj["seed"], count=count,
            ),
            noise=NoiseSpec(photons, gaussian_sigma),
            bead_diameter_um=ps.bead_diameter_um if bead else 0.0,
        )
        manifest = ds.generate_dataset(spec, out_dir, threads=ctx.obj["threads"])
        click.echo(f"wrote {len(manifest.sample_files)} samples to {out_dir}")

    _run(ctx, None, body)


@dataset.command("stream")
@click.option("--preset", help="Preset name or JSON path.")
@click.option("--config", help="Microscope config JSON path.")
@click.option("--batch", type=int, default=2, show_default=True)
@click.option("--modes", default="5-15", show_default=True)
@click.option("--amp-range", type=(float, float), default=(-0.075, 0.075), show_default=True)
@click.option("--photons", type=float, default=5000.0, show_default=True)
@click.option("--gaussian-sigma", type=float, default=2.0, show_default=True)
@click.option("--bead/--no-bead", default=True, show_default=True)
@click.option("--max-samples", type=int, default=None,
              help="Stop after this many samples (default: stream forever).")
@click.pass_context
def dataset_stream(ctx, preset, config, batch, modes, amp_range, photons, gaussian_sigma, bead, max_samples):
    """Stream (amplitudes, volume) records to stdout as a binary pipe."""

    def body():
        ps = _load_preset_arg(preset, config)
        spec = ds.DatasetSpec(
            config=ps.config,
            sampler=ds.SamplerSpec(
                mode_set=_parse_modes(modes), amp_range_um=amp_range,
                seed=ctx.obj["seed"], count=0,
            ),
            noise=NoiseSpec(photons, gaussian_sigma),
            bead_diameter_um=ps.bead_diameter_um if bead else 0.0,
        )
        ds.write_stream(spec, batch, sys.stdout.buffer, max_samples=max_samples)

    _run(ctx, None, body)


def _parse_modes(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(t) for t in text.split(",") if t)


@main.group()
def retrieve():
    """Wavefront retrieval from a measured stack."""


def _retrieval_common(input_path, config_ref):
    stack, meta = optics.load_stack(input_path)
    preset = load_preset(config_ref) if config_ref else None
    if preset is not None:
        config = preset.config
    elif meta.get("config"):
        config = MicroscopeConfig.from_dict(meta["config"])
    else:
        raise ValueError("no --config given and no sidecar configuration found")
    truth = meta.get("amplitudes_true")
    truth = AmplitudeVector.from_json_obj(truth) if truth else None
    return stack, config, truth


def _rmse_vs_truth(amps, truth, config):
    if truth is None:
        return None
    grid = optics.pupil_grid(config)
    return wavefront_rmse(
        compose_wavefront(amps, grid), compose_wavefront(truth, grid), grid
    )


@retrieve.command("gs")
@click.option("--input", "input_path", required=True, help="Stack NPY path.")
@click.option("--config", "config_ref", help="Preset name or config JSON path.")
@click.option("--iters", type=int, default=30, show_default=True)
@click.option("--background", type=float, default=None,
              help="Background level (default: 1st percentile of the stack).")
@click.option("--project-every", type=int, default=None,
              help="Zernike-project the pupil phase every K iterations.")
@click.option("--out", help="Result JSON path.")
@click.pass_context
def retrieve_gs(ctx, input_path, config_ref, iters, background, project_every, out):
    """Gerchberg-Saxton retrieval."""

    def body():
        stack, config, truth = _retrieval_common(input_path, config_ref)
        opts = GsOptions(
            iterations=iters,
            background_subtract=background,
            smoothing_project_every=project_every,
        )
        result = gs_retrieve(stack, config, opts)
        payload = {
            "method": "gs",
            "amplitudes": result.amplitudes.to_json_obj(),
            "residuals": result.per_iteration_residual,
            "wall_time_ms": result.wall_time_s * 1e3,
            "rmse_vs_truth_um": _rmse_vs_truth(result.amplitudes, truth, config),
        }
        _write_json(out, payload)
        _echo_retrieval(payload)

    _run(ctx, out, body)


@retrieve.command("fit")
@click.option("--input", "input_path", required=True, help="Stack NPY path.")
@click.option("--config", "config_ref", help="Preset name or config JSON path.")
@click.option("--iters", type=int, default=30, show_default=True)
@click.option("--objective", type=click.Choice(["lsq", "poisson"]), default="lsq",
              show_default=True)
@click.option("--init", help="Initial amplitudes JSON or @file.")
@click.option("--out", help="Result JSON path.")
@click.pass_context
def retrieve_fit(ctx, input_path, config_ref, iters, objective, init, out):
    """Parameterized PSF fit."""

    def body():
        stack, config, truth = _retrieval_common(input_path, config_ref)
        opts = FitOptions(
            iterations=iters,
            objective="gaussian-lsq" if objective == "lsq" else "poisson-nll",
            init=_parse_amps(init) if init else None,
        )
        result = fit_retrieve(stack, config, opts)
        payload = {
            "method": "fit",
            "amplitudes": result.amplitudes.to_json_obj(),
            "scale": result.scale,
            "background": result.background,
            "shifts_um": list(result.shifts_um),
            "converged": result.converged,
            "objective_trace": result.objective_trace,
            "wall_time_ms": result.wall_time_s * 1e3,
            "rmse_vs_truth_um": _rmse_vs_truth(result.amplitudes, truth, config),
        }
        _write_json(out, payload)
        _echo_retrieval(payload)

    _run(ctx, out, body)


def _echo_retrieval(payload: dict) -> None:
    amps = ", ".join(f"a{k}={v:+.4f}" for k, v in payload["amplitudes"].items())
    line = f"{payload['method']}: {amps}  ({payload['wall_time_ms']:.0f} ms)"
    if payload.get("rmse_vs_truth_um") is not None:
        line += f"  rmse_vs_truth={payload['rmse_vs_truth_um']:.4f} um"
    click.echo(line)


@main.group(name="eval")
def eval_group():
    """Quantitative evaluation and plots."""


@eval_group.command("run")
@click.option("--pred", "pred_path", required=True,
              help="Predictions JSON ({id: {noll: amp}} or {method: {id: ...}}).")
@click.option("--truth", "truth_path", required=True,
              help="Truth JSON, amplitudes.csv, or dataset manifest.")
@click.option("--out", help="Report JSON path.")
@click.option("--csv", "csv_path", help="Also write the per-sample table as CSV.")
@click.pass_context
def eval_run(ctx, pred_path, truth_path, out, csv_path):
    """Score predictions against ground truth."""

    def body():
        truths = _load_truths(truth_path)
        raw = json.loads(Path(pred_path).read_text())
        first = next(iter(raw.values()), {})
        if first and all(isinstance(v, dict) for v in first.values()):
            preds = {
                m: {k: AmplitudeVector.from_json_obj(v) for k, v in table.items()}
                for m, table in raw.items()
            }
        else:
            preds = {k: AmplitudeVector.from_json_obj(v) for k, v in raw.items()}
        report = ev.evaluate(preds, truths)
        _write_json(out, report.to_dict())
        if csv_path:
            _report_csv(report, csv_path)
        for method, stats in report.summary.items():
            click.echo(
                f"{method}: median={stats['median']:.4f} um "
                f"IQR=[{stats['q1']:.4f}, {stats['q3']:.4f}]"
            )

    _run(ctx, out, body)


def _report_csv(report: ev.EvalReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "method", "rmse_um", "wall_time_ms"])
        for rec in report.per_sample:
            writer.writerow([rec["sample_id"], rec["method"], repr(rec["rmse_um"]),
                             rec["wall_time_ms"]])


def _make_retriever(method: str, config: MicroscopeConfig, iters: int):
    if method == "gs":
        opts = GsOptions(iterations=iters)
        return lambda stack: gs_retrieve(stack, config, opts).amplitudes
    if method == "fit":
        opts = FitOptions(iterations=iters)
        return lambda stack: fit_retrieve(stack, config, opts).amplitudes
    raise ValueError(f"unknown method {method!r}")


@eval_group.command("sweep")
@click.option("--preset", help="Preset name or JSON path.")
@click.option("--config", help="Microscope config JSON path.")
@click.option("--method", type=click.Choice(["gs", "fit"]), default="fit", show_default=True)
@click.option("--mode", type=int, default=5, show_default=True)
@click.option("--amps", default="-0.06:0.06:13", show_default=True,
              help="Amplitude grid lo:hi:count.")
@click.option("--photons", type=float, default=0.0, show_default=True)
@click.option("--gaussian-sigma", type=float, default=0.0, show_default=True)
@click.option("--iters", type=int, default=30, show_default=True)
@click.option("--out", help="Sweep table JSON path.")
@click.pass_context
def eval_sweep(ctx, preset, config, method, mode, amps, photons, gaussian_sigma, iters, out):
    """Single-mode amplitude sweep with cross-prediction statistics."""

    def body():
        ps = _load_preset_arg(preset, config)
        lo, hi, count = amps.split(":")
        grid_points = np.linspace(float(lo), float(hi), int(count))
        noise = NoiseSpec(photons, gaussian_sigma) if photons > 0 else None
        rows = ev.single_mode_sweep(
            _make_retriever(method, ps.config, iters), ps, mode, grid_points,
            noise=noise, seed=ctx.obj["seed"], threads=ctx.obj["threads"],
        )
        _write_json(out, {"method": method, "rows": rows})
        worst = max(abs(r["amp_pred"] - r["amp_true"]) for r in rows)
        click.echo(f"sweep a{mode} ({method}): {len(rows)} points, worst |err|={worst:.4f} um")

    _run(ctx, out, body)


@eval_group.command("ablation")
@click.option("--preset", help="Preset name or JSON path.")
@click.option("--config", help="Microscope config JSON path.")
@click.option("--method", type=click.Choice(["gs", "fit"]), default="fit", show_default=True)
@click.option("--nz", default="1,2,32", show_default=True, help="Plane counts.")
@click.option("--samples", type=int, default=22, show_default=True)
@click.option("--amp", type=float, default=0.05, show_default=True,
              help="Single-mode amplitude magnitude for the sample set.")
@click.option("--photons", type=float, default=5000.0, show_default=True)
@click.option("--gaussian-sigma", type=float, default=2.0, show_default=True)
@click.option("--iters", type=int, default=30, show_default=True)
@click.option("--out", help="Ablation report JSON path.")
@click.pass_context
def eval_ablation(ctx, preset, config, method, nz, samples, amp, photons, gaussian_sigma, iters, out):
    """Plane-count ablation grouped by even/odd mode class."""

    def body():
        ps = _load_preset_arg(preset, config)
        n_z_list = [int(t) for t in nz.split(",") if t]
        truths = []
        modes = list(range(5, 16))
        for i in range(samples):
            noll = modes[i % len(modes)]
            sign = 1.0 if (i // len(modes)) % 2 == 0 else -1.0
            truths.append(AmplitudeVector({noll: sign * amp}))
        noise = NoiseSpec(photons, gaussian_sigma) if photons > 0 else None
        result = ev.plane_ablation(
            _make_retriever(method, ps.config, iters), ps, n_z_list, truths,
            noise=noise, seed=ctx.obj["seed"], threads=ctx.obj["threads"],
        )
        payload = {
            str(n_z): {cls: vals for cls, vals in per_class.items()}
            for n_z, per_class in result.items()
        }
        _write_json(out, payload)
        for n_z, per_class in result.items():
            click.echo(
                f"n_z={n_z}: even median={np.median(per_class['even']):.4f} "
                f"odd median={np.median(per_class['odd']):.4f}"
            )

    _run(ctx, out, body)


@eval_group.command("plot")
@click.option("--report", "report_path", required=True,
              help="Report JSON from 'eval run' (box) or 'eval sweep' (sweep).")
@click.option("--kind", type=click.Choice(["box", "sweep"]), default="box", show_default=True)
@click.option("--out", required=True, help="SVG output path.")
@click.pass_context
def eval_plot(ctx, report_path, kind, out):
    """Render a report as an SVG figure."""

    def body():
        obj = json.loads(Path(report_path).read_text())
        if kind == "box":
            report = ev.EvalReport(per_sample=obj["per_sample"], summary=obj["summary"])
            ev.plot_box(report, out)
        else:
            ev.plot_sweep(obj["rows"], out)
        click.echo(f"wrote {out}")

    _run(ctx, None, body)


@main.command()
@click.option("--preset", help="Preset name or JSON path.")
@click.option("--config", help="Microscope config JSON path.")
@click.option("--n", "n_images", type=int, default=50, show_default=True)
@click.option("--methods", default="gs,fit", show_default=True)
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--iters", type=int, default=30, show_default=True)
@click.option("--out", help="Timing table JSON path.")
@click.pass_context
def bench(ctx, preset, config, n_images, methods, repeats, iters, out):
    """Wall-clock timing for single and batched retrieval."""

    def body():
        ps = _load_preset_arg(preset, config)
        threads = ctx.obj["threads"]
        table = {}
        for name in (t for t in methods.split(",") if t):
            if name == "gs":
                opts = GsOptions(iterations=iters)
                table["gs"] = (
                    lambda s, o=opts: gs_retrieve(s, ps.config, o),
                    lambda xs, o=opts: gs_retrieve_batch(xs, ps.config, o, workers=threads),
                )
            elif name == "fit":
                opts = FitOptions(iterations=iters)
                table["fit"] = (
                    lambda s, o=opts: fit_retrieve(s, ps.config, o),
                    lambda xs, o=opts: fit_retrieve_batch(xs, ps.config, o, workers=threads),
                )
            else:
                raise ValueError(f"unknown method {name!r}")
        rows = ev.bench(table, ps, n_images=n_images, repeats=repeats)
        _write_json(out, {"rows": rows})
        for row in rows:
            click.echo(
                f"{row['method']:>4} n={row['n']:>3}: {row['seconds']:8.3f} s "
                f"({row['per_image_s'] * 1e3:7.1f} ms/image)"
            )

    _run(ctx, out, body)


@main.group()
def preset():
    """Shipped microscope presets."""


@preset.command("show")
@click.argument("name", required=False)
@click.pass_context
def preset_show(ctx, name):
    """Print a preset as JSON (or list available names)."""

    def body():
        if not name:
            click.echo("\n".join(optics.preset_names()))
            return
        ps = load_preset(name)
        obj = {"name": ps.name, **ps.config.to_dict(), "bead_diameter_um": ps.bead_diameter_um}
        click.echo(json.dumps(obj, indent=1))

    _run(ctx, None, body)


if __name__ == "__main__":
    main()

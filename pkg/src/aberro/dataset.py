"""Reproducible synthetic training data: sampling, generation, streaming.

Randomness is counter-based: every sampled quantity is keyed by
(seed, purpose tag, sample index[, mode]) through a SeedSequence, so sample k
is the same value no matter how many samples are drawn, in what order, or on
how many workers.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .optics import (
    MicroscopeConfig,
    NoiseSpec,
    PsfStack,
    apply_noise,
    bead_convolve,
    save_stack,
    synth_psf,
)
from .zernike import DEFAULT_MODES, AmplitudeVector

FORMAT_VERSION = "1"
STREAM_MAGIC = b"PNS1"

# purpose tags for derived seeds
_TAG_AMPLITUDE = 1
_TAG_NOISE = 2


@dataclass(frozen=True)
class SamplerSpec:
    """Uniform i.i.d. amplitude sampling, one range shared by all modes."""

    mode_set: tuple[int, ...] = DEFAULT_MODES
    amp_range_um: tuple[float, float] = (-0.075, 0.075)
    seed: int = 0
    count: int = 0

    def __post_init__(self):
        if not self.mode_set:
            raise ValueError("mode_set must be nonempty")
        lo, hi = self.amp_range_um
        if lo > hi:
            raise ValueError("amplitude range must satisfy lo <= hi")
        if self.count < 0:
            raise ValueError("count must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "SamplerSpec":
        return cls(
            mode_set=tuple(obj.get("mode_set", DEFAULT_MODES)),
            amp_range_um=tuple(obj.get("amp_range_um", (-0.075, 0.075))),
            seed=int(obj.get("seed", 0)),
            count=int(obj.get("count", 0)),
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to (re)generate a dataset deterministically."""

    config: MicroscopeConfig
    sampler: SamplerSpec
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    bead_diameter_um: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "sampler": self.sampler.to_dict(),
            "noise": self.noise.to_dict(),
            "bead_diameter_um": self.bead_diameter_um,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetSpec":
        return cls(
            config=MicroscopeConfig.from_dict(obj["config"]),
            sampler=SamplerSpec.from_dict(obj["sampler"]),
            noise=NoiseSpec.from_dict(obj.get("noise", {})),
            bead_diameter_um=float(obj.get("bead_diameter_um", 0.0)),
        )


@dataclass(frozen=True)
class DatasetManifest:
    spec: DatasetSpec
    sample_files: tuple[tuple[str, AmplitudeVector], ...]
    format_version: str = FORMAT_VERSION

    def to_dict(self) -> dict:
        out = self.spec.to_dict()
        out["format_version"] = self.format_version
        out["samples"] = [
            {"file": name, "amplitudes": amps.to_json_obj()}
            for name, amps in self.sample_files
        ]
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetManifest":
        return cls(
            spec=DatasetSpec.from_dict(obj),
            sample_files=tuple(
                (rec["file"], AmplitudeVector.from_json_obj(rec["amplitudes"]))
                for rec in obj.get("samples", [])
            ),
            format_version=obj.get("format_version", FORMAT_VERSION),
        )


def _derived_seed(seed: int, tag: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(tag, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_amplitudes(spec: SamplerSpec, sample_index: int) -> AmplitudeVector:
    """Amplitudes for one sample; independent of draw order and count."""
    if sample_index < 0:
        raise ValueError("sample index must be >= 0")
    lo, hi = spec.amp_range_um
    values = {}
    for noll in spec.mode_set:
        ss = np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(_TAG_AMPLITUDE, sample_index, noll)
        )
        values[noll] = float(np.random.default_rng(ss).uniform(lo, hi))
    return AmplitudeVector(values)


def make_sample(spec: DatasetSpec, index: int) -> tuple[AmplitudeVector, PsfStack]:
    """One (amplitudes, noisy stack) pair for the given sample index."""
    amps = sample_amplitudes(spec.sampler, index)
    stack = synth_psf(spec.config, amps)
    if spec.bead_diameter_um > 0:
        stack = bead_convolve(stack, spec.bead_diameter_um, spec.config)
    if spec.noise.photons_peak > 0 or spec.noise.gaussian_sigma > 0:
        per_sample = NoiseSpec(
            photons_peak=spec.noise.photons_peak,
            gaussian_sigma=spec.noise.gaussian_sigma,
            seed=_derived_seed(spec.sampler.seed, _TAG_NOISE, index),
        )
        stack = apply_noise(stack, per_sample)
    return amps, stack


def _amplitude_csv(rows: list[tuple[int, AmplitudeVector]], mode_set: tuple[int, ...]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id"] + [f"a{j}" for j in mode_set])
    for sample_id, amps in rows:
        writer.writerow([sample_id] + [repr(amps.get(j)) for j in mode_set])
    return buf.getvalue()


def read_amplitude_csv(text: str) -> dict[str, AmplitudeVector]:
    """Parse the a5..a15-style CSV back into per-sample amplitude vectors."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[0] != "sample_id" or not all(h.startswith("a") for h in header[1:]):
        raise ValueError(f"unexpected amplitude table header: {header}")
    modes = [int(h[1:]) for h in header[1:]]
    out = {}
    for row in reader:
        if row:
            out[row[0]] = AmplitudeVector(
                {j: float(v) for j, v in zip(modes, row[1:])}
            )
    return out


def generate_dataset(spec: DatasetSpec, out_dir: str | Path, threads: int = 1) -> DatasetManifest:
    """Write psf_{:06}.npy files plus manifest.json and amplitudes.csv.

    Output bytes are a function of the generation spec alone (not of thread count or
    generation order). A failed run leaves an _INCOMPLETE marker behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / "_INCOMPLETE"
    marker.write_text("generation in progress\n")
    try:
        def build(index: int) -> tuple[str, AmplitudeVector]:
            amps, stack = make_sample(spec, index)
            name = f"psf_{index:06d}.npy"
            save_stack(stack, out_dir / name, config=spec.config, noise=spec.noise, truth=amps)
            return name, amps

        indices = range(spec.sampler.count)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(build, indices))
        else:
            results = [build(i) for i in indices]

        manifest = DatasetManifest(spec=spec, sample_files=tuple(results))
        (out_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
        rows = [(i, amps) for i, (_, amps) in enumerate(results)]
        (out_dir / "amplitudes.csv").write_text(_amplitude_csv(rows, spec.sampler.mode_set))
    except BaseException:
        marker.write_text("generation failed; outputs are partial\n")
        raise
    marker.unlink()
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read manifest.json (or its directory) and check referenced files exist."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = DatasetManifest.from_dict(json.loads(path.read_text()))
    missing = [name for name, _ in manifest.sample_files if not (path.parent / name).exists()]
    if missing:
        raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")
    return manifest


# -- streaming ----------------------------------------------------------------


def stream_batches(
    spec: DatasetSpec, batch_size: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Infinite deterministic stream of (volumes, amplitude matrix) batches.

    Batch b holds samples b*batch_size .. (b+1)*batch_size - 1, identical to
    the files generate_dataset would write for the same spec.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    modes = spec.sampler.mode_set
    index = 0
    while True:
        vols = np.empty(
            (batch_size, spec.config.nz, spec.config.ny, spec.config.nx), dtype=np.float32
        )
        amps = np.empty((batch_size, len(modes)), dtype=np.float32)
        for b in range(batch_size):
            a, stack = make_sample(spec, index)
            vols[b] = stack.data
            amps[b] = a.as_array(modes)
            index += 1
        yield vols, amps


def write_stream(spec: DatasetSpec, batch_size: int, fh: BinaryIO, max_samples: int | None = None) -> None:
    """Serialize the stream onto a binary pipe.

    Wire format: magic "PNS1", one JSON header line (config, sampler,
    batch_size), then per sample: u32-LE payload length, float32-LE amplitude
    row, float32-LE volume in C order. Stops cleanly on a broken pipe.
    """
    header = {
        "config": spec.config.to_dict(),
        "sampler": spec.sampler.to_dict(),
        "noise": spec.noise.to_dict(),
        "bead_diameter_um": spec.bead_diameter_um,
        "batch_size": batch_size,
    }
    try:
        fh.write(STREAM_MAGIC)
        fh.write((json.dumps(header) + "\n").encode())
        written = 0
        for vols, amps in stream_batches(spec, batch_size):
            for b in range(vols.shape[0]):
                amp_bytes = amps[b].astype("<f4").tobytes()
                vol_bytes = np.ascontiguousarray(vols[b], dtype="<f4").tobytes()
                fh.write(struct.pack("<I", len(amp_bytes) + len(vol_bytes)))
                fh.write(amp_bytes)
                fh.write(vol_bytes)
                written += 1
                if max_samples is not None and written >= max_samples:
                    fh.flush()
                    return
            fh.flush()
    except BrokenPipeError:
        return


def read_stream(fh: BinaryIO) -> tuple[dict, Iterator[tuple[np.ndarray, np.ndarray]]]:
    """Parse a PNS1 pipe; yields (amplitude row, volume) per sample."""
    magic = fh.read(4)
    if magic != STREAM_MAGIC:
        raise ValueError(f"bad stream magic {magic!r}")
    header_line = bytearray()
    while True:
        c = fh.read(1)
        if not c:
            raise ValueError("truncated stream header")
        if c == b"\n":
            break
        header_line.extend(c)
    header = json.loads(header_line.decode())
    n_modes = len(header["sampler"]["mode_set"])
    cfg = header["config"]
    vol_count = cfg["nz"] * cfg["ny"] * cfg["nx"]

    def records() -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            raw = fh.read(4)
            if len(raw) < 4:
                return
            (length,) = struct.unpack("<I", raw)
            payload = fh.read(length)
            if len(payload) < length:
                return
            amp = np.frombuffer(payload, dtype="<f4", count=n_modes)
            vol = np.frombuffer(payload, dtype="<f4", offset=4 * n_modes, count=vol_count)
            yield amp, vol.reshape(cfg["nz"], cfg["ny"], cfg["nx"])

    return header, records()


# -- plane subsets -------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def plane_subset(stack: PsfStack, n_z: int) -> PsfStack:
    """Select n_z planes spread evenly over the central span.

    Indices are linearly spaced over [center - span, center + span] with
    span = (n_z - 1) / 2 * stride and stride = floor((nz - 1) / (max(n_z, 2) - 1)),
    rounded half-up (ties go to the positive-offset side) and deduplicated.
    Plane values are copied exactly; no interpolation.
    """
    nz = stack.nz
    if not 1 <= n_z <= nz:
        raise ValueError(f"n_z must be in 1..{nz}, got {n_z}")
    center = (nz - 1) / 2.0
    stride = (nz - 1) // (max(n_z, 2) - 1)
    span = (n_z - 1) / 2.0 * stride
    fractional = np.linspace(center - span, center + span, n_z)
    indices = []
    for f in fractional:
        idx = min(max(_round_half_up(f), 0), nz - 1)
        if not indices or idx != indices[-1]:
            indices.append(idx)
    data = stack.data[indices].copy()
    offsets = tuple(stack.z_offsets_um[i] for i in indices)
    return PsfStack(data=data, z_offsets_um=offsets, config_digest=stack.config_digest)

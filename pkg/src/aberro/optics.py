"""Scalar-diffraction forward model: pupil phase to 3D intensity stack.

The pupil amplitude is a pure indicator (no apodization). For a wavefront
phi (microns) and defocus z, each plane is

    h(x, y, z) = | F[ mask * exp(2*pi*i*phi/lambda) * exp(-2*pi*i*z*kz) ] |^2

with kz = sqrt((n0/lambda)^2 - kx^2 - ky^2). The transform runs on an
oversampled grid (suppresses wraparound of defocused planes) and is
center-cropped to the configured image size; intensities are normalized so
the unaberrated stack of the same configuration peaks at exactly 1.0.

All distances are microns; frequencies are cycles per micron.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, asdict, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.ndimage

from .errors import GridMismatchError
from .zernike import AmplitudeVector, PupilGrid, compose_wavefront


@dataclass(frozen=True)
class MicroscopeConfig:
    """Imaging geometry and sampling for one microscope setup."""

    na: float
    lambda_um: float
    n0: float
    dx_um: float
    dy_um: float
    dz_um: float
    nx: int
    ny: int
    nz: int
    oversample: int = 2

    def __post_init__(self):
        if not (0 < self.na < self.n0):
            raise ValueError(f"need 0 < NA < n0, got NA={self.na}, n0={self.n0}")
        if self.lambda_um <= 0:
            raise ValueError("wavelength must be positive")
        if min(self.dx_um, self.dy_um, self.dz_um) <= 0:
            raise ValueError("voxel pitches must be positive")
        if self.nx % 2 or self.ny % 2:
            raise ValueError("nx and ny must be even")
        if self.nz < 1 or self.nx < 2 or self.ny < 2:
            raise ValueError("grid dimensions too small")
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "MicroscopeConfig":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class NoiseSpec:
    """Poisson shot noise at a given peak photon count plus Gaussian read noise
    (sigma in photon units). Deterministic for a fixed seed."""

    photons_peak: float = 5000.0
    gaussian_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.photons_peak < 0 or self.gaussian_sigma < 0:
            raise ValueError("noise levels must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "NoiseSpec":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


@dataclass(frozen=True)
class PsfStack:
    """Real nonnegative intensity volume with plane z-offsets (microns).

    Data is float32, C-order, shape (nz, ny, nx), matching the on-disk NPY
    layout; z_offsets_um is strictly increasing with 0 between the two central
    planes (or on the central plane for odd nz).
    """

    data: np.ndarray
    z_offsets_um: tuple[float, ...]
    config_digest: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"stack must be 3D, got shape {self.data.shape}")
        if len(self.z_offsets_um) != self.data.shape[0]:
            raise ValueError("one z offset per plane required")
        if any(b <= a for a, b in zip(self.z_offsets_um, self.z_offsets_um[1:])):
            raise ValueError("z offsets must be strictly increasing")

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Preset:
    """A named microscope configuration plus the bead diameter used with it."""

    name: str
    config: MicroscopeConfig
    bead_diameter_um: float


def z_offsets(config: MicroscopeConfig) -> np.ndarray:
    """Plane positions symmetric about focus; even nz straddles 0 by dz/2."""
    i = np.arange(config.nz)
    return (i - (config.nz - 1) / 2.0) * config.dz_um


# -- cached per-configuration geometry --------------------------------------

_geometry_cache: dict[str, dict] = {}
_geometry_lock = threading.Lock()


def pupil_grid(config: MicroscopeConfig) -> PupilGrid:
    """Oversampled frequency grid whose mask is the NA-limited pupil disk."""
    return _geometry(config)["grid"]


def _geometry(config: MicroscopeConfig) -> dict:
    key = config.digest()
    with _geometry_lock:
        cached = _geometry_cache.get(key)
    if cached is not None:
        return cached
    nfx = config.nx * config.oversample
    nfy = config.ny * config.oversample
    dkx = 1.0 / (nfx * config.dx_um)
    dky = 1.0 / (nfy * config.dy_um)
    kmax = config.na / config.lambda_um
    if kmax >= min(1.0 / (2 * config.dx_um), 1.0 / (2 * config.dy_um)):
        raise ValueError("pupil cutoff exceeds the lateral Nyquist frequency")
    grid = PupilGrid.make((nfy, nfx), dkx, dky, kmax)
    k2 = grid.kx**2 + grid.ky**2
    kz = np.zeros(grid.shape)
    kz[grid.mask] = np.sqrt((config.n0 / config.lambda_um) ** 2 - k2[grid.mask])
    entry = {"grid": grid, "kz": kz, "norm": None}
    with _geometry_lock:
        _geometry_cache.setdefault(key, entry)
        return _geometry_cache[key]


def defocus_phase(config: MicroscopeConfig, z_um: float, grid: PupilGrid | None = None) -> np.ndarray:
    """Unit-modulus defocus factor exp(-2*pi*i*z*kz) inside the mask, 0 outside."""
    geo = _geometry(config)
    if grid is not None and grid.shape != geo["grid"].shape:
        raise GridMismatchError("grid does not belong to this configuration")
    g = geo["grid"]
    factor = np.zeros(g.shape, dtype=complex)
    factor[g.mask] = np.exp(-2j * np.pi * z_um * geo["kz"][g.mask])
    return factor


def _defocus_factors(config: MicroscopeConfig, z_list: np.ndarray) -> np.ndarray:
    """(nz, Ny, Nx) stack of defocus factors, masked."""
    geo = _geometry(config)
    g = geo["grid"]
    kz_in = geo["kz"][g.mask]
    factors = np.zeros((len(z_list),) + g.shape, dtype=complex)
    factors[:, g.mask] = np.exp(-2j * np.pi * np.asarray(z_list)[:, None] * kz_in[None, :])
    return factors


def cfft2(x: np.ndarray, workers: int = 1) -> np.ndarray:
    """Centered 2D FFT over the trailing axes (DC at index N // 2)."""
    axes = (-2, -1)
    return sfft.fftshift(
        sfft.fft2(sfft.ifftshift(x, axes=axes), axes=axes, workers=workers), axes=axes
    )


def cifft2(x: np.ndarray, workers: int = 1) -> np.ndarray:
    """Inverse of :func:`cfft2`."""
    axes = (-2, -1)
    return sfft.fftshift(
        sfft.ifft2(sfft.ifftshift(x, axes=axes), axes=axes, workers=workers), axes=axes
    )


def crop_slices(config: MicroscopeConfig) -> tuple[slice, slice]:
    nfy = config.ny * config.oversample
    nfx = config.nx * config.oversample
    y0 = (nfy - config.ny) // 2
    x0 = (nfx - config.nx) // 2
    return slice(y0, y0 + config.ny), slice(x0, x0 + config.nx)


def pupil_field(
    config: MicroscopeConfig,
    amps: AmplitudeVector | None = None,
    lateral_shift_um: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Masked complex pupil: indicator amplitude, aberration phase, and an
    optional tilt ramp realizing a lateral PSF shift (+x shift moves the PSF
    toward +x)."""
    geo = _geometry(config)
    g = geo["grid"]
    phase = np.zeros(g.shape)
    if amps is not None and len(amps):
        phi = compose_wavefront(amps, g)
        phase += 2 * np.pi * phi / config.lambda_um
    sx, sy = lateral_shift_um
    if sx or sy:
        phase += 2 * np.pi * (g.kx * sx + g.ky * sy)
    field = np.zeros(g.shape, dtype=complex)
    field[g.mask] = np.exp(1j * phase[g.mask])
    return field


def _norm_const(config: MicroscopeConfig) -> float:
    """Peak intensity of the unaberrated stack at the canonical plane offsets
    (pre-normalization); cached per configuration."""
    geo = _geometry(config)
    if geo["norm"] is None:
        raw = _raw_planes(config, pupil_field(config), z_offsets(config))
        geo["norm"] = float(raw.max())
    return geo["norm"]


def _raw_planes(
    config: MicroscopeConfig, pupil: np.ndarray, z_list: np.ndarray, workers: int = 1
) -> np.ndarray:
    """Unnormalized cropped intensities for one pupil across planes."""
    factors = _defocus_factors(config, np.asarray(z_list, dtype=float))
    fields = cfft2(pupil[None, :, :] * factors, workers=workers)
    sy, sx = crop_slices(config)
    planes = np.abs(fields[:, sy, sx]) ** 2
    return planes


def psf_planes(
    config: MicroscopeConfig,
    amps: AmplitudeVector | None,
    z_list: np.ndarray,
    lateral_shift_um: tuple[float, float] = (0.0, 0.0),
    workers: int = 1,
) -> np.ndarray:
    """Normalized float64 intensity planes (len(z_list), ny, nx).

    Normalization divides by the configuration's unaberrated stack peak, so it
    does not depend on z_list or the aberration.
    """
    pupil = pupil_field(config, amps, lateral_shift_um)
    return _raw_planes(config, pupil, z_list, workers=workers) / _norm_const(config)


def synth_psf(config: MicroscopeConfig, amps: AmplitudeVector | None = None) -> PsfStack:
    """Scalar-diffraction forward model at the canonical plane offsets.

    The unaberrated case peaks at exactly 1.0 at the central pixel of the
    nearest-to-focus plane; aberrations only ever lower the peak.
    """
    offsets = z_offsets(config)
    planes = psf_planes(config, amps, offsets)
    return PsfStack(
        data=planes.astype(np.float32),
        z_offsets_um=tuple(float(z) for z in offsets),
        config_digest=config.digest(),
    )


# -- finite bead -------------------------------------------------------------

_BEAD_SUPERSAMPLE = 3


def bead_kernel(diameter_um: float, config: MicroscopeConfig) -> np.ndarray:
    """Solid-sphere indicator rasterized at voxel resolution.

    Anti-aliased by 3x subvoxel supersampling, normalized to unit sum. A zero
    diameter gives the identity (delta) kernel.
    """
    if diameter_um < 0:
        raise ValueError("bead diameter must be >= 0")
    r = diameter_um / 2.0
    pitches = (config.dz_um, config.dy_um, config.dx_um)
    half = [int(np.ceil(r / p - 0.5)) for p in pitches]
    shape = tuple(2 * h + 1 for h in half)
    s = _BEAD_SUPERSAMPLE
    sub = (np.arange(s) + 0.5) / s - 0.5
    zc = (np.arange(shape[0]) - half[0])[:, None] + sub[None, :]
    yc = (np.arange(shape[1]) - half[1])[:, None] + sub[None, :]
    xc = (np.arange(shape[2]) - half[2])[:, None] + sub[None, :]
    z2 = (zc * pitches[0]) ** 2
    y2 = (yc * pitches[1]) ** 2
    x2 = (xc * pitches[2]) ** 2
    inside = (
        z2[:, :, None, None, None, None]
        + y2[None, None, :, :, None, None]
        + x2[None, None, None, None, :, :]
    ) <= r * r
    kernel = inside.sum(axis=(1, 3, 5)).astype(float)
    total = kernel.sum()
    if total == 0.0:
        kernel[half[0], half[1], half[2]] = 1.0
        total = 1.0
    return kernel / total


def bead_convolve(stack: PsfStack, diameter_um: float, config: MicroscopeConfig) -> PsfStack:
    """3D convolution with the bead kernel; plane energy is conserved up to
    boundary leakage."""
    if diameter_um < 0:
        raise ValueError("bead diameter must be >= 0")
    if diameter_um > min(config.nx * config.dx_um, config.ny * config.dy_um) / 2:
        raise ValueError("bead diameter exceeds half the lateral field")
    if diameter_um == 0.0:
        return stack
    kernel = bead_kernel(diameter_um, config)
    if kernel.shape == (1, 1, 1):
        return stack
    blurred = scipy.ndimage.convolve(
        stack.data.astype(np.float64), kernel, mode="constant", cval=0.0
    )
    return replace(stack, data=blurred.astype(np.float32))


# -- noise --------------------------------------------------------------------


def apply_noise(stack: PsfStack, noise: NoiseSpec) -> PsfStack:
    """Poisson shot noise scaled to the peak photon budget plus Gaussian read
    noise, returned in the original normalized units.

    Negative read-noise excursions are kept (no clamping); retrieval must
    tolerate them. photons_peak == 0 with gaussian_sigma == 0 is the identity.
    """
    if noise.photons_peak == 0.0:
        if noise.gaussian_sigma == 0.0:
            return stack
        raise ValueError("gaussian_sigma > 0 requires photons_peak > 0 to set the scale")
    data = stack.data.astype(np.float64)
    if data.min() < 0:
        raise ValueError("noise model requires a nonnegative input stack")
    rng = np.random.default_rng(np.random.SeedSequence(noise.seed))
    counts = rng.poisson(data * noise.photons_peak).astype(np.float64)
    if noise.gaussian_sigma > 0:
        counts += rng.normal(0.0, noise.gaussian_sigma, size=data.shape)
    return replace(stack, data=(counts / noise.photons_peak).astype(np.float32))


# -- cropping -----------------------------------------------------------------


def crop_center(stack: PsfStack, nx: int, ny: int, nz: int) -> PsfStack:
    """Center crop; keeps the z offsets of the retained planes.

    Note: cropping a synthesized stack is not equivalent to synthesizing at
    the smaller size directly (the FFT oversampling grid differs).
    """
    cz, cy, cx = stack.data.shape
    if nx > cx or ny > cy or nz > cz:
        raise ValueError(f"crop ({nz},{ny},{nx}) exceeds stack {stack.data.shape}")
    z0 = (cz - nz) // 2
    y0 = (cy - ny) // 2
    x0 = (cx - nx) // 2
    data = stack.data[z0 : z0 + nz, y0 : y0 + ny, x0 : x0 + nx].copy()
    offs = stack.z_offsets_um[z0 : z0 + nz]
    return replace(stack, data=data, z_offsets_um=tuple(offs))


# -- file I/O ------------------------------------------------------------------


def save_stack(
    stack: PsfStack,
    path: str | Path,
    config: MicroscopeConfig | None = None,
    noise: NoiseSpec | None = None,
    truth: AmplitudeVector | None = None,
) -> Path:
    """Write NPY (float32 little-endian, C-order) plus a JSON sidecar with the
    configuration, plane offsets, noise spec, and ground truth when known."""
    path = Path(path)
    np.save(path, np.ascontiguousarray(stack.data, dtype="<f4"))
    meta = {
        "config": config.to_dict() if config else None,
        "config_digest": stack.config_digest,
        "z_offsets_um": list(stack.z_offsets_um),
        "noise": noise.to_dict() if noise else None,
        "amplitudes_true": truth.to_json_obj() if truth is not None else None,
    }
    meta_path = path.with_name(path.stem + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    return path


def load_stack(path: str | Path) -> tuple[PsfStack, dict]:
    """Read an NPY stack and its sidecar (empty dict when absent)."""
    path = Path(path)
    data = np.load(path)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3D volume, got shape {data.shape}")
    meta_path = path.with_name(path.stem + ".meta.json")
    meta: dict = {}
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    offs = meta.get("z_offsets_um")
    if offs is None:
        offs = list((np.arange(data.shape[0]) - (data.shape[0] - 1) / 2.0))
    stack = PsfStack(
        data=np.ascontiguousarray(data, dtype=np.float32),
        z_offsets_um=tuple(float(z) for z in offs),
        config_digest=meta.get("config_digest", ""),
    )
    return stack, meta


# -- presets -------------------------------------------------------------------


def load_preset(name_or_path: str | Path) -> Preset:
    """Load a preset by shipped name (e.g. "point_scanning") or JSON path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        obj = json.loads(p.read_text())
        name = obj.get("name", p.stem)
    else:
        name = str(name_or_path).removesuffix(".json")
        ref = resources.files("aberro.presets").joinpath(f"{name}.json")
        try:
            obj = json.loads(ref.read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"unknown preset {name_or_path!r}") from None
    return Preset(
        name=name,
        config=MicroscopeConfig.from_dict(obj),
        bead_diameter_um=float(obj.get("bead_diameter_um", 0.0)),
    )


def preset_names() -> list[str]:
    files = resources.files("aberro.presets")
    return sorted(f.name.removesuffix(".json") for f in files.iterdir() if f.name.endswith(".json"))

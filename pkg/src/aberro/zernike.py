"""Noll-indexed Zernike modes on a discrete pupil grid.

All wavefronts are scalar phase deviations in microns sampled on an N x N
frequency grid; modes are Noll-normalized (unit RMS over the unit disk), so a
single-mode amplitude in microns equals the RMS wavefront contribution of that
mode. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import GridMismatchError, IllPosedError

# Default aberration basis: first 11 non-trivial modes, skipping piston,
# tip, tilt and defocus.
DEFAULT_MODES: tuple[int, ...] = tuple(range(5, 16))

# Decomposition is declared ill-posed past this normal-matrix condition number.
_CONDITION_LIMIT = 1e8


def noll_to_nm(noll: int) -> tuple[int, int]:
    """Map a Noll index to its (n, m) radial/azimuthal order pair.

    Sign convention: even Noll indices carry the cosine term (m > 0), odd
    indices the sine term (m < 0). noll=1 is piston (0, 0).
    """
    if noll < 1:
        raise ValueError(f"Noll index must be >= 1, got {noll}")
    n = 0
    j = noll - 1
    while j > n:
        n += 1
        j -= n
    m = (-1) ** noll * ((n % 2) + 2 * ((j + (n + 1) % 2) // 2))
    return n, m


def nm_to_noll(n: int, m: int) -> int:
    """Inverse of :func:`noll_to_nm`."""
    if n < 0 or abs(m) > n or (n - abs(m)) % 2 != 0:
        raise ValueError(f"invalid Zernike order pair (n={n}, m={m})")
    base = n * (n + 1) // 2 + 1
    for j in range(base, base + n + 1):
        if noll_to_nm(j) == (n, m):
            return j
    raise AssertionError("unreachable: Noll row scan must hit every (n, m)")


@dataclass(frozen=True)
class ZernikeIndex:
    """A single mode identified by its Noll index, with derived (n, m)."""

    noll: int
    n: int
    m: int

    @classmethod
    def from_noll(cls, noll: int) -> "ZernikeIndex":
        n, m = noll_to_nm(noll)
        return cls(noll=noll, n=n, m=m)


def _radial_coeffs(n: int, m_abs: int) -> list[tuple[float, int]]:
    """(coefficient, power) terms of the radial polynomial R_n^|m|."""
    terms = []
    for k in range((n - m_abs) // 2 + 1):
        c = (
            (-1) ** k
            * math.factorial(n - k)
            / (
                math.factorial(k)
                * math.factorial((n + m_abs) // 2 - k)
                * math.factorial((n - m_abs) // 2 - k)
            )
        )
        terms.append((c, n - 2 * k))
    return terms


@dataclass(frozen=True)
class PupilGrid:
    """Discrete back-pupil sampling.

    The mask is the open disk kx^2 + ky^2 < kmax^2 (kmax = NA / wavelength for
    a physical pupil), sampled at pixel centers; rho is |k| / kmax and is
    strictly < 1 on masked pixels. Grids are centered at index N // 2.
    """

    shape: tuple[int, int]
    dkx: float
    dky: float
    kmax: float
    kx: np.ndarray = field(repr=False)
    ky: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)

    @classmethod
    def make(
        cls,
        shape: tuple[int, int],
        dkx: float,
        dky: float,
        kmax: float,
        center_offset: float = 0.0,
    ) -> "PupilGrid":
        """center_offset is in pixels: 0 puts DC on pixel N // 2 (required for
        FFT grids), 0.5 centers the lattice between pixels."""
        ny, nx = shape
        kx1 = (np.arange(nx) + center_offset - nx // 2) * dkx
        ky1 = (np.arange(ny) + center_offset - ny // 2) * dky
        kx = np.broadcast_to(kx1[None, :], (ny, nx)).copy()
        ky = np.broadcast_to(ky1[:, None], (ny, nx)).copy()
        kr = np.hypot(kx, ky)
        mask = kr < kmax
        rho = kr / kmax
        theta = np.arctan2(ky, kx)
        return cls(
            shape=(ny, nx), dkx=dkx, dky=dky, kmax=kmax,
            kx=kx, ky=ky, mask=mask, rho=rho, theta=theta,
        )

    @classmethod
    def unit_disk(cls, n: int) -> "PupilGrid":
        """Square analysis grid whose open unit disk fills the array.

        Pixel centers sit at half-integer offsets so the lattice spans the
        disk symmetrically; this roughly an order of magnitude reduces the
        rim-truncation error of disk averages compared to a DC-on-pixel grid
        of the same size. Physical FFT grids come from the microscope
        configuration instead.
        """
        return cls.make((n, n), 2.0 / n, 2.0 / n, 1.0, center_offset=0.5)

    @property
    def npix(self) -> int:
        return int(self.mask.sum())


def _sample_mode(n: int, m: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Noll-normalized mode values at arbitrary (rho, theta) samples."""
    radial = np.zeros_like(rho)
    for c, p in _radial_coeffs(n, abs(m)):
        radial += c * rho**p
    if m > 0:
        angular = np.cos(abs(m) * theta)
    elif m < 0:
        angular = np.sin(abs(m) * theta)
    else:
        angular = np.ones_like(theta)
    norm = math.sqrt(n + 1) if m == 0 else math.sqrt(2 * (n + 1))
    return norm * radial * angular


def zernike_eval(index: ZernikeIndex | int, grid: PupilGrid) -> np.ndarray:
    """Sample one Noll-normalized mode on the grid; zero outside the mask."""
    if isinstance(index, int):
        index = ZernikeIndex.from_noll(index)
    rho = np.where(grid.mask, grid.rho, 0.0)
    out = _sample_mode(index.n, index.m, rho, grid.theta)
    out[~grid.mask] = 0.0
    return out


def disk_gram(modes: Sequence[int], grid: PupilGrid, refine: int = 4) -> np.ndarray:
    """Disk-averaged pairwise inner products of the sampled modes.

    Plain per-pixel averages truncate the rim of the disk and bias rim-heavy
    pairs by O(pixel / radius), which at 256 pixels across is several times
    the orthonormality budget; this estimator therefore refines each pixel by
    a refine x refine midpoint sublattice before averaging over the disk.
    """
    modes = tuple(int(j) for j in modes)
    sub_x = ((np.arange(refine) + 0.5) / refine - 0.5) * grid.dkx
    sub_y = ((np.arange(refine) + 0.5) / refine - 0.5) * grid.dky
    xs = (grid.kx[0, :][:, None] + sub_x[None, :]).ravel()
    ys = (grid.ky[:, 0][:, None] + sub_y[None, :]).ravel()
    kx, ky = np.meshgrid(xs, ys)
    kr = np.hypot(kx, ky)
    inside = kr < grid.kmax
    rho = kr[inside] / grid.kmax
    theta = np.arctan2(ky[inside], kx[inside])
    sampled = [_sample_mode(*noll_to_nm(j), rho, theta) for j in modes]
    gram = np.empty((len(modes), len(modes)))
    for a in range(len(modes)):
        for b in range(a, len(modes)):
            gram[a, b] = gram[b, a] = float(np.mean(sampled[a] * sampled[b]))
    return gram


class AmplitudeVector:
    """Zernike amplitudes in microns, keyed by Noll index.

    Missing modes read as 0. The mode set is kept sorted ascending.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[int, float] | None = None):
        items = {}
        for noll, value in (entries or {}).items():
            noll = int(noll)
            value = float(value)
            if noll < 1:
                raise ValueError(f"Noll index must be >= 1, got {noll}")
            if not math.isfinite(value):
                raise ValueError(f"amplitude for mode {noll} is not finite")
            items[noll] = value
        self._entries = dict(sorted(items.items()))

    @classmethod
    def zero(cls, mode_set: Iterable[int] = DEFAULT_MODES) -> "AmplitudeVector":
        return cls({j: 0.0 for j in mode_set})

    @classmethod
    def from_array(cls, values: Sequence[float], mode_set: Iterable[int] = DEFAULT_MODES) -> "AmplitudeVector":
        mode_set = tuple(mode_set)
        values = list(values)
        if len(values) != len(mode_set):
            raise ValueError(f"{len(values)} values for {len(mode_set)} modes")
        return cls(dict(zip(mode_set, values)))

    @property
    def mode_set(self) -> tuple[int, ...]:
        return tuple(self._entries)

    def get(self, noll: int) -> float:
        return self._entries.get(noll, 0.0)

    def items(self):
        return self._entries.items()

    def as_array(self, mode_set: Iterable[int] | None = None) -> np.ndarray:
        modes = self.mode_set if mode_set is None else tuple(mode_set)
        return np.array([self.get(j) for j in modes], dtype=float)

    def restricted(self, mode_set: Iterable[int]) -> "AmplitudeVector":
        return AmplitudeVector({j: self.get(j) for j in mode_set})

    def scaled(self, factor: float) -> "AmplitudeVector":
        return AmplitudeVector({j: factor * a for j, a in self.items()})

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, AmplitudeVector) and self._entries == other._entries

    def __repr__(self) -> str:
        inner = ", ".join(f"{j}: {a:g}" for j, a in self.items())
        return f"AmplitudeVector({{{inner}}})"

    # -- serialization ------------------------------------------------------

    def to_json_obj(self) -> dict[str, float]:
        return {str(j): a for j, a in self.items()}

    @classmethod
    def from_json_obj(cls, obj: Mapping[str, float]) -> "AmplitudeVector":
        return cls({int(k): float(v) for k, v in obj.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json(cls, text: str) -> "AmplitudeVector":
        return cls.from_json_obj(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["noll", "amplitude_um"])
        for j, a in self.items():
            writer.writerow([j, repr(a)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AmplitudeVector":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:2] != ["noll", "amplitude_um"]:
            raise ValueError(f"unexpected amplitude CSV header: {header}")
        return cls({int(row[0]): float(row[1]) for row in reader if row})


def compose_wavefront(amps: AmplitudeVector, grid: PupilGrid) -> np.ndarray:
    """Weighted sum of modes, in microns; zero outside the mask."""
    w = np.zeros(grid.shape)
    for noll, a in amps.items():
        if a != 0.0:
            w += a * zernike_eval(noll, grid)
    return w


def _mode_matrix(grid: PupilGrid, modes: Sequence[int]) -> np.ndarray:
    cols = [zernike_eval(j, grid)[grid.mask] for j in modes]
    return np.stack(cols, axis=1)


def decompose_wavefront(
    w: np.ndarray, grid: PupilGrid, modes: Sequence[int] = DEFAULT_MODES
) -> AmplitudeVector:
    """Least-squares projection of a wavefront onto the sampled modes.

    Solves the normal equations over masked pixels; raises IllPosedError when
    the normal matrix condition number exceeds 1e8 (mask too small for the
    requested modes).
    """
    modes = tuple(int(j) for j in modes)
    if not modes:
        raise ValueError("mode list must be nonempty")
    if w.shape != grid.shape:
        raise GridMismatchError(f"wavefront shape {w.shape} != grid {grid.shape}")
    if grid.npix < len(modes):
        raise IllPosedError(
            f"mask has {grid.npix} pixels for {len(modes)} modes"
        )
    a_mat = _mode_matrix(grid, modes)
    gram = a_mat.T @ a_mat
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > _CONDITION_LIMIT:
        raise IllPosedError(f"normal matrix condition {cond:.3g} exceeds {_CONDITION_LIMIT:g}")
    rhs = a_mat.T @ w[grid.mask]
    coeffs = scipy.linalg.solve(gram, rhs, assume_a="sym")
    return AmplitudeVector(dict(zip(modes, coeffs)))


def wavefront_rmse(w1: np.ndarray, w2: np.ndarray, grid: PupilGrid) -> float:
    """Root-mean-square difference in microns, averaged over the pupil mask."""
    if w1.shape != grid.shape or w2.shape != grid.shape:
        raise GridMismatchError(
            f"wavefront shapes {w1.shape}, {w2.shape} do not match grid {grid.shape}"
        )
    d = (w1 - w2)[grid.mask]
    return float(np.sqrt(np.mean(d * d)))

"""Parameterized PSF fitting: Zernike amplitudes plus nuisance parameters.

Matches the forward model to a measured stack by damped Gauss-Newton
(Levenberg-style trust region) with a forward finite-difference Jacobian.
Lateral shifts enter the model as exact pupil tilt ramps and the axial shift
as extra defocus, so the fit tolerates beads that are not perfectly centered.

For the default gaussian-lsq objective the two linear nuisance parameters
(intensity scale and constant background) are solved exactly at every model
evaluation instead of being iterated, which removes two dimensions from the
nonlinear search at no cost in fidelity. The poisson-nll objective keeps
them in the nonlinear parameter set and uses Fisher scoring weights.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from . import optics
from .errors import FitDivergedError, GridMismatchError
from .optics import MicroscopeConfig, PsfStack, cfft2
from .zernike import DEFAULT_MODES, AmplitudeVector, zernike_eval

_FD_STEP = 1e-3  # microns (amplitudes, shifts) / absolute (scale, background)
_LAMBDA0 = 1e-3
_LAMBDA_UP = 7.0
_LAMBDA_DOWN = 3.0
_MAX_RETRIES = 8


@dataclass(frozen=True)
class FitOptions:
    iterations: int = 30
    objective: str = "gaussian-lsq"  # or "poisson-nll"
    fit_scale: bool = True
    fit_background: bool = True
    fit_shift_x: bool = True
    fit_shift_y: bool = True
    fit_shift_z: bool = True
    init: AmplitudeVector | None = None
    step_tolerance: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_tolerance <= 0:
            raise ValueError("step_tolerance must be > 0")
        if self.objective not in ("gaussian-lsq", "poisson-nll"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass(frozen=True)
class FitParams:
    """A full parameter set for objective_eval."""

    amplitudes: AmplitudeVector
    scale: float = 1.0
    background: float = 0.0
    shifts_um: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class FitResult:
    amplitudes: AmplitudeVector
    scale: float
    background: float
    shifts_um: tuple[float, float, float]
    objective_trace: list[float]
    converged: bool
    wall_time_s: float = 0.0


# cached sampled mode stacks per (config digest, mode set)
_mode_cache: dict[tuple[str, tuple[int, ...]], np.ndarray] = {}
_mode_lock = threading.Lock()


def _mode_stack(config: MicroscopeConfig, modes: tuple[int, ...]) -> np.ndarray:
    key = (config.digest(), modes)
    with _mode_lock:
        hit = _mode_cache.get(key)
    if hit is not None:
        return hit
    grid = optics.pupil_grid(config)
    stack = np.stack([zernike_eval(j, grid) for j in modes])
    with _mode_lock:
        _mode_cache.setdefault(key, stack)
        return _mode_cache[key]


class _Model:
    """Forward model bound to one stack's plane offsets."""

    def __init__(self, config: MicroscopeConfig, offsets: np.ndarray, modes: tuple[int, ...]):
        self.config = config
        self.grid = optics.pupil_grid(config)
        self.mask = self.grid.mask
        self.modes = modes
        self.mode_values = _mode_stack(config, modes)[:, self.mask]  # (M, P)
        geo = optics._geometry(config)
        self.kz_in = geo["kz"][self.mask]
        self.kx_in = self.grid.kx[self.mask]
        self.ky_in = self.grid.ky[self.mask]
        self.base_factors = optics._defocus_factors(config, offsets)[:, self.mask]  # (nz, P)
        self.k_phase = 2 * np.pi / config.lambda_um
        self.norm = optics._norm_const(config)
        self.crop = optics.crop_slices(config)
        self.nz = len(offsets)

    def intensities(self, amps_vec: np.ndarray, shifts: tuple[float, float, float]) -> np.ndarray:
        """Normalized model intensities, flattened over all voxels."""
        dx, dy, dz = shifts
        phase = self.k_phase * (amps_vec @ self.mode_values)
        phase += 2 * np.pi * (self.kx_in * dx + self.ky_in * dy)
        pupil_in = np.exp(1j * phase)
        if dz:
            pupil_in = pupil_in * np.exp(-2j * np.pi * dz * self.kz_in)
        fields_in = pupil_in[None, :] * self.base_factors
        full = np.zeros((self.nz,) + self.grid.shape, dtype=complex)
        full[:, self.mask] = fields_in
        images = cfft2(full)
        sy, sx = self.crop
        return (np.abs(images[:, sy, sx]) ** 2).ravel() / self.norm


def _solve_linear(m: np.ndarray, y: np.ndarray, fit_scale: bool, fit_background: bool) -> tuple[float, float]:
    """Exact least-squares intensity scale and background for a fixed shape."""
    if fit_scale and fit_background:
        n = y.size
        sm, sy_ = m.sum(), y.sum()
        smm, smy = float(m @ m), float(m @ y)
        det = smm * n - sm * sm
        if det <= 0:
            return 1.0, 0.0
        s = (smy * n - sm * sy_) / det
        b = (sy_ - s * sm) / n
        return s, b
    if fit_scale:
        smm = float(m @ m)
        return (float(m @ y) / smm if smm > 0 else 1.0), 0.0
    if fit_background:
        return 1.0, float(np.mean(y - m))
    return 1.0, 0.0


def objective_eval(
    stack: PsfStack,
    config: MicroscopeConfig,
    params: FitParams,
    objective: str = "gaussian-lsq",
    mode_set: tuple[int, ...] = DEFAULT_MODES,
) -> float:
    """Scalar fit objective at the given parameters; pure."""
    _check_dims(stack, config)
    model = _Model(config, np.asarray(stack.z_offsets_um), tuple(mode_set))
    m = model.intensities(params.amplitudes.as_array(mode_set), params.shifts_um)
    y = stack.data.astype(np.float64).ravel()
    mu = params.scale * m + params.background
    if objective == "gaussian-lsq":
        r = mu - y
        return float(r @ r)
    if objective == "poisson-nll":
        return _poisson_nll(mu, y)
    raise ValueError(f"unknown objective {objective!r}")


def _poisson_nll(mu: np.ndarray, y: np.ndarray) -> float:
    mu = np.maximum(mu, 1e-12)
    y = np.maximum(y, 0.0)
    return float(np.sum(mu - y * np.log(mu)))


def _check_dims(stack: PsfStack, config: MicroscopeConfig) -> None:
    if stack.data.shape[1:] != (config.ny, config.nx):
        raise GridMismatchError(
            f"stack planes {stack.data.shape[1:]} do not match config "
            f"({config.ny}, {config.nx})"
        )
    if not np.all(np.isfinite(stack.data)):
        raise ValueError("stack contains non-finite values")


def fit_retrieve(
    stack: PsfStack,
    config: MicroscopeConfig,
    opts: FitOptions = FitOptions(),
    mode_set: tuple[int, ...] = DEFAULT_MODES,
) -> FitResult:
    """Estimate Zernike amplitudes and nuisance parameters for one stack."""
    t0 = time.perf_counter()
    _check_dims(stack, config)
    mode_set = tuple(mode_set)
    model = _Model(config, np.asarray(stack.z_offsets_um), mode_set)
    y = stack.data.astype(np.float64).ravel()

    if opts.objective == "gaussian-lsq":
        result = _fit_gaussian(model, y, opts, mode_set)
    else:
        result = _fit_poisson(model, y, opts, mode_set)
    result.wall_time_s = time.perf_counter() - t0
    return result


def _shift_layout(opts: FitOptions) -> list[int]:
    """Indices of the enabled shift axes (0=x, 1=y, 2=z)."""
    return [i for i, on in enumerate((opts.fit_shift_x, opts.fit_shift_y, opts.fit_shift_z)) if on]


def _unpack(theta: np.ndarray, n_modes: int, shift_axes: list[int]) -> tuple[np.ndarray, tuple[float, float, float]]:
    shifts = [0.0, 0.0, 0.0]
    for slot, axis in enumerate(shift_axes):
        shifts[axis] = float(theta[n_modes + slot])
    return theta[:n_modes], (shifts[0], shifts[1], shifts[2])


def _lm_solve(jtj: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    damped = jtj + lam * np.diag(np.diag(jtj)) + 1e-12 * np.eye(jtj.shape[0])
    return np.linalg.solve(damped, -g)


def _fit_gaussian(model: _Model, y: np.ndarray, opts: FitOptions, mode_set: tuple) -> FitResult:
    n_modes = len(mode_set)
    shift_axes = _shift_layout(opts)
    init = opts.init if opts.init is not None else AmplitudeVector.zero(mode_set)
    theta = np.concatenate([init.as_array(mode_set), np.zeros(len(shift_axes))])

    def residual(th: np.ndarray) -> tuple[np.ndarray, float, float]:
        amps_vec, shifts = _unpack(th, n_modes, shift_axes)
        m = model.intensities(amps_vec, shifts)
        s, b = _solve_linear(m, y, opts.fit_scale, opts.fit_background)
        return s * m + b - y, s, b

    r, scale, background = residual(theta)
    obj = float(r @ r)
    if not np.isfinite(obj):
        raise FitDivergedError("non-finite objective at the initial point", [obj])
    trace = [obj]
    lam = _LAMBDA0
    converged = False

    for _ in range(opts.iterations):
        jac = np.empty((y.size, theta.size))
        for k in range(theta.size):
            bumped = theta.copy()
            bumped[k] += _FD_STEP
            rk, _, _ = residual(bumped)
            jac[:, k] = (rk - r) / _FD_STEP
        jtj = jac.T @ jac
        g = jac.T @ r
        accepted = False
        step = None
        for _ in range(_MAX_RETRIES):
            step = _lm_solve(jtj, g, lam)
            trial = theta + step
            r_trial, s_trial, b_trial = residual(trial)
            obj_trial = float(r_trial @ r_trial)
            if not np.isfinite(obj_trial):
                raise FitDivergedError("objective became non-finite", trace)
            if obj_trial < obj:
                theta, r, obj = trial, r_trial, obj_trial
                scale, background = s_trial, b_trial
                lam = max(lam / _LAMBDA_DOWN, 1e-12)
                trace.append(obj)
                accepted = True
                break
            lam *= _LAMBDA_UP
        if not accepted:
            converged = True  # trust region collapsed: local minimum
            break
        if np.linalg.norm(step) < opts.step_tolerance:
            converged = True
            break

    amps_vec, shifts = _unpack(theta, n_modes, shift_axes)
    return FitResult(
        amplitudes=AmplitudeVector.from_array(amps_vec, mode_set),
        scale=scale,
        background=background,
        shifts_um=shifts,
        objective_trace=trace,
        converged=converged,
    )


def _fit_poisson(model: _Model, y: np.ndarray, opts: FitOptions, mode_set: tuple) -> FitResult:
    n_modes = len(mode_set)
    shift_axes = _shift_layout(opts)
    init = opts.init if opts.init is not None else AmplitudeVector.zero(mode_set)

    # scale and background stay in the nonlinear set for the likelihood path
    m0 = model.intensities(init.as_array(mode_set), (0.0, 0.0, 0.0))
    s0, b0 = _solve_linear(m0, y, opts.fit_scale, opts.fit_background)
    s0 = max(s0, 1e-6)
    b0 = max(b0, 1e-9)
    theta = np.concatenate([
        init.as_array(mode_set),
        np.zeros(len(shift_axes)),
        [s0] if opts.fit_scale else [],
        [b0] if opts.fit_background else [],
    ])
    n_shift = len(shift_axes)

    def decode(th: np.ndarray) -> tuple[np.ndarray, tuple, float, float]:
        amps_vec, shifts = _unpack(th, n_modes, shift_axes)
        pos = n_modes + n_shift
        s = float(th[pos]) if opts.fit_scale else 1.0
        b = float(th[pos + (1 if opts.fit_scale else 0)]) if opts.fit_background else 0.0
        return amps_vec, shifts, s, b

    def mu_of(th: np.ndarray) -> np.ndarray:
        amps_vec, shifts, s, b = decode(th)
        return s * model.intensities(amps_vec, shifts) + b

    mu = mu_of(theta)
    obj = _poisson_nll(mu, y)
    if not np.isfinite(obj):
        raise FitDivergedError("non-finite objective at the initial point", [obj])
    trace = [obj]
    yc = np.maximum(y, 0.0)
    lam = _LAMBDA0
    converged = False

    for _ in range(opts.iterations):
        jac = np.empty((y.size, theta.size))
        for k in range(theta.size):
            bumped = theta.copy()
            bumped[k] += _FD_STEP
            jac[:, k] = (mu_of(bumped) - mu) / _FD_STEP
        mu_safe = np.maximum(mu, 1e-12)
        w = 1.0 / mu_safe  # Fisher weights
        g = jac.T @ (1.0 - yc / mu_safe)
        jtj = (jac * w[:, None]).T @ jac
        accepted = False
        step = None
        for _ in range(_MAX_RETRIES):
            step = _lm_solve(jtj, g, lam)
            trial = theta + step
            mu_trial = mu_of(trial)
            obj_trial = _poisson_nll(mu_trial, y)
            if not np.isfinite(obj_trial):
                raise FitDivergedError("objective became non-finite", trace)
            if obj_trial < obj:
                theta, mu, obj = trial, mu_trial, obj_trial
                lam = max(lam / _LAMBDA_DOWN, 1e-12)
                trace.append(obj)
                accepted = True
                break
            lam *= _LAMBDA_UP
        if not accepted:
            converged = True
            break
        if np.linalg.norm(step) < opts.step_tolerance:
            converged = True
            break

    amps_vec, shifts, scale, background = decode(theta)
    return FitResult(
        amplitudes=AmplitudeVector.from_array(amps_vec, mode_set),
        scale=scale,
        background=background,
        shifts_um=shifts,
        objective_trace=trace,
        converged=converged,
    )


def fit_retrieve_batch(
    stacks: list[PsfStack],
    config: MicroscopeConfig,
    opts: FitOptions = FitOptions(),
    mode_set: tuple[int, ...] = DEFAULT_MODES,
    workers: int = 1,
) -> list[FitResult]:
    """Fit many stacks, fanning out across a thread pool."""
    if workers <= 1 or len(stacks) <= 1:
        return [fit_retrieve(s, config, opts, mode_set) for s in stacks]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fit_retrieve(s, config, opts, mode_set), stacks))

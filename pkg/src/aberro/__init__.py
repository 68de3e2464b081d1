"""Aberro: synthetic aberrated microscope PSFs and wavefront retrieval.

Forward model: scalar diffraction from a Zernike-described back-pupil phase to
a 3D intensity stack across defocus planes, plus finite-bead blur and a
Poisson/Gaussian noise model. Inverse paths: multi-plane Gerchberg-Saxton
projection and parameterized PSF fitting. A dataset generator and evaluation
harness sit on top.
"""

from .errors import (
    AberroError,
    DegenerateInputError,
    FitDivergedError,
    GridMismatchError,
    IllPosedError,
)
from .zernike import (
    DEFAULT_MODES,
    AmplitudeVector,
    PupilGrid,
    ZernikeIndex,
    compose_wavefront,
    decompose_wavefront,
    disk_gram,
    nm_to_noll,
    noll_to_nm,
    wavefront_rmse,
    zernike_eval,
)

__version__ = "0.1.0"

__all__ = [
    "AberroError",
    "AmplitudeVector",
    "DEFAULT_MODES",
    "DegenerateInputError",
    "FitDivergedError",
    "GridMismatchError",
    "IllPosedError",
    "PupilGrid",
    "ZernikeIndex",
    "compose_wavefront",
    "decompose_wavefront",
    "disk_gram",
    "nm_to_noll",
    "noll_to_nm",
    "wavefront_rmse",
    "zernike_eval",
]

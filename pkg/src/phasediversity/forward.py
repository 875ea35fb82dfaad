"""Image-formation operator for phase-diversity measurements.

A measurement plane is either the pupil itself (pointwise amplitude,
identity operator) or a defocus plane: multiply by the unit-modulus
quadratic phase exp(i 2 pi d (x^2 + y^2)) and take a unitary 2-D DFT.
Both realizations are unitary, so the adjoint inverts the forward map
exactly and total intensity is conserved across planes.

Pupil coordinates are the centered lattice x_j = (j - n/2)/n in
[-1/2, 1/2); with that normalization the defocus parameter d is the
quadratic-phase depth in waves.  No fftshift is applied here: shifting
is a presentation concern left to plotting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import require_same_shape

__all__ = [
    "AMPLITUDE",
    "DEFOCUS",
    "PlaneSpec",
    "DiversityPlan",
    "PupilGrid",
    "TransformCounter",
    "unitary_dft2",
    "defocus_diag",
    "diversity_forward",
    "diversity_adjoint",
    "predict_intensity",
]

AMPLITUDE = "amplitude"
DEFOCUS = "defocus"


@dataclass(frozen=True)
class PlaneSpec:
    """One measurement plane: pupil amplitude or a defocused image."""

    kind: str
    defocus_waves: float = 0.0

    def __post_init__(self):
        if self.kind not in (AMPLITUDE, DEFOCUS):
            raise ValueError(f"unknown plane kind {self.kind!r}")

    @classmethod
    def amplitude(cls) -> "PlaneSpec":
        return cls(AMPLITUDE)

    @classmethod
    def defocus(cls, d: float) -> "PlaneSpec":
        return cls(DEFOCUS, float(d))


@dataclass(frozen=True)
class DiversityPlan:
    """Ordered list of measurement planes.

    At most one amplitude plane is allowed and it must come first; at
    least one plane is required.
    """

    planes: tuple

    def __init__(self, planes: Sequence[PlaneSpec]):
        planes = tuple(planes)
        if not planes:
            raise ValueError("a diversity plan needs at least one plane")
        n_amp = sum(1 for p in planes if p.kind == AMPLITUDE)
        if n_amp > 1:
            raise ValueError("at most one amplitude plane is allowed")
        if n_amp == 1 and planes[0].kind != AMPLITUDE:
            raise ValueError("the amplitude plane must be plane 0")
        object.__setattr__(self, "planes", planes)

    def __len__(self) -> int:
        return len(self.planes)

    def __iter__(self):
        return iter(self.planes)

    @classmethod
    def from_defocus(cls, defocus_list: Sequence[float],
                     amplitude_plane: bool = False) -> "DiversityPlan":
        planes = [PlaneSpec.amplitude()] if amplitude_plane else []
        planes += [PlaneSpec.defocus(d) for d in defocus_list]
        return cls(planes)


@dataclass(frozen=True)
class PupilGrid:
    """Square n x n grid with centered coordinates and a boolean pupil mask."""

    n: int
    mask: np.ndarray

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("transform-bearing grids need n >= 2")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.n, self.n):
            raise ValueError(f"mask shape {mask.shape} does not match n={self.n}")
        object.__setattr__(self, "mask", mask)

    @staticmethod
    def coordinates(n: int):
        """Centered lattice x_j = (j - n/2)/n as a meshgrid (x, y)."""
        axis = (np.arange(n) - n / 2.0) / n
        return np.meshgrid(axis, axis, indexing="xy")

    @property
    def xy(self):
        return self.coordinates(self.n)

    @property
    def radius_sq(self) -> np.ndarray:
        x, y = self.xy
        return x * x + y * y


@dataclass
class TransformCounter:
    """Mutable FFT-call counter; one forward or inverse transform = one call."""

    count: int = 0

    def add(self, k: int = 1) -> None:
        self.count += k


def unitary_dft2(f: np.ndarray, inverse: bool = False,
                 counter: TransformCounter | None = None) -> np.ndarray:
    """Unitary 2-D DFT (norm 1/sqrt(rows*cols) each way), so forward o inverse
    is the identity and Parseval holds exactly."""
    f = np.asarray(f, dtype=complex)
    if counter is not None:
        counter.add()
    if inverse:
        return np.fft.ifft2(f, norm="ortho")
    return np.fft.fft2(f, norm="ortho")


def defocus_diag(plane: PlaneSpec, grid: PupilGrid) -> np.ndarray:
    """Unit-modulus quadratic phase exp(i 2 pi d (x^2+y^2)) for a defocus plane."""
    if plane.kind != DEFOCUS:
        raise ValueError("defocus_diag is defined for defocus planes only")
    return np.exp(2j * np.pi * plane.defocus_waves * grid.radius_sq)


def diversity_forward(u: np.ndarray, plane: PlaneSpec, grid: PupilGrid,
                      counter: TransformCounter | None = None) -> np.ndarray:
    """Apply the plane's forward operator to the pupil field ``u``."""
    u = np.asarray(u, dtype=complex)
    require_same_shape(u, grid.mask)
    if plane.kind == AMPLITUDE:
        return u.copy()
    return unitary_dft2(defocus_diag(plane, grid) * u, counter=counter)


def diversity_adjoint(v: np.ndarray, plane: PlaneSpec, grid: PupilGrid,
                      counter: TransformCounter | None = None) -> np.ndarray:
    """Adjoint (= inverse, by unitarity) of :func:`diversity_forward`."""
    v = np.asarray(v, dtype=complex)
    require_same_shape(v, grid.mask)
    if plane.kind == AMPLITUDE:
        return v.copy()
    return np.conj(defocus_diag(plane, grid)) * unitary_dft2(v, inverse=True, counter=counter)


def predict_intensity(u: np.ndarray, plane: PlaneSpec, grid: PupilGrid,
                      counter: TransformCounter | None = None) -> np.ndarray:
    """Predicted intensity |F_plane(u)|^2 on the measurement plane."""
    w = diversity_forward(u, plane, grid, counter=counter)
    return np.abs(w) ** 2

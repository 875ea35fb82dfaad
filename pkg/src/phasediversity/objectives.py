"""Data-misfit models for phase-diversity retrieval.

Three misfits between measured intensities I_m and the prediction
K_m(u) = |F_m(u)|^2, summed over planes with equal weights:

* ``MLP`` -- Poisson negative log-likelihood,
  sum K - I log(K + eps^2).
* ``LS``  -- least squares on amplitudes M = sqrt(I),
  sum K - 2 sqrt(K + eps^2) M.
* ``LSI`` -- least squares on intensities, 1/2 ||K - I||^2.

Gradients follow the conjugate-coordinate convention: the returned g
satisfies f(u + h) ~ f(u) + 2 Re<h, g>.  The Hessian is applied
matrix-free as H(h) = F*(a o F(h)) + F*(b o conj(F(h))) with real
coefficient a and complex coefficient b per plane; the same (a, b)
vectors are the structured-Hessian diagonals used by the spectrum
analysis module.

The eps^2 perturbation is added to intensity inside log and sqrt (not
eps to amplitude); the first LS term keeps K unperturbed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import require_intensity, require_same_shape
from .forward import (
    DiversityPlan,
    PupilGrid,
    TransformCounter,
    diversity_adjoint,
    diversity_forward,
)

__all__ = [
    "MODELS",
    "MeasurementSet",
    "ObjectiveSpec",
    "DataMisfit",
    "objective_value",
    "objective_gradient",
    "objective_hvp",
    "objective_floor",
    "gradient_weight",
    "hvp_coefficients",
]

MODELS = ("MLP", "LS", "LSI")

DEFAULT_EPSILON = 1e-14


@dataclass(frozen=True)
class MeasurementSet:
    """Per-plane observed intensities and the derived amplitudes sqrt(I)."""

    intensities: tuple

    def __init__(self, intensities: Sequence[np.ndarray]):
        ints = tuple(require_intensity(i) for i in intensities)
        if not ints:
            raise ValueError("a measurement set needs at least one plane")
        object.__setattr__(self, "intensities", ints)

    @property
    def amplitudes(self) -> tuple:
        return tuple(np.sqrt(i) for i in self.intensities)

    def __len__(self) -> int:
        return len(self.intensities)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Model selector plus everything needed to evaluate the misfit."""

    model: str
    epsilon: float
    plan: DiversityPlan
    data: MeasurementSet
    grid: PupilGrid

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown misfit model {self.model!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if len(self.data) != len(self.plan):
            raise ValueError(
                f"{len(self.data)} data planes for {len(self.plan)} plan planes")
        for i in self.data.intensities:
            require_same_shape(i, self.grid.mask)


def gradient_weight(model: str, K: np.ndarray, intensity: np.ndarray,
                    amplitude: np.ndarray, eps: float) -> np.ndarray:
    """Real weight w such that the per-plane gradient is F*(F(u) o w)."""
    Ke = K + eps * eps
    if model == "MLP":
        return 1.0 - intensity / Ke
    if model == "LS":
        return 1.0 - amplitude / np.sqrt(Ke)
    return K - intensity  # LSI


def hvp_coefficients(model: str, Fu: np.ndarray, K: np.ndarray,
                     intensity: np.ndarray, amplitude: np.ndarray,
                     eps: float):
    """Per-plane Hessian coefficients (a, b): H(h) = F*(a o Fh + b o conj(Fh)).

    ``a`` is real (the diagonal block), ``b`` complex (the conjugate block).
    """
    Ke = K + eps * eps
    if model == "MLP":
        a = 1.0 - (eps * eps) * intensity / Ke**2
        b = intensity * Fu**2 / Ke**2
    elif model == "LS":
        a = 1.0 - (amplitude / (2.0 * np.sqrt(Ke))) * ((K + 2.0 * eps * eps) / Ke)
        b = Fu**2 * amplitude / (2.0 * Ke**1.5)
    else:  # LSI
        a = 2.0 * K - intensity
        b = Fu**2
    return a, b


def _plane_value(model: str, K: np.ndarray, intensity: np.ndarray,
                 amplitude: np.ndarray, eps: float) -> float:
    Ke = K + eps * eps
    if model == "MLP":
        return float(np.sum(K - intensity * np.log(Ke)))
    if model == "LS":
        return float(np.sum(K - 2.0 * np.sqrt(Ke) * amplitude))
    return float(0.5 * np.sum((K - intensity) ** 2))


class DataMisfit:
    """Evaluator bundling value, gradient and Hessian action with FFT counting.

    Plane terms are accumulated in plan order so results are deterministic.
    Instances are reentrant: no state mutates during evaluation except the
    transform counter.
    """

    def __init__(self, spec: ObjectiveSpec, counter: TransformCounter | None = None):
        self.spec = spec
        self.counter = counter if counter is not None else TransformCounter()
        self._amplitudes = spec.data.amplitudes

    @property
    def fft_calls(self) -> int:
        return self.counter.count

    def value(self, u: np.ndarray) -> float:
        spec = self.spec
        total = 0.0
        for plane, intensity, amplitude in zip(
                spec.plan, spec.data.intensities, self._amplitudes):
            Fu = diversity_forward(u, plane, spec.grid, counter=self.counter)
            K = np.abs(Fu) ** 2
            total += _plane_value(spec.model, K, intensity, amplitude, spec.epsilon)
        return total

    def value_and_gradient(self, u: np.ndarray):
        spec = self.spec
        total = 0.0
        grad = np.zeros_like(np.asarray(u, dtype=complex))
        for plane, intensity, amplitude in zip(
                spec.plan, spec.data.intensities, self._amplitudes):
            Fu = diversity_forward(u, plane, spec.grid, counter=self.counter)
            K = np.abs(Fu) ** 2
            total += _plane_value(spec.model, K, intensity, amplitude, spec.epsilon)
            w = gradient_weight(spec.model, K, intensity, amplitude, spec.epsilon)
            grad += diversity_adjoint(Fu * w, plane, spec.grid, counter=self.counter)
        return total, grad

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return self.value_and_gradient(u)[1]

    def hvp(self, u: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Hessian action at ``u`` applied to ``h`` (real-linear in h)."""
        return self.hessian_operator(u)(h)

    def hessian_operator(self, u: np.ndarray):
        """Hessian action at a fixed ``u`` with the per-plane coefficients
        precomputed; repeated applications (inner CG) cost two transforms
        per plane instead of three."""
        spec = self.spec
        cached = []
        for plane, intensity, amplitude in zip(
                spec.plan, spec.data.intensities, self._amplitudes):
            Fu = diversity_forward(u, plane, spec.grid, counter=self.counter)
            K = np.abs(Fu) ** 2
            a, b = hvp_coefficients(spec.model, Fu, K, intensity, amplitude,
                                    spec.epsilon)
            cached.append((plane, a, b))

        def apply(h: np.ndarray) -> np.ndarray:
            out = np.zeros_like(np.asarray(u, dtype=complex))
            for plane, a, b in cached:
                Fh = diversity_forward(h, plane, spec.grid, counter=self.counter)
                out += diversity_adjoint(a * Fh + b * np.conj(Fh), plane,
                                         spec.grid, counter=self.counter)
            return out

        return apply


def objective_floor(spec: ObjectiveSpec) -> float:
    """Analytic lower bound of the misfit over all fields.

    The per-pixel terms depend on u only through K >= 0, so minimizing
    each term over K bounds the objective from below.  Used to anchor
    discrepancy-principle thresholds for the signed LS/MLP objectives.
    """
    eps = spec.epsilon
    e2 = eps * eps
    total = 0.0
    for intensity, amplitude in zip(spec.data.intensities, spec.data.amplitudes):
        if spec.model == "LSI":
            continue
        if spec.model == "LS":
            # min_K K - 2 M sqrt(K + e2): K* = M^2 - e2 when positive, else 0
            interior = -intensity - e2
            boundary = -2.0 * amplitude * eps
            total += float(np.sum(np.where(intensity >= e2, interior, boundary)))
        else:  # MLP: min_K K - I log(K + e2): K* = I - e2 when positive, else 0
            with np.errstate(divide="ignore", invalid="ignore"):
                interior = np.where(intensity > 0,
                                    intensity - e2 - intensity * np.log(
                                        np.where(intensity > 0, intensity, 1.0)),
                                    0.0)
            boundary = -intensity * np.log(e2)
            total += float(np.sum(np.where(intensity >= e2, interior, boundary)))
    return total


def objective_value(spec: ObjectiveSpec, u: np.ndarray) -> float:
    return DataMisfit(spec).value(u)


def objective_gradient(spec: ObjectiveSpec, u: np.ndarray) -> np.ndarray:
    return DataMisfit(spec).gradient(u)


def objective_hvp(spec: ObjectiveSpec, u: np.ndarray, h: np.ndarray) -> np.ndarray:
    return DataMisfit(spec).hvp(u, h)

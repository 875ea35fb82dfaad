"""Synthetic retrieval problems: pupils, wavefronts, measurements, noise.

Ground-truth wavefronts have unit amplitude inside the pupil mask and
zero outside; phases are expressed in waves.  All generators are
deterministic under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import field_from_csv, field_to_csv, load_field, save_field
from .forward import DiversityPlan, PupilGrid, predict_intensity
from .objectives import MeasurementSet

__all__ = [
    "annular_pupil",
    "noll_to_nm",
    "zernike_circle",
    "zernike_annular_basis",
    "zernike_annular_phase",
    "von_karman_screen",
    "segmented_membership",
    "segmented_pupil",
    "simulate_measurements",
    "add_poisson_noise",
    "MorozovResult",
    "morozov_stop",
    "AberrationStats",
    "aberration_stats",
    "phase_to_wavefront",
    "ProblemInstance",
    "PROBLEM_DEFAULTS",
    "build_problem",
    "save_instance",
    "load_instance",
    "PROBLEM_TYPES",
]

PROBLEM_TYPES = ("zernike", "vonkarman", "segmented")


def annular_pupil(n: int, r_inner: float, r_outer: float) -> PupilGrid:
    """Annular mask r_inner <= r < r_outer on the centered lattice.

    A disc is the r_inner = 0 case.  Radii live in [0, 0.5] (half the
    grid width); r_inner must be strictly below r_outer.
    """
    if not (0.0 <= r_inner < r_outer <= 0.5):
        raise ValueError(
            f"invalid pupil radii: need 0 <= r_inner < r_outer <= 0.5, "
            f"got ({r_inner}, {r_outer})")
    x, y = PupilGrid.coordinates(n)
    r = np.sqrt(x * x + y * y)
    return PupilGrid(n, (r >= r_inner) & (r < r_outer))


def noll_to_nm(j: int):
    """Map a 1-based Noll index to radial degree n and azimuthal order m."""
    if j < 1:
        raise ValueError("Noll indices start at 1")
    n = 0
    j1 = j - 1
    while j1 > n:
        n += 1
        j1 -= n
    m = (-1) ** j * ((n % 2) + 2 * ((j1 + ((n + 1) % 2)) // 2))
    return n, m


def zernike_circle(j: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Unnormalized circle Zernike polynomial for Noll index ``j``."""
    n, m = noll_to_nm(j)
    am = abs(m)
    radial = np.zeros_like(rho)
    for k in range((n - am) // 2 + 1):
        coef = ((-1) ** k * math.factorial(n - k)
                / (math.factorial(k)
                   * math.factorial((n + am) // 2 - k)
                   * math.factorial((n - am) // 2 - k)))
        radial += coef * rho ** (n - 2 * k)
    if m > 0:
        return radial * np.cos(am * theta)
    if m < 0:
        return radial * np.sin(am * theta)
    return radial


def zernike_annular_basis(grid: PupilGrid, count: int) -> np.ndarray:
    """First ``count`` basis modes orthonormalized over the masked pixels.

    Standard circle Zernikes (Noll order) restricted to the mask are
    Gram-Schmidt orthonormalized in the discrete inner product
    <a, b> = mean over mask of a*b, so each mode has unit RMS on the
    mask.  Returns an array of shape (count, n, n), zero outside the mask.
    """
    mask = grid.mask
    npix = int(mask.sum())
    if npix == 0:
        raise ValueError("empty pupil mask")
    if count > npix:
        raise ValueError(f"requested {count} modes from a {npix}-pixel mask")
    x, y = grid.xy
    r = np.sqrt(x * x + y * y)
    r_max = r[mask].max()
    rho = (r / r_max)[mask]
    theta = np.arctan2(y, x)[mask]

    basis = []
    for j in range(1, count + 1):
        v = zernike_circle(j, rho, theta)
        for _ in range(2):  # re-orthogonalize for 1e-10 level orthonormality
            for b in basis:
                v = v - np.mean(b * v) * b
        nrm = math.sqrt(float(np.mean(v * v)))
        if nrm < 1e-12:
            raise ValueError(f"mask cannot support mode {j} (rank deficient)")
        basis.append(v / nrm)

    out = np.zeros((count, grid.n, grid.n))
    for j, b in enumerate(basis):
        out[j][mask] = b
    return out


def zernike_annular_phase(grid: PupilGrid, index: int, coeff: float) -> np.ndarray:
    """Phase field (waves) coeff * mode ``index``; RMS over the mask = |coeff|."""
    basis = zernike_annular_basis(grid, index)
    return coeff * basis[index - 1]


def von_karman_screen(grid: PupilGrid, r0: float = 0.1, outer_scale: float = 2.0,
                      seed: int = 0, target_rms: float = 0.19) -> np.ndarray:
    """Turbulence-style phase screen (waves) via the spectral method.

    Complex white Gaussian noise is shaped by sqrt(PSD) with
    PSD(k) ~ r0^(-5/3) (k^2 + 1/L0^2)^(-11/6) (k in cycles per grid
    width, L0 = ``outer_scale`` grid widths), inverse transformed, and
    the real part kept.  The screen is returned on the full grid,
    mean-removed and rescaled so the RMS over the mask equals
    ``target_rms``.
    """
    if r0 <= 0 or outer_scale <= 0:
        raise ValueError("r0 and outer_scale must be positive")
    n = grid.n
    rng = np.random.default_rng(seed)
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="xy")
    psd = r0 ** (-5.0 / 3.0) * (kx * kx + ky * ky + outer_scale ** -2.0) ** (-11.0 / 6.0)
    amp = np.sqrt(psd)
    amp[0, 0] = 0.0  # piston carries no information
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    screen = np.real(np.fft.ifft2(noise * amp))

    mask = grid.mask
    if not mask.any():
        raise ValueError("empty pupil mask")
    screen = screen - screen[mask].mean()
    rms = math.sqrt(float(np.mean(screen[mask] ** 2)))
    if rms == 0.0:
        raise ValueError("degenerate screen (zero variance on mask)")
    return screen * (target_rms / rms)


def _hex_ring_offsets(rings: int):
    """Axial (q, r) offsets for rings 1..rings (center excluded)."""
    cells = []
    for q in range(-rings, rings + 1):
        for r in range(-rings, rings + 1):
            dist = (abs(q) + abs(r) + abs(q + r)) // 2
            if 1 <= dist <= rings:
                cells.append((q, r))
    return cells


def segmented_membership(x: np.ndarray, y: np.ndarray, rings: int = 2,
                         gap_frac: float = 0.1,
                         outer_radius: float = 0.375) -> np.ndarray:
    """Point-in-aperture test for the hexagonally segmented pupil.

    ``rings = 0`` is a single central hexagon; for ``rings >= 1`` the
    central segment is absent and rings 1..rings are present (rings = 2
    gives the 18-segment layout).  Adjacent segment edges are separated
    by ``gap_frac`` of the center pitch.  The aperture is scaled to fit
    inside ``outer_radius``.
    """
    if rings < 0:
        raise ValueError("rings must be >= 0")
    if not (0.0 <= gap_frac < 1.0):
        raise ValueError("gap_frac must lie in [0, 1)")
    if not (0.0 < outer_radius <= 0.5):
        raise ValueError("outer_radius must lie in (0, 0.5]")
    pitch = outer_radius / (rings + (1.0 - gap_frac) / math.sqrt(3.0))
    apothem = pitch * (1.0 - gap_frac) / 2.0
    if rings == 0:
        offsets = [(0, 0)]
    else:
        offsets = _hex_ring_offsets(rings)
    # axial basis for edge-sharing neighbors at distance = pitch
    e1 = (1.0, 0.0)
    e2 = (0.5, math.sqrt(3.0) / 2.0)
    normals = [(math.cos(t), math.sin(t))
               for t in (0.0, math.pi / 3.0, 2.0 * math.pi / 3.0)]
    out = np.zeros(np.shape(x), dtype=bool)
    for q, r in offsets:
        cx = pitch * (q * e1[0] + r * e2[0])
        cy = pitch * (q * e1[1] + r * e2[1])
        dx = x - cx
        dy = y - cy
        inside = np.ones(np.shape(x), dtype=bool)
        for nx_, ny_ in normals:
            inside &= np.abs(dx * nx_ + dy * ny_) <= apothem
        out |= inside
    return out


def segmented_pupil(n: int, rings: int = 2, gap_frac: float = 0.1,
                    outer_radius: float = 0.375) -> PupilGrid:
    """Hexagonally segmented pupil mask on the centered lattice."""
    x, y = PupilGrid.coordinates(n)
    return PupilGrid(n, segmented_membership(x, y, rings, gap_frac, outer_radius))


def simulate_measurements(truth: np.ndarray, plan: DiversityPlan,
                          grid: PupilGrid) -> MeasurementSet:
    """Noiseless per-plane intensities predicted from the true wavefront."""
    return MeasurementSet(
        [predict_intensity(truth, plane, grid) for plane in plan])


def add_poisson_noise(data: MeasurementSet, snr: float, seed: int = 0) -> MeasurementSet:
    """Poisson photon noise calibrated per plane to the requested SNR.

    The photon scale s solves ||s I||_2 / sqrt(sum s I) = snr (expected
    noise norm of Poisson counts), counts are drawn at rate s*I and
    returned as counts/s, so the realized relative error is ~ 1/snr.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    rng = np.random.default_rng(seed)
    noisy = []
    for intensity in data.intensities:
        total = float(intensity.sum())
        l2sq = float(np.sum(intensity ** 2))
        if total == 0.0 or l2sq == 0.0:
            noisy.append(intensity.copy())
            continue
        scale = snr * snr * total / l2sq
        counts = rng.poisson(scale * intensity)
        noisy.append(counts / scale)
    return MeasurementSet(noisy)


@dataclass(frozen=True)
class MorozovResult:
    index: int
    reached: bool


def morozov_stop(trace, noise_misfit_level: float, tau: float = 1.05,
                 floor: float = 0.0) -> MorozovResult:
    """First iteration whose misfit drops to the discrepancy threshold.

    The threshold is floor + tau*(level - floor); with the default
    floor = 0 this is the plain tau*level rule.  Objectives that are
    bounded below by a data-dependent negative constant (the amplitude
    least-squares misfit) pass that constant as ``floor`` so the tau
    safety margin applies to the nonnegative discrepancy part.  If the
    threshold is never reached the last iteration is returned with
    ``reached = False``.
    """
    values = trace.f_values if hasattr(trace, "f_values") else np.asarray(trace, dtype=float)
    if len(values) == 0:
        raise ValueError("morozov_stop needs a nonempty trace")
    if noise_misfit_level < floor:
        raise ValueError("noise misfit level lies below the objective floor")
    threshold = floor + tau * (noise_misfit_level - floor)
    for i, v in enumerate(values):
        if v <= threshold:
            return MorozovResult(i, True)
    return MorozovResult(len(values) - 1, False)


@dataclass(frozen=True)
class AberrationStats:
    pv: float
    rms: float


def aberration_stats(phase: np.ndarray, mask: np.ndarray) -> AberrationStats:
    """Peak-to-valley and mean-removed RMS of a phase over the mask (waves)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    vals = np.asarray(phase, dtype=float)[mask]
    pv = float(vals.max() - vals.min())
    rms = float(np.sqrt(np.mean((vals - vals.mean()) ** 2)))
    return AberrationStats(pv, rms)


def phase_to_wavefront(phase_waves: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Unit-amplitude wavefront exp(i 2 pi phase) inside the mask, 0 outside."""
    u = np.exp(2j * np.pi * np.asarray(phase_waves, dtype=float))
    return np.where(np.asarray(mask, dtype=bool), u, 0.0 + 0.0j)


@dataclass
class ProblemInstance:
    """A complete synthetic retrieval problem plus its provenance."""

    grid: PupilGrid
    truth: np.ndarray
    plan: DiversityPlan
    data: MeasurementSet
    noise: dict | None = None
    meta: dict = field(default_factory=dict)


# Pupil radii below 0.5 oversample the diffraction images, which keeps the
# benchmark problems well conditioned at desk-scale grids.
PROBLEM_DEFAULTS = {
    "zernike": {"r_inner": 0.12, "r_outer": 0.3, "zernike_index": 13,
                "zernike_coeff": 0.1},
    "vonkarman": {"r_inner": 0.0, "r_outer": 0.3, "target_rms": 0.19,
                  "outer_scale": 2.0, "r0": 0.1},
    "segmented": {"rings": 2, "gap_frac": 0.1, "outer_radius": 0.3,
                  "target_rms": 0.21, "outer_scale": 2.0, "r0": 0.1},
}


def build_problem(ptype: str, n: int, seed: int = 0,
                  defocus=(-3.0, 3.0), amplitude_plane: bool = True,
                  snr: float | None = None, noise_seed: int = 0,
                  **params) -> ProblemInstance:
    """Construct a pupil, ground-truth wavefront and (optionally noisy) data.

    ``ptype`` is ``zernike`` (annulus pupil, single basis mode),
    ``vonkarman`` (disc pupil, turbulence screen) or ``segmented``
    (hexagonal segments, turbulence screen).  Unknown keyword parameters
    are rejected so config typos fail loudly.
    """
    if ptype not in PROBLEM_DEFAULTS:
        raise ValueError(f"unknown problem type {ptype!r}; "
                         f"choose from {PROBLEM_TYPES}")
    opts = dict(PROBLEM_DEFAULTS[ptype])
    unknown = set(params) - set(opts)
    if unknown:
        raise ValueError(f"unknown {ptype} parameters: {sorted(unknown)}")
    opts.update(params)

    if ptype == "zernike":
        grid = annular_pupil(n, opts["r_inner"], opts["r_outer"])
        phase = zernike_annular_phase(grid, opts["zernike_index"],
                                      opts["zernike_coeff"])
    elif ptype == "vonkarman":
        grid = annular_pupil(n, opts["r_inner"], opts["r_outer"])
        phase = von_karman_screen(grid, opts["r0"], opts["outer_scale"],
                                  seed=seed, target_rms=opts["target_rms"])
    else:
        grid = segmented_pupil(n, opts["rings"], opts["gap_frac"],
                               opts["outer_radius"])
        phase = von_karman_screen(grid, opts["r0"], opts["outer_scale"],
                                  seed=seed, target_rms=opts["target_rms"])

    truth = phase_to_wavefront(phase, grid.mask)
    plan = DiversityPlan.from_defocus(defocus, amplitude_plane)
    data = simulate_measurements(truth, plan, grid)
    noise = None
    if snr is not None:
        data = add_poisson_noise(data, snr, noise_seed)
        noise = {"snr": float(snr), "seed": int(noise_seed)}

    meta = {"problem.type": ptype, "problem.n": n, "problem.seed": seed}
    meta.update({f"problem.{k}": v for k, v in sorted(opts.items())})
    meta["plan.defocus"] = ",".join(f"{d:g}" for d in defocus)
    meta["plan.amplitude_plane"] = amplitude_plane
    if noise is not None:
        meta["noise.snr"] = noise["snr"]
        meta["noise.seed"] = noise["seed"]
    return ProblemInstance(grid, truth, plan, data, noise, meta)


# ---------------------------------------------------------------------------
# Instance directory layout: config.txt, truth.npy, plane_XX.csv
# ---------------------------------------------------------------------------

def save_instance(instance: ProblemInstance, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "config.txt", "w") as fh:
        for key, value in instance.meta.items():
            fh.write(f"{key} = {value}\n")
    save_field(path / "truth.npy", instance.truth)
    for m, intensity in enumerate(instance.data.intensities):
        field_to_csv(path / f"plane_{m:02d}.csv", intensity, header=instance.meta)


def load_instance(path) -> ProblemInstance:
    path = Path(path)
    meta: dict = {}
    with open(path / "config.txt") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    truth = load_field(path / "truth.npy")
    n = truth.shape[0]
    grid = PupilGrid(n, np.abs(truth) > 0.5)
    defocus = [float(t) for t in meta["plan.defocus"].split(",") if t]
    amplitude = meta.get("plan.amplitude_plane", "False") == "True"
    plan = DiversityPlan.from_defocus(defocus, amplitude)
    intensities = [field_from_csv(path / f"plane_{m:02d}.csv")
                   for m in range(len(plan))]
    noise = None
    if "noise.snr" in meta:
        noise = {"snr": float(meta["noise.snr"]),
                 "seed": int(meta["noise.seed"])}
    return ProblemInstance(grid, truth, plan, MeasurementSet(intensities),
                           noise, meta)

"""Resolution checks: Gaussian PSF fits and bar-target modulation.

A bead profile is fit with baseline + amplitude * exp(-(x-c)^2 / 2s^2)
by Levenberg-Marquardt least squares, seeded from the sample max,
intensity-weighted centroid and second moment. FWHM = 2*sqrt(2 ln 2)*s.
Bar-target modulation is (Imax - Imin)/(Imax + Imin) with the extrema
averaged over detected bar periods; the cutoff frequency comes from an
unweighted quadratic fit of (frequency, modulation) points, taken at
its smallest positive descending zero crossing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize

from rawscore.errors import (
    CorruptFile,
    DegenerateProfile,
    FitDiverged,
    InvalidSpec,
    NoPeak,
    NoRoot,
)

GAUSS_FWHM = 2.0 * np.sqrt(2.0 * np.log(2.0))  # 2.3548...


@dataclass(frozen=True)
class ProfileFit:
    positions: np.ndarray
    intensities: np.ndarray
    amplitude: float
    center: float
    sigma: float
    baseline: float
    sigma_err: float
    residual_rms: float

    @property
    def fwhm(self) -> float:
        return GAUSS_FWHM * self.sigma

    @property
    def fwhm_err(self) -> float:
        return GAUSS_FWHM * self.sigma_err


def _gauss(x, amplitude, center, sigma, baseline):
    return baseline + amplitude * np.exp(-((x - center) ** 2) / (2.0 * sigma**2))


def psf_fwhm(profile) -> ProfileFit:
    """Gaussian fit of a (position, intensity) bead profile."""
    pairs = np.asarray(list(profile), np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise InvalidSpec("profile must be a sequence of (pos, intensity)")
    if pairs.shape[0] < 7:
        raise InvalidSpec(
            f"need at least 7 samples to fit a peak, got {pairs.shape[0]}"
        )
    order = np.argsort(pairs[:, 0])
    x = pairs[order, 0]
    y = pairs[order, 1]
    span = y.max() - y.min()
    if span <= 1e-12 * max(1.0, abs(y.max())):
        raise NoPeak("profile is flat")

    base0 = y.min()
    amp0 = span
    w = y - base0
    c0 = float((x * w).sum() / w.sum())
    var = float((w * (x - c0) ** 2).sum() / w.sum())
    s0 = max(np.sqrt(max(var, 0.0)), np.diff(x).min() / 2.0)
    try:
        with warnings.catch_warnings():
            # zero-residual fits have no covariance; sigma_err goes inf
            warnings.simplefilter("ignore", optimize.OptimizeWarning)
            popt, pcov = optimize.curve_fit(
                _gauss, x, y, p0=(amp0, c0, s0, base0), maxfev=20000
            )
    except RuntimeError as exc:
        raise FitDiverged(f"Gaussian fit failed: {exc}") from exc
    amplitude, center, sigma, baseline = popt
    sigma = abs(float(sigma))
    if not np.all(np.isfinite(popt)):
        raise FitDiverged("fit produced non-finite parameters")
    if amplitude <= 0 or sigma <= 0:
        raise FitDiverged(
            f"fit is not a peak: amplitude {amplitude:.3g}, sigma {sigma:.3g}"
        )
    if not x[0] <= center <= x[-1]:
        raise FitDiverged(f"fitted center {center:.3g} left the profile")
    resid = _gauss(x, *popt) - y
    sigma_err = float(np.sqrt(np.abs(pcov[2, 2])))
    return ProfileFit(
        positions=x,
        intensities=y,
        amplitude=float(amplitude),
        center=float(center),
        sigma=sigma,
        baseline=float(baseline),
        sigma_err=sigma_err,
        residual_rms=float(np.sqrt(np.mean(resid**2))),
    )


def _local_extrema(vals: np.ndarray):
    """Plateau-tolerant interior maxima and minima values."""
    left = vals[1:-1] - vals[:-2]
    right = vals[1:-1] - vals[2:]
    maxima = vals[1:-1][
        (left >= 0) & (right >= 0) & ((left > 0) | (right > 0))
    ]
    minima = vals[1:-1][
        (left <= 0) & (right <= 0) & ((left < 0) | (right < 0))
    ]
    return maxima, minima


def mtf_modulation(line_profile) -> float:
    """(Imax - Imin)/(Imax + Imin), extrema averaged over bar periods."""
    vals = np.asarray(list(line_profile), np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise DegenerateProfile("need a non-empty 1D intensity profile")
    if np.any(vals < 0):
        raise DegenerateProfile("intensities must be non-negative")
    maxima, minima = _local_extrema(vals)
    if maxima.size and minima.size:
        i_max = float(maxima.mean())
        i_min = float(minima.mean())
    else:  # constant or monotone: no bar structure
        i_max = float(vals.max())
        i_min = float(vals.min())
    if i_max + i_min <= 0:
        raise DegenerateProfile("profile carries no signal")
    return (i_max - i_min) / (i_max + i_min)


def mtf_cutoff(points) -> float:
    """Smallest positive descending zero of a quadratic modulation fit."""
    pts = np.asarray(list(points), np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidSpec("points must be (frequency, modulation) pairs")
    if pts.shape[0] < 4:
        raise InvalidSpec(f"need at least 4 points, got {pts.shape[0]}")
    coeffs = np.polyfit(pts[:, 0], pts[:, 1], 2)
    poly = np.poly1d(coeffs)
    lead = np.trim_zeros(coeffs, "f")
    roots = np.roots(lead) if lead.size > 1 else np.array([])
    real = np.sort(roots[np.abs(roots.imag) < 1e-9].real)
    for r in real:
        if r > 0 and poly.deriv()(r) < 0:
            return float(r)
    raise NoRoot("modulation fit never crosses zero while descending")


def bead_corrected_fwhm(measured: float, bead: float) -> float:
    """Remove the finite bead size in Gaussian quadrature."""
    if measured <= 0 or bead < 0:
        raise InvalidSpec("FWHM values must be positive")
    if measured <= bead:
        raise InvalidSpec(
            f"measured FWHM {measured:.3g} does not exceed the bead "
            f"size {bead:.3g}"
        )
    return float(np.sqrt(measured**2 - bead**2))


# ---------------------------------------------------------------------------
# profile extraction
# ---------------------------------------------------------------------------


def line_profile(
    image: np.ndarray,
    center: tuple[float, float],
    angle_deg: float = 0.0,
    length: float | None = None,
    step: float = 1.0,
) -> np.ndarray:
    """Bilinear line cut through (y, x), as (position, intensity) rows.

    Positions are signed distances from the center along the cut.
    """
    img = np.asarray(image, np.float64)
    if img.ndim != 2:
        raise InvalidSpec(f"line profiles need a 2D image, got {img.ndim}D")
    if step <= 0:
        raise InvalidSpec("step must be positive")
    if length is None:
        length = float(min(img.shape))
    half = length / 2.0
    pos = np.arange(-half, half + step / 2.0, step)
    th = np.deg2rad(angle_deg)
    ys = center[0] + pos * np.sin(th)
    xs = center[1] + pos * np.cos(th)
    inside = (
        (ys >= 0) & (ys <= img.shape[0] - 1)
        & (xs >= 0) & (xs <= img.shape[1] - 1)
    )
    vals = ndimage.map_coordinates(
        img, np.stack([ys[inside], xs[inside]]), order=1, mode="nearest"
    )
    return np.column_stack([pos[inside], vals])


def axis_profiles(volume: np.ndarray, center: tuple[float, float, float]):
    """Three 1D cuts along z, y, x through a voxel center of a volume."""
    vol = np.asarray(volume, np.float64)
    if vol.ndim != 3:
        raise InvalidSpec(f"axis profiles need a 3D volume, got {vol.ndim}D")
    cz, cy, cx = (int(round(c)) for c in center)
    if not (
        0 <= cz < vol.shape[0]
        and 0 <= cy < vol.shape[1]
        and 0 <= cx < vol.shape[2]
    ):
        raise InvalidSpec(f"center {center} outside volume {vol.shape}")
    cuts = (vol[:, cy, cx], vol[cz, :, cx], vol[cz, cy, :])
    return tuple(
        np.column_stack([np.arange(c.size, dtype=np.float64) - ctr, c])
        for c, ctr in zip(cuts, (cz, cy, cx))
    )


# ---------------------------------------------------------------------------
# profile CSV
# ---------------------------------------------------------------------------

_CSV_HEADER = "position,intensity"


def profile_to_csv(profile: np.ndarray) -> str:
    rows = [_CSV_HEADER]
    rows.extend(
        f"{float(p)!r},{float(v)!r}" for p, v in np.asarray(profile)
    )
    return "\n".join(rows) + "\n"


def profile_from_csv(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != _CSV_HEADER:
        raise CorruptFile(f"profile CSV must start with '{_CSV_HEADER}'")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise CorruptFile(f"malformed profile row {ln!r}")
        try:
            out.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise CorruptFile(f"malformed profile row {ln!r}") from exc
    return np.asarray(out, np.float64).reshape(-1, 2)

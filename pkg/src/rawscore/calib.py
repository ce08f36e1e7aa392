"""Sensor noise calibration: the photon-transfer model sigma(d).

The calibrated model is global (one K, offset, read variance for the whole
sensor); phantom scenes have uniform pixel response, so a per-pixel offset
map is left as an extension point rather than implemented.

Fitting follows the photon-transfer method: per illumination level, pool
all frames and pixels into a sample mean and sample variance, then fit

    v = read_variance + K * (mean - offset)

by weighted least squares over the unsaturated levels. The offset cannot
be separated from the intercept by the regression alone, so it is defined
as the darkest level's mean (the dark frame). Saturation is flagged at the
first level whose variance falls below 80% of the linear prediction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from rawscore import cbrng
from rawscore.errors import (
    CorruptFile,
    DimMismatch,
    InsufficientLevels,
    InvalidSpec,
    NonPhysicalFit,
    SchemaViolation,
)
from rawscore.imgio import ImageStack

MODES = ("parametric", "empirical")
_TURNOVER_FRACTION = 0.8
CALIB_STAGE = "calib-bench"


@dataclass(frozen=True)
class NoiseModel:
    """Calibrated mapping from pixel value d (ADU) to noise sigma (ADU)."""

    K: float
    offset: float
    read_variance: float
    saturation: float
    empirical_curve: tuple[tuple[float, float], ...] = ()
    mode: str = "parametric"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise InvalidSpec(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.offset < 0:
            raise InvalidSpec(f"offset must be >= 0, got {self.offset}")
        if self.mode == "parametric":
            if not self.K > 0:
                raise InvalidSpec(f"gain K must be > 0, got {self.K}")
            if self.read_variance < 0:
                raise InvalidSpec(
                    f"read_variance must be >= 0, got {self.read_variance}"
                )
        curve = tuple((float(d), float(s)) for d, s in self.empirical_curve)
        if curve:
            ds = np.array([d for d, _ in curve])
            sigmas = np.array([s for _, s in curve])
            if np.any(np.diff(ds) <= 0):
                raise InvalidSpec("empirical_curve must be strictly increasing in d")
            if np.any(sigmas < 0):
                raise InvalidSpec("empirical_curve sigma values must be >= 0")
        elif self.mode == "empirical":
            raise InvalidSpec("empirical mode needs a non-empty empirical_curve")
        object.__setattr__(self, "empirical_curve", curve)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "K": self.K,
            "offset": self.offset,
            "read_variance": self.read_variance,
            "saturation": self.saturation,
            "empirical_curve": [[d, s] for d, s in self.empirical_curve],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NoiseModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptFile(f"noise model is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SchemaViolation("noise model must be a JSON object")
        required = {"mode", "K", "offset", "read_variance", "saturation",
                    "empirical_curve"}
        missing = required - set(doc)
        if missing:
            raise SchemaViolation(f"noise model misses fields {sorted(missing)}")
        extra = set(doc) - required
        if extra:
            raise SchemaViolation(f"noise model has unknown fields {sorted(extra)}")
        curve = doc["empirical_curve"]
        if not isinstance(curve, list) or any(
            not isinstance(p, list) or len(p) != 2 for p in curve
        ):
            raise SchemaViolation("empirical_curve must be a list of [d, sigma]")
        try:
            return cls(
                K=float(doc["K"]),
                offset=float(doc["offset"]),
                read_variance=float(doc["read_variance"]),
                saturation=float(doc["saturation"]),
                empirical_curve=tuple((float(d), float(s)) for d, s in curve),
                mode=str(doc["mode"]),
            )
        except (TypeError, ValueError) as exc:
            raise SchemaViolation(f"bad noise model values: {exc}") from exc
        except InvalidSpec as exc:
            raise SchemaViolation(str(exc)) from exc

    def content_hash(self) -> str:
        """Stable short hash used to tie compressed files to their model."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def sigma_of(model: NoiseModel, d):
    """Noise sigma at pixel value d; accepts scalars or arrays.

    Parametric: sqrt(read_variance + K * max(0, d - offset)). Empirical:
    piecewise-linear interpolation of the stored curve, clamped at both
    endpoints. Total on all real d.
    """
    arr = np.asarray(d, dtype=np.float64)
    if model.mode == "parametric":
        out = np.sqrt(
            model.read_variance + model.K * np.maximum(0.0, arr - model.offset)
        )
    else:
        ds = np.array([p[0] for p in model.empirical_curve])
        sg = np.array([p[1] for p in model.empirical_curve])
        out = np.interp(arr, ds, sg)
    if np.isscalar(d) or np.ndim(d) == 0:
        return float(out)
    return out


def sigma_table(model: NoiseModel, bit_depth: int) -> np.ndarray:
    """sigma for every representable pixel value, as a lookup table.

    The hot noise-synthesis kernels index this table instead of calling
    sigma_of per pixel, which also keeps backends numerically identical.
    """
    if bit_depth not in (8, 16):
        raise InvalidSpec(f"bit_depth must be 8 or 16, got {bit_depth}")
    return sigma_of(model, np.arange(2**bit_depth, dtype=np.float64))


# ---------------------------------------------------------------------------
# Calibration series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationLevel:
    """Frames acquired at one illumination, tagged with a photon surrogate."""

    photon_mean: float
    frames: tuple[ImageStack, ...]

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        if not frames:
            raise InvalidSpec("calibration level has no frames")
        dims = frames[0].dims
        bits = frames[0].bit_depth
        if any(f.dims != dims or f.bit_depth != bits for f in frames):
            raise DimMismatch("frames within a level differ in dims or bit depth")
        object.__setattr__(self, "frames", frames)

    def pooled(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames]).astype(np.float64)


@dataclass(frozen=True)
class CalibrationSeries:
    levels: tuple[CalibrationLevel, ...]

    def __post_init__(self) -> None:
        levels = tuple(self.levels)
        if not levels:
            raise InvalidSpec("calibration series has no levels")
        dims = levels[0].frames[0].dims
        bits = levels[0].frames[0].bit_depth
        for lv in levels:
            if lv.frames[0].dims != dims or lv.frames[0].bit_depth != bits:
                raise DimMismatch("levels differ in dims or bit depth")
        object.__setattr__(self, "levels", levels)

    @property
    def bit_depth(self) -> int:
        return self.levels[0].frames[0].bit_depth


def simulate_calibration_bench(
    model_true: NoiseModel,
    dims: tuple[int, ...],
    n_levels: int,
    n_frames: int,
    seed: int,
) -> CalibrationSeries:
    """Simulate the calibration acquisition: square-law spaced levels.

    Level means run from the model offset (dark) to its saturation with
    square-law spacing; every frame is drawn per pixel from a normal at
    the level mean with the model's sigma, rounded and clamped to the ADU
    range. Fully deterministic in the seed.
    """
    if n_levels < 8:
        raise InvalidSpec(f"need n_levels >= 8, got {n_levels}")
    if n_frames < 2:
        raise InvalidSpec(f"need n_frames >= 2, got {n_frames}")
    if len(dims) == 2:
        w, h, depth = dims[0], dims[1], 1
    elif len(dims) == 3:
        w, h, depth = dims
    else:
        raise InvalidSpec(f"dims must be (w, h) or (w, h, d), got {dims}")
    if min(w, h, depth) < 1:
        raise InvalidSpec(f"dims must be positive, got {dims}")
    bit_depth = 16
    top = 2**bit_depth - 1
    if not (0 <= model_true.offset <= model_true.saturation <= top):
        raise InvalidSpec(
            "model offset/saturation must satisfy "
            f"0 <= {model_true.offset} <= {model_true.saturation} <= {top}"
        )

    base = cbrng.derive_seed(seed, CALIB_STAGE)
    n_px = w * h * depth
    span = model_true.saturation - model_true.offset
    levels = []
    for lv in range(n_levels):
        frac = (lv / (n_levels - 1)) ** 2
        mean = model_true.offset + span * frac
        sg = sigma_of(model_true, mean)
        key = cbrng.stream_key(base, lv)
        z = cbrng.normals(key, np.arange(n_frames * n_px, dtype=np.uint64))
        samples = np.rint(mean + sg * z)
        samples = np.clip(samples, 0, top).astype(np.uint16)
        frames = tuple(
            ImageStack(samples[f * n_px : (f + 1) * n_px].reshape(depth, h, w))
            for f in range(n_frames)
        )
        levels.append(CalibrationLevel(photon_mean=mean - model_true.offset,
                                       frames=frames))
    return CalibrationSeries(tuple(levels))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def level_statistics(series: CalibrationSeries):
    """Pooled (mean, sample variance, sample count) per level, sorted by mean."""
    stats = []
    for lv in series.levels:
        data = lv.pooled().ravel()
        stats.append((data.mean(), data.var(ddof=1), data.size))
    stats.sort(key=lambda t: t[0])
    means = np.array([s[0] for s in stats])
    variances = np.array([s[1] for s in stats])
    counts = np.array([s[2] for s in stats])
    return means, variances, counts


def fit_variance_line(means, variances, counts):
    """Weighted least squares of v = a + b*mean on exact per-level pairs.

    Weights are the inverse large-sample variance of a sample variance,
    (n - 1) / (2 v^2). Returns (slope b, intercept a).
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if means.size < 2:
        raise InsufficientLevels(f"need >= 2 levels to fit a line, got {means.size}")
    v_safe = np.maximum(variances, 1e-12)
    w = (counts - 1.0) / (2.0 * v_safe**2)
    b, a = np.polyfit(means, variances, 1, w=np.sqrt(w))
    return float(b), float(a)


def fit_noise_model(series: CalibrationSeries) -> NoiseModel:
    """Fit the photon-transfer line over the unsaturated levels.

    Raises InsufficientLevels when fewer than 8 usable (distinct,
    unsaturated) levels remain and NonPhysicalFit when the fitted gain is
    not positive.
    """
    means, variances, counts = level_statistics(series)

    # merge levels whose means coincide (they are the same illumination)
    keep_m, keep_v, keep_n = [], [], []
    for m, v, n in zip(means, variances, counts):
        if keep_m and np.isclose(m, keep_m[-1], rtol=0, atol=1e-9):
            # pooled merge of two equal-mean levels
            n0 = keep_n[-1]
            keep_v[-1] = ((n0 - 1) * keep_v[-1] + (n - 1) * v) / (n0 + n - 2)
            keep_n[-1] = n0 + n
        else:
            keep_m.append(m)
            keep_v.append(v)
            keep_n.append(n)
    means = np.array(keep_m)
    variances = np.array(keep_v)
    counts = np.array(keep_n)

    if means.size < 8:
        raise InsufficientLevels(
            f"need >= 8 distinct illumination levels, got {means.size}"
        )

    offset = float(means[0])

    # provisional line from the lower half locates the saturation turnover
    half = max(2, means.size // 2)
    b0, a0 = fit_variance_line(means[:half], variances[:half], counts[:half])
    predicted = a0 + b0 * means
    turnover = None
    for j in range(means.size):
        if predicted[j] > 0 and variances[j] < _TURNOVER_FRACTION * predicted[j]:
            turnover = j
            break
    usable = slice(0, turnover) if turnover is not None else slice(None)
    m_u, v_u, n_u = means[usable], variances[usable], counts[usable]
    if m_u.size < 8:
        raise InsufficientLevels(
            f"only {m_u.size} unsaturated levels (saturation reached too early)"
        )

    K, intercept = fit_variance_line(m_u, v_u, n_u)
    if not K > 0:
        raise NonPhysicalFit(f"fitted gain K = {K:.4g} is not positive")
    read_variance = intercept + K * offset
    if read_variance < 0:
        # tiny negative intercepts happen on noisy benches; clamp, the
        # model stays usable because shot noise dominates everywhere else
        read_variance = 0.0

    saturation = float(means[turnover]) if turnover is not None else float(means[-1])
    curve = tuple((float(m), float(np.sqrt(v))) for m, v in zip(means, variances))
    return NoiseModel(
        K=K,
        offset=offset,
        read_variance=read_variance,
        saturation=saturation,
        empirical_curve=curve,
        mode="parametric",
    )

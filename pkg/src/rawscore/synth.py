"""Monte-Carlo synthesis of statistically raw-equivalent images.

Each replicate replaces every pixel value d with a draw from
Normal(d, sigma(d)), rounded half-to-even and clamped to the ADU range.
The observed value stands in for the unknown true mean (single-shot
plug-in); the bias this introduces is second order in sigma/d.

Randomness is counter-based and keyed by (seed, replicate, flat pixel
index), so the replicate set is bit-identical no matter how the work is
chunked or how many threads run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rawscore import backend, cbrng
from rawscore.calib import NoiseModel, sigma_table
from rawscore.errors import (
    DimMismatch,
    InvalidSpec,
    ModelMismatch,
    TooFewReplicates,
    WrongBitDepth,
)
from rawscore.imgio import ImageStack


@dataclass(frozen=True)
class SynthSpec:
    n_replicates: int = 10
    seed: int = 0
    clamp: bool = True

    def __post_init__(self) -> None:
        if self.n_replicates < 2:
            raise InvalidSpec(
                f"need n_replicates >= 2, got {self.n_replicates}"
            )


def _replicate_numpy(d, lut, key, top, out):
    """Numpy twin of the compiled replicate kernel; returns clip count."""
    z = cbrng.normals(key, np.arange(d.size, dtype=np.uint64))
    vals = np.rint(d.astype(np.float64) + lut[d] * z)
    viol = int(np.count_nonzero((vals < 0.0) | (vals > top)))
    np.clip(vals, 0.0, top, out=vals)
    out[:] = vals.astype(np.uint16)
    return viol


def generate_raw_equivalents(
    raw: ImageStack, model: NoiseModel, spec: SynthSpec
) -> list[ImageStack]:
    """Replicate set for one raw stack under a calibrated noise model.

    With clamp enabled (the default), out-of-range draws are clipped to
    the representable ADU range; with clamp disabled any out-of-range
    draw raises instead, which makes clipping loud for scenes that are
    supposed to sit far from the rails.
    """
    if model.saturation < int(raw.data.max()):
        raise ModelMismatch(
            f"model saturation {model.saturation:.0f} is below the image "
            f"maximum {int(raw.data.max())}; the model does not cover this image"
        )
    lut = sigma_table(model, raw.bit_depth)
    d_flat = raw.data.ravel()
    top = float(raw.max_value)
    impl = backend.select(_replicate_numpy, "synth_replicate")
    replicates = []
    buf = np.empty(d_flat.size, np.uint16)
    for r in range(spec.n_replicates):
        key = cbrng.stream_key(spec.seed, r)
        viol = impl(d_flat, lut, key, top, buf)
        if viol and not spec.clamp:
            raise WrongBitDepth(
                f"replicate {r}: {viol} samples fell outside the "
                f"{raw.bit_depth}-bit range with clamping disabled"
            )
        data = buf.reshape(raw.data.shape)
        if raw.bit_depth == 8:
            data = data.astype(np.uint8)
        else:
            data = data.copy()
        replicates.append(raw.with_data(data))
    return replicates


def relative_error_map(replicates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (sample mean, sample std, relative error) over replicates.

    The std uses the n-1 denominator; relative error is std/mean with 0
    where the mean is 0.
    """
    replicates = list(replicates)
    if len(replicates) < 2:
        raise TooFewReplicates(
            f"need >= 2 replicates, got {len(replicates)}"
        )
    shape = replicates[0].data.shape
    if any(r.data.shape != shape for r in replicates):
        raise DimMismatch("replicates differ in dims")
    samples = np.stack([r.data for r in replicates]).astype(np.float64)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1)
    with np.errstate(invalid="ignore"):
        re = np.where(mean != 0.0, std / mean, 0.0)
    return mean, std, re

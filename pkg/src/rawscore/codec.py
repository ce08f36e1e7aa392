"""Data-reduction codecs and the per-pixel artifact map.

Three reduction paths share the CodecResult interface:

  * bit8 — 16-to-8 bit conversion, v -> rint(v*255/65535); the 8-to-16
    upsample v*257 makes downsample(upsample(y)) == y exact.
  * jpeg — baseline 8-bit grayscale per slice (via Pillow); the stack is
    taken through the bit8 conversion, encoded, and upsampled back, with
    the ratio charged against the original 16-bit byte count.
  * noisenorm — lossless coding of a noise-normalized plane. Stage 1
    stabilizes variance with t(d) = (2/K)*sqrt(K*(d - d0) + rv) so noise
    std is about 1 t-unit everywhere, then quantizes with step q using
    subtractive dither keyed by (seed, pixel index). Stage 2 packs the
    integer plane with a left/up predictor plus zlib. Stage 3 inverts
    exactly; all loss lives in stage 1 and is measured, not assumed.

Container for noisenorm: magic "NNC1", little-endian u32 header length,
JSON header (dims, bit depth, voxel size, model hash, q, seed, entropy
backend, residual dtype), then the compressed payload.

Below the model offset the transform continues linearly with the C1 slope
1/sqrt(rv), so undershooting pixels stay invertible; a model with zero
read variance cannot represent them and is rejected as not covering the
image range.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from rawscore import backend, cbrng
from rawscore.calib import NoiseModel, sigma_of
from rawscore.errors import (
    CorruptFile,
    DimMismatch,
    EncodeFailure,
    InvalidSpec,
    ModelMismatch,
    WrongBitDepth,
)
from rawscore.imgio import ImageStack

_MAGIC = b"NNC1"
_HEADER_KEYS = (
    "dims", "bit_depth", "voxel_size", "model_hash", "q", "seed",
    "entropy", "residual_dtype",
)


@dataclass(frozen=True)
class CodecResult:
    decoded: ImageStack
    encoded_bytes: int
    compression_ratio: float
    codec_id: str


@dataclass(frozen=True)
class ArtifactMap:
    values: np.ndarray  # (depth, h, w) float64, (raw - decoded)/sigma(raw)
    mean: float
    std: float
    max_abs: float


# ---------------------------------------------------------------------------
# bit depth conversion
# ---------------------------------------------------------------------------


def downsample_16_to_8(stack: ImageStack) -> CodecResult:
    if stack.bit_depth != 16:
        raise WrongBitDepth(f"expected 16-bit input, got {stack.bit_depth}")
    v8 = np.rint(stack.astype_float() * 255.0 / 65535.0).astype(np.uint8)
    out = ImageStack(v8, bit_depth=8, voxel_size=stack.voxel_size)
    return CodecResult(
        decoded=out,
        encoded_bytes=int(v8.size),
        compression_ratio=2.0,
        codec_id="bit8",
    )


def upsample_8_to_16(stack: ImageStack) -> ImageStack:
    if stack.bit_depth != 8:
        raise WrongBitDepth(f"expected 8-bit input, got {stack.bit_depth}")
    v16 = stack.data.astype(np.uint16) * np.uint16(257)
    return ImageStack(v16, bit_depth=16, voxel_size=stack.voxel_size)


# ---------------------------------------------------------------------------
# jpeg
# ---------------------------------------------------------------------------


def _jpeg_slice(plane8: np.ndarray, quality: int) -> bytes:
    buf = io.BytesIO()
    try:
        Image.fromarray(plane8, mode="L").save(
            buf, format="JPEG", quality=quality
        )
    except (OSError, ValueError) as exc:
        raise EncodeFailure(f"jpeg encode failed: {exc}") from exc
    return buf.getvalue()


def jpeg_roundtrip(stack: ImageStack, quality: int) -> CodecResult:
    """Baseline JPEG per slice; lossy stage runs in the 8-bit domain."""
    if not 1 <= int(quality) <= 100:
        raise InvalidSpec(f"jpeg quality must be in 1..100, got {quality}")
    quality = int(quality)
    r8 = downsample_16_to_8(stack).decoded
    total = 0
    planes = []
    for z in range(r8.depth):
        blob = _jpeg_slice(r8.plane(z), quality)
        total += len(blob)
        try:
            planes.append(np.asarray(Image.open(io.BytesIO(blob)), np.uint8))
        except OSError as exc:
            raise EncodeFailure(f"jpeg decode failed: {exc}") from exc
    dec8 = ImageStack(
        np.stack(planes), bit_depth=8, voxel_size=stack.voxel_size
    )
    decoded = upsample_8_to_16(dec8)
    raw_bytes = stack.data.size * 2
    return CodecResult(
        decoded=decoded,
        encoded_bytes=total,
        compression_ratio=raw_bytes / total,
        codec_id=f"jpeg({quality})",
    )


def find_jpeg_quality(stack: ImageStack, target_ratio: float) -> int:
    """Quality in 1..95 whose achieved ratio is nearest the target."""
    if target_ratio <= 0:
        raise InvalidSpec(f"target ratio must be > 0, got {target_ratio}")
    cache: dict[int, float] = {}

    def ratio(q: int) -> float:
        if q not in cache:
            cache[q] = jpeg_roundtrip(stack, q).compression_ratio
        return cache[q]

    lo, hi = 1, 95
    while lo < hi:  # ratio is non-increasing in quality
        mid = (lo + hi) // 2
        if ratio(mid) >= target_ratio:
            lo = mid + 1
        else:
            hi = mid
    candidates = {max(1, lo - 1), lo, min(95, lo + 1)}
    return min(candidates, key=lambda q: (abs(ratio(q) - target_ratio), q))


# ---------------------------------------------------------------------------
# noisenorm stage 1: variance-stabilizing transform + dithered quantization
# ---------------------------------------------------------------------------


def _vst_params(model: NoiseModel):
    if model.mode != "parametric":
        raise ModelMismatch("noisenorm requires a parametric noise model")
    return model.K, model.offset, model.read_variance


def _vst_forward(d: np.ndarray, model: NoiseModel) -> np.ndarray:
    gain, d0, rv = _vst_params(model)
    below = d < d0
    if rv <= 0.0:
        if bool(np.any(below)):
            raise ModelMismatch(
                "model has zero read variance but the image has samples "
                "below the offset"
            )
        return (2.0 / gain) * np.sqrt(gain * (d - d0))
    s0 = np.sqrt(rv)
    t0 = 2.0 * s0 / gain
    arg = np.maximum(gain * (d - d0) + rv, 0.0)
    return np.where(below, t0 + (d - d0) / s0, (2.0 / gain) * np.sqrt(arg))


def _vst_inverse(t: np.ndarray, model: NoiseModel) -> np.ndarray:
    gain, d0, rv = _vst_params(model)
    s0 = np.sqrt(rv)
    t0 = 2.0 * s0 / gain
    parab = d0 + ((gain * t / 2.0) ** 2 - rv) / gain
    if rv <= 0.0:
        return parab
    return np.where(t >= t0, parab, d0 + (t - t0) * s0)


def _dither_numpy(key, counters, out):
    out[:] = cbrng.uniforms(key, counters)


def _dither(shape: tuple, q: float, seed: int) -> np.ndarray:
    key = cbrng.stream_key(seed, cbrng.DITHER_STREAM)
    n = int(np.prod(shape))
    counters = np.arange(n, dtype=np.uint64)
    out = np.empty(n, np.float64)
    fill = backend.select(_dither_numpy, "fill_uniforms")
    fill(key, counters, out)
    return ((out - 0.5) * q).reshape(shape)


def prepare(
    stack: ImageStack, model: NoiseModel, q: float = 1.0, seed: int = 0
) -> np.ndarray:
    """Quantized noise-normalized plane (int32), the lossy stage output."""
    if q <= 0:
        raise InvalidSpec(f"quantization step must be > 0, got {q}")
    t = _vst_forward(stack.astype_float(), model)
    u = _dither(t.shape, q, seed)
    return np.rint((t - u) / q).astype(np.int32)


def unprepare(
    plane: np.ndarray,
    model: NoiseModel,
    q: float,
    seed: int,
    bit_depth: int = 16,
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> ImageStack:
    """Invert `prepare`: de-quantize with the same dither, undo the VST."""
    u = _dither(plane.shape, q, seed)
    t = plane.astype(np.float64) * q + u
    d = np.rint(_vst_inverse(t, model))
    d = np.clip(d, 0, 2**bit_depth - 1)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    return ImageStack(
        d.astype(dtype), bit_depth=bit_depth, voxel_size=voxel_size
    )


# ---------------------------------------------------------------------------
# noisenorm stages 2-3: predictor + entropy coding, with container
# ---------------------------------------------------------------------------


def _predict_residuals(k: np.ndarray) -> np.ndarray:
    r = k.copy()
    r[:, :, 1:] -= k[:, :, :-1]
    r[:, 1:, 0] -= k[:, :-1, 0]
    return r


def _unpredict_residuals(r: np.ndarray) -> np.ndarray:
    k = r.copy()
    k[:, :, 0] = np.cumsum(r[:, :, 0], axis=1)
    return np.cumsum(k, axis=2, dtype=np.int32)


def noisenorm_encode(
    stack: ImageStack, model: NoiseModel, seed: int = 0, q: float = 1.0
) -> bytes:
    if stack.bit_depth != 16:
        raise WrongBitDepth(f"expected 16-bit input, got {stack.bit_depth}")
    if model.saturation < int(stack.data.max()):
        raise ModelMismatch(
            f"model saturation {model.saturation} below image max "
            f"{int(stack.data.max())}"
        )
    k = prepare(stack, model, q=q, seed=seed)
    r = _predict_residuals(k)
    zz = ((r << 1) ^ (r >> 31)).view(np.uint32)
    residual_dtype = "<u2" if zz.max(initial=0) < 2**16 else "<u4"
    try:
        payload = zlib.compress(zz.astype(residual_dtype).tobytes(), 9)
    except zlib.error as exc:
        raise EncodeFailure(f"entropy backend failed: {exc}") from exc
    header = json.dumps(
        {
            "dims": list(stack.dims),
            "bit_depth": stack.bit_depth,
            "voxel_size": list(stack.voxel_size),
            "model_hash": model.content_hash(),
            "q": q,
            "seed": seed,
            "entropy": "zlib",
            "residual_dtype": residual_dtype,
        },
        sort_keys=True,
    ).encode()
    return _MAGIC + len(header).to_bytes(4, "little") + header + payload


def noisenorm_decode(blob: bytes, model: NoiseModel) -> ImageStack:
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise CorruptFile("not a noisenorm container (bad magic)")
    hlen = int.from_bytes(blob[4:8], "little")
    if 8 + hlen > len(blob):
        raise CorruptFile("truncated container header")
    try:
        header = json.loads(blob[8 : 8 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable container header: {exc}") from exc
    if not isinstance(header, dict) or any(
        key not in header for key in _HEADER_KEYS
    ):
        raise CorruptFile("container header missing required fields")
    if header["entropy"] != "zlib":
        raise CorruptFile(
            f"unknown entropy backend {header['entropy']!r}"
        )
    if header["model_hash"] != model.content_hash():
        raise ModelMismatch(
            "container was encoded under a different noise model"
        )
    try:
        raw = zlib.decompress(blob[8 + hlen :])
    except zlib.error as exc:
        raise CorruptFile(f"payload does not decompress: {exc}") from exc
    w, h, depth = header["dims"]
    zz = np.frombuffer(raw, dtype=header["residual_dtype"])
    if zz.size != w * h * depth:
        raise CorruptFile(
            f"payload holds {zz.size} samples, header promises {w * h * depth}"
        )
    zz = zz.astype(np.int64)
    r = ((zz >> 1) ^ -(zz & 1)).astype(np.int32).reshape(depth, h, w)
    k = _unpredict_residuals(r)
    return unprepare(
        k,
        model,
        q=float(header["q"]),
        seed=int(header["seed"]),
        bit_depth=int(header["bit_depth"]),
        voxel_size=tuple(header["voxel_size"]),
    )


def noisenorm_roundtrip(
    stack: ImageStack, model: NoiseModel, seed: int = 0, q: float = 1.0
) -> CodecResult:
    blob = noisenorm_encode(stack, model, seed=seed, q=q)
    decoded = noisenorm_decode(blob, model)
    raw_bytes = stack.data.size * 2
    return CodecResult(
        decoded=decoded,
        encoded_bytes=len(blob),
        compression_ratio=raw_bytes / len(blob),
        codec_id="noisenorm",
    )


# ---------------------------------------------------------------------------
# artifact map
# ---------------------------------------------------------------------------


def artifact_map(
    raw: ImageStack, decoded: ImageStack, model: NoiseModel
) -> ArtifactMap:
    """Per-pixel (raw - decoded)/sigma(raw) with summary statistics."""
    if raw.data.shape != decoded.data.shape:
        raise DimMismatch(
            f"dims differ: {raw.data.shape} vs {decoded.data.shape}"
        )
    rawf = raw.astype_float()
    delta = rawf - decoded.astype_float()
    sigma = sigma_of(model, rawf)
    values = np.divide(
        delta, sigma, out=np.zeros_like(delta), where=sigma > 0
    )
    return ArtifactMap(
        values=values,
        mean=float(values.mean()),
        std=float(values.std()),
        max_abs=float(np.abs(values).max()),
    )

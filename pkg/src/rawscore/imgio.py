"""Image stack I/O and deterministic synthetic phantoms.

Stacks travel as immutable unsigned-integer arrays with bit-depth and
voxel-size metadata. File format is deliberately narrow: uncompressed
grayscale striped little-endian TIFF, 8 or 16 bit, one strip per page.
Anything else (color, float, compressed, big-endian, tiled) is rejected
loudly rather than half-read.

Phantom scenes are noiseless: edges are anti-aliased by 4x4 subpixel
area-coverage sampling so boundary pixels carry graded intensities, and
sensor noise is applied later by the synthesis stage. Ground truth is a
separate int32 label map, never embedded in pixel data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from rawscore import cbrng
from rawscore.errors import (
    CorruptFile,
    DimMismatch,
    InvalidSpec,
    IoFailure,
    UnsupportedFormat,
    WrongBitDepth,
)

PHANTOM_STREAM = 0x9A17


def _frozen_view(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class ImageStack:
    """Immutable 2D image or 3D stack of unsigned-integer samples.

    `data` is stored (depth, height, width); 2D input is promoted to a
    single-slice stack. The array is frozen after construction so stacks
    can be shared across workers without copies.
    """

    data: np.ndarray
    bit_depth: int = 16
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.bit_depth not in (8, 16):
            raise WrongBitDepth(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[np.newaxis, :, :]
        if arr.ndim != 3 or arr.size == 0:
            raise DimMismatch(f"need a 2D image or 3D stack, got shape {arr.shape}")
        want = np.uint8 if self.bit_depth == 8 else np.uint16
        if arr.dtype != want:
            if not np.issubdtype(arr.dtype, np.integer):
                raise WrongBitDepth(f"samples must be integers, got {arr.dtype}")
            if arr.size and (arr.min() < 0 or arr.max() > 2**self.bit_depth - 1):
                raise WrongBitDepth(
                    f"samples exceed {self.bit_depth}-bit range "
                    f"[{arr.min()}, {arr.max()}]"
                )
            arr = arr.astype(want)
        arr = np.ascontiguousarray(arr)
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or any(v <= 0 for v in vs):
            raise InvalidSpec(f"voxel_size components must be > 0, got {vs}")
        object.__setattr__(self, "data", _frozen_view(arr))
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(width, height, depth)"""
        d, h, w = self.data.shape
        return (w, h, d)

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def max_value(self) -> int:
        return 2**self.bit_depth - 1

    def plane(self, i: int) -> np.ndarray:
        return self.data[i]

    def astype_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def with_data(self, data: np.ndarray) -> "ImageStack":
        """New stack with the same metadata and different samples."""
        return ImageStack(data, bit_depth=self.bit_depth, voxel_size=self.voxel_size)


# ---------------------------------------------------------------------------
# TIFF I/O
# ---------------------------------------------------------------------------

_TYPE_SIZE = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8}  # BYTE ASCII SHORT LONG RATIONAL
_DESC_PREFIX = "voxel_size_um="


def _pack_entries(entries: list[tuple[int, int, int, int]]) -> bytes:
    out = [struct.pack("<H", len(entries))]
    for tag, typ, count, value in sorted(entries):
        out.append(struct.pack("<HHI", tag, typ, count) + struct.pack("<I", value))
    return b"".join(out)


def write_stack(stack: ImageStack, path) -> None:
    """Write an uncompressed grayscale striped TIFF, one page per slice."""
    w, h, depth = stack.dims
    bps = stack.bit_depth
    dtype = "<u1" if bps == 8 else "<u2"
    page_bytes = w * h * (bps // 8)

    desc = (
        _DESC_PREFIX
        + ",".join(repr(v) for v in stack.voxel_size)
        + "\x00"
    ).encode("ascii")

    # layout: header | page data ... | description | IFD chain
    data_start = 8
    desc_off = data_start + page_bytes * depth
    ifd_start = desc_off + len(desc)
    if ifd_start % 2:
        ifd_start += 1
    # page 0 carries the description entry, later pages do not
    ifd_sizes = [2 + 12 * (10 if p == 0 else 9) + 4 for p in range(depth)]
    ifd_offs = np.concatenate([[ifd_start], ifd_start + np.cumsum(ifd_sizes)])

    chunks = [b"II" + struct.pack("<HI", 42, int(ifd_offs[0]))]
    for z in range(depth):
        chunks.append(stack.data[z].astype(dtype).tobytes())
    chunks.append(desc)
    if desc_off + len(desc) < ifd_start:
        chunks.append(b"\x00")
    for z in range(depth):
        entries = [
            (256, 4, 1, w),
            (257, 4, 1, h),
            (258, 3, 1, bps),
            (259, 3, 1, 1),  # uncompressed
            (262, 3, 1, 1),  # min-is-black
            (273, 4, 1, data_start + z * page_bytes),
            (277, 3, 1, 1),
            (278, 4, 1, h),
            (279, 4, 1, page_bytes),
        ]
        if z == 0:
            entries.append((270, 2, len(desc), desc_off))
        nxt = int(ifd_offs[z + 1]) if z + 1 < depth else 0
        chunks.append(_pack_entries(entries) + struct.pack("<I", nxt))
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _entry_values(buf: bytes, typ: int, count: int, value_field: bytes):
    size = _TYPE_SIZE.get(typ)
    if size is None:
        return None  # unknown type: caller skips the tag
    total = size * count
    if total <= 4:
        raw = value_field[:total]
    else:
        (off,) = struct.unpack("<I", value_field)
        raw = buf[off : off + total]
        if len(raw) < total:
            raise CorruptFile("tag value runs past end of file")
    if typ == 2:
        return raw
    fmt = {1: "B", 3: "H", 4: "I", 5: "II"}[typ]
    vals = struct.unpack("<" + fmt * count, raw)
    return list(vals)


def _parse_ifd(buf: bytes, off: int):
    if off + 2 > len(buf):
        raise CorruptFile("IFD offset past end of file")
    (n_entries,) = struct.unpack_from("<H", buf, off)
    tags = {}
    pos = off + 2
    if pos + 12 * n_entries + 4 > len(buf):
        raise CorruptFile("truncated IFD")
    for _ in range(n_entries):
        tag, typ, count = struct.unpack_from("<HHI", buf, pos)
        vals = _entry_values(buf, typ, count, buf[pos + 8 : pos + 12])
        if vals is not None:
            tags[tag] = vals
        pos += 12
    (nxt,) = struct.unpack_from("<I", buf, pos)
    return tags, nxt


def _page_from_tags(buf: bytes, tags: dict) -> tuple[np.ndarray, int, bytes]:
    try:
        w = int(tags[256][0])
        h = int(tags[257][0])
        offsets = tags[273]
        counts = tags[279]
    except KeyError as exc:
        raise CorruptFile(f"missing required TIFF tag {exc}") from exc
    bps = int(tags.get(258, [1])[0])
    if int(tags.get(259, [1])[0]) != 1:
        raise UnsupportedFormat("compressed TIFF variants are not supported")
    if int(tags.get(262, [1])[0]) != 1:
        raise UnsupportedFormat("only min-is-black grayscale is supported")
    if int(tags.get(277, [1])[0]) != 1:
        raise UnsupportedFormat("color (multi-sample) TIFF is not supported")
    if int(tags.get(339, [1])[0]) != 1:
        raise UnsupportedFormat("only unsigned-integer samples are supported")
    if int(tags.get(284, [1])[0]) != 1:
        raise UnsupportedFormat("planar configuration 2 is not supported")
    if bps not in (8, 16):
        raise UnsupportedFormat(f"BitsPerSample {bps} is not supported (8/16 only)")
    if w < 1 or h < 1:
        raise CorruptFile("non-positive page dimensions")
    raw = b"".join(buf[o : o + c] for o, c in zip(offsets, counts))
    need = w * h * (bps // 8)
    if len(raw) < need:
        raise CorruptFile("pixel data shorter than ImageWidth*ImageLength")
    arr = np.frombuffer(raw[:need], dtype="<u1" if bps == 8 else "<u2")
    desc = tags.get(270, b"")
    return arr.reshape(h, w), bps, bytes(desc)


def _parse_voxel(desc: bytes) -> tuple[float, float, float]:
    try:
        text = desc.split(b"\x00", 1)[0].decode("ascii")
    except UnicodeDecodeError:
        return (1.0, 1.0, 1.0)
    if not text.startswith(_DESC_PREFIX):
        return (1.0, 1.0, 1.0)
    try:
        x, y, z = (float(v) for v in text[len(_DESC_PREFIX) :].split(","))
        if min(x, y, z) > 0:
            return (x, y, z)
    except ValueError:
        pass
    return (1.0, 1.0, 1.0)


def read_stack(path) -> ImageStack:
    """Read a grayscale striped TIFF written by `write_stack` (or compatible)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(buf) < 8:
        raise CorruptFile("file shorter than a TIFF header")
    if buf[:2] == b"MM":
        raise UnsupportedFormat("big-endian TIFF is not supported")
    if buf[:2] != b"II" or struct.unpack_from("<H", buf, 2)[0] != 42:
        raise CorruptFile("not a TIFF file")
    (off,) = struct.unpack_from("<I", buf, 4)

    planes: list[np.ndarray] = []
    bit_depth = None
    voxel = (1.0, 1.0, 1.0)
    seen = set()
    try:
        while off:
            if off in seen:
                raise CorruptFile("circular IFD chain")
            seen.add(off)
            tags, off = _parse_ifd(buf, off)
            plane, bps, desc = _page_from_tags(buf, tags)
            if bit_depth is None:
                bit_depth = bps
                voxel = _parse_voxel(desc)
            elif bps != bit_depth or plane.shape != planes[0].shape:
                raise UnsupportedFormat("pages differ in size or bit depth")
            planes.append(plane)
    except struct.error as exc:
        raise CorruptFile(f"malformed TIFF structure: {exc}") from exc
    if not planes:
        raise CorruptFile("TIFF contains no pages")
    return ImageStack(np.stack(planes), bit_depth=bit_depth, voxel_size=voxel)


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

PHANTOM_KINDS = ("disks2d", "blobs2d", "spheres3d", "shepp_logan2d", "flatfield")

# ellipses of the head phantom: (a, b, x0, y0, angle deg, density)
SHEPP_LOGAN_ELLIPSES = (
    (0.69, 0.92, 0.0, 0.0, 0.0, 2.0),
    (0.6624, 0.874, 0.0, -0.0184, 0.0, -0.98),
    (0.11, 0.31, 0.22, 0.0, -18.0, -0.02),
    (0.16, 0.41, -0.22, 0.0, 18.0, -0.02),
    (0.21, 0.25, 0.0, 0.35, 0.0, 0.01),
    (0.046, 0.046, 0.0, 0.1, 0.0, 0.01),
    (0.046, 0.046, 0.0, -0.1, 0.0, 0.01),
    (0.046, 0.023, -0.08, -0.605, 0.0, 0.01),
    (0.023, 0.023, 0.0, -0.606, 0.0, 0.01),
    (0.023, 0.046, 0.06, -0.605, 0.0, 0.01),
)

_AA = 4  # subpixel grid per axis for area-coverage sampling


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry recipe for a deterministic noiseless test scene."""

    kind: str
    width: int
    height: int
    depth: int = 1
    bit_depth: int = 16
    background: int = 100
    intensity: int = 10000
    n_objects: int = 0
    radius_min: float = 5.0
    radius_max: float = 10.0
    non_overlapping: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in PHANTOM_KINDS:
            raise InvalidSpec(f"unknown phantom kind {self.kind!r}")
        if self.bit_depth not in (8, 16):
            raise WrongBitDepth(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if min(self.width, self.height, self.depth) < 1:
            raise InvalidSpec("dims must be positive")
        top = 2**self.bit_depth - 1
        if not (0 <= self.background <= top and 0 <= self.intensity <= top):
            raise InvalidSpec(f"levels must lie in [0, {top}]")
        if self.kind in ("disks2d", "blobs2d", "shepp_logan2d") and self.depth != 1:
            raise InvalidSpec(f"{self.kind} requires depth == 1")
        if self.kind == "spheres3d" and self.depth < 2:
            raise InvalidSpec("spheres3d requires depth >= 2")
        if self.kind in ("disks2d", "blobs2d", "spheres3d"):
            if self.n_objects < 1:
                raise InvalidSpec(f"{self.kind} needs n_objects >= 1")
            if not (0 < self.radius_min <= self.radius_max):
                raise InvalidSpec("need 0 < radius_min <= radius_max")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"phantom spec is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidSpec("phantom spec must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise InvalidSpec(f"unknown phantom spec fields {sorted(extra)}")
        if "kind" not in doc:
            raise InvalidSpec("phantom spec needs a 'kind'")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InvalidSpec(f"bad phantom spec: {exc}") from exc


class _Draw:
    """Sequential uniform draws from one counter-based stream."""

    def __init__(self, seed: int):
        self.key = cbrng.stream_key(seed, PHANTOM_STREAM)
        self.pos = 0

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = cbrng.uniforms(self.key, np.arange(self.pos, self.pos + n, dtype=np.uint64))
        self.pos += n
        return lo + (hi - lo) * u


def _subpixel_offsets() -> np.ndarray:
    return (np.arange(_AA) + 0.5) / _AA


def _ellipse_coverage(h: int, w: int, cx, cy, a, b, theta) -> tuple[np.ndarray, tuple]:
    """Fractional pixel coverage of a rotated ellipse, on its bounding box."""
    r = max(a, b)
    x0 = max(0, int(np.floor(cx - r - 1)))
    x1 = min(w, int(np.ceil(cx + r + 1)) + 1)
    y0 = max(0, int(np.floor(cy - r - 1)))
    y1 = min(h, int(np.ceil(cy + r + 1)) + 1)
    off = _subpixel_offsets()
    xs = (np.arange(x0, x1)[:, None] + off[None, :]).ravel() - cx
    ys = (np.arange(y0, y1)[:, None] + off[None, :]).ravel() - cy
    ct, st = np.cos(theta), np.sin(theta)
    X = xs[None, :]
    Y = ys[:, None]
    u = X * ct + Y * st
    v = -X * st + Y * ct
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    cov = inside.reshape(y1 - y0, _AA, x1 - x0, _AA).mean(axis=(1, 3))
    return cov, (y0, y1, x0, x1)


def _sphere_coverage(shape, cx, cy, cz, r):
    d, h, w = shape
    x0 = max(0, int(np.floor(cx - r - 1)))
    x1 = min(w, int(np.ceil(cx + r + 1)) + 1)
    y0 = max(0, int(np.floor(cy - r - 1)))
    y1 = min(h, int(np.ceil(cy + r + 1)) + 1)
    z0 = max(0, int(np.floor(cz - r - 1)))
    z1 = min(d, int(np.ceil(cz + r + 1)) + 1)
    off = _subpixel_offsets()
    xs = (np.arange(x0, x1)[:, None] + off[None, :]).ravel() - cx
    ys = (np.arange(y0, y1)[:, None] + off[None, :]).ravel() - cy
    zs = (np.arange(z0, z1)[:, None] + off[None, :]).ravel() - cz
    inside = (
        zs[:, None, None] ** 2 + ys[None, :, None] ** 2 + xs[None, None, :] ** 2
        <= r * r
    )
    nz, ny, nx = z1 - z0, y1 - y0, x1 - x0
    cov = inside.reshape(nz, _AA, ny, _AA, nx, _AA).mean(axis=(1, 3, 5))
    return cov, (z0, z1, y0, y1, x0, x1)


def _place_centers(draw: _Draw, spec: PhantomSpec, ndim: int):
    """Rejection-sample object centers and radii; returns per-object tuples."""
    sizes = (
        (spec.width, spec.height)
        if ndim == 2
        else (spec.width, spec.height, spec.depth)
    )
    placed: list[tuple] = []
    attempts = 0
    max_attempts = 200 * spec.n_objects
    while len(placed) < spec.n_objects:
        if attempts >= max_attempts:
            raise InvalidSpec(
                f"could not place {spec.n_objects} non-overlapping objects "
                f"in {sizes} after {max_attempts} attempts"
            )
        attempts += 1
        r = float(draw.uniform(1, spec.radius_min, spec.radius_max)[0])
        margin = r + 1.5
        if any(s - 2 * margin <= 0 for s in sizes):
            raise InvalidSpec(f"radius {r:.1f} objects do not fit in {sizes}")
        center = tuple(
            float(draw.uniform(1, margin, s - margin)[0]) for s in sizes
        )
        if spec.non_overlapping:
            ok = all(
                np.sqrt(np.sum(np.subtract(center, c) ** 2)) > r + rr + 1.0
                for (c, rr) in placed
            )
            if not ok:
                continue
        placed.append((center, r))
    return placed


def _assemble(spec: PhantomSpec, cover: np.ndarray, labels: np.ndarray):
    lo, hi = float(spec.background), float(spec.intensity)
    img = np.rint(lo + cover * (hi - lo))
    img = np.clip(img, 0, 2**spec.bit_depth - 1)
    dtype = np.uint8 if spec.bit_depth == 8 else np.uint16
    stack = ImageStack(img.astype(dtype), bit_depth=spec.bit_depth)
    return stack, labels.astype(np.int32)


def generate_phantom(spec: PhantomSpec) -> tuple[ImageStack, np.ndarray]:
    """Render the noiseless scene and its aligned ground-truth label map.

    Returns (stack, labels) where labels has the same (depth, height,
    width) shape as the stack data; label 0 is background and object
    labels count from 1 in placement order. A pixel belongs to the object
    covering at least half of it (highest coverage wins on overlap).
    """
    h, w, d = spec.height, spec.width, spec.depth

    if spec.kind == "flatfield":
        data = np.full((d, h, w), spec.intensity, dtype=np.uint32)
        stack = ImageStack(data, bit_depth=spec.bit_depth)
        return stack, np.zeros((d, h, w), np.int32)

    if spec.kind == "shepp_logan2d":
        off = _subpixel_offsets()
        xs = ((np.arange(w)[:, None] + off[None, :]).ravel() + 0.0) * 2.0 / w - 1.0
        ys = 1.0 - (np.arange(h)[:, None] + off[None, :]).ravel() * 2.0 / h
        X = xs[None, :]
        Y = ys[:, None]
        dens = np.zeros((h * _AA, w * _AA))
        for a, b, x0, y0, ang, rho in SHEPP_LOGAN_ELLIPSES:
            th = np.deg2rad(ang)
            u = (X - x0) * np.cos(th) + (Y - y0) * np.sin(th)
            v = -(X - x0) * np.sin(th) + (Y - y0) * np.cos(th)
            dens += rho * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
        cover = np.clip(dens, 0.0, None).reshape(h, _AA, w, _AA).mean(axis=(1, 3)) / 2.0
        img = np.rint(cover * spec.intensity)
        img = np.clip(img, 0, 2**spec.bit_depth - 1)
        dtype = np.uint8 if spec.bit_depth == 8 else np.uint16
        stack = ImageStack(img.astype(dtype)[np.newaxis], bit_depth=spec.bit_depth)
        return stack, np.zeros((1, h, w), np.int32)

    draw = _Draw(spec.seed)

    if spec.kind in ("disks2d", "blobs2d"):
        cover = np.zeros((h, w))
        best = np.zeros((h, w))
        labels = np.zeros((h, w), np.int32)
        placed = _place_centers(draw, spec, ndim=2)
        for idx, ((cx, cy), r) in enumerate(placed):
            if spec.kind == "disks2d":
                a = b = r
                th = 0.0
            else:
                a = r
                b = float(draw.uniform(1, spec.radius_min, r)[0])
                th = float(draw.uniform(1, 0.0, np.pi)[0])
            cov, (y0, y1, x0, x1) = _ellipse_coverage(h, w, cx, cy, a, b, th)
            box = (slice(y0, y1), slice(x0, x1))
            cover[box] = np.maximum(cover[box], cov)
            win = (cov >= 0.5) & (cov > best[box])
            labels[box][win] = idx + 1
            best[box] = np.maximum(best[box], cov)
        stack, labels = _assemble(spec, cover, labels)
        return stack, labels[np.newaxis]

    # spheres3d
    cover = np.zeros((d, h, w))
    best = np.zeros((d, h, w))
    labels = np.zeros((d, h, w), np.int32)
    placed = _place_centers(draw, spec, ndim=3)
    for idx, ((cx, cy, cz), r) in enumerate(placed):
        cov, (z0, z1, y0, y1, x0, x1) = _sphere_coverage((d, h, w), cx, cy, cz, r)
        box = (slice(z0, z1), slice(y0, y1), slice(x0, x1))
        cover[box] = np.maximum(cover[box], cov)
        win = (cov >= 0.5) & (cov > best[box])
        labels[box][win] = idx + 1
        best[box] = np.maximum(best[box], cov)
    return _assemble(spec, cover, labels)

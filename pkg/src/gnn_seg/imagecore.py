"""Slices, label masks, synthetic phantoms and grayscale image file I/O.

A slice is an (m, H, W) float64 stack, one 2D field per modality. Files are
stored one per modality as 8/16-bit grayscale PNG or binary PGM (P5); values
are read back scaled by the format's maximum so they land in [0, 1].
"""

from __future__ import annotations

import io
import json
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import png

from gnn_seg.artifacts import atomic_write_bytes, atomic_write_json
from gnn_seg.exceptions import (
    DimensionMismatchError,
    ImageIOError,
    UnsupportedFormatError,
    ValidationError,
)

FloatArray = npt.NDArray[np.float64]
LabelArray = npt.NDArray[np.uint8]

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
CLASS_IDS = (BACKGROUND, CSF, GM, WM)
CLASS_NAMES = {BACKGROUND: "background", CSF: "CSF", GM: "GM", WM: "WM"}
TISSUE_CLASSES = (CSF, GM, WM)

# Base intensity per class id (background, CSF, GM, WM) for each phantom modality.
MODALITY_PROFILES: tuple[tuple[str, tuple[float, float, float, float]], ...] = (
    ("t1", (0.0, 0.25, 0.55, 0.85)),
    ("t2", (0.0, 0.90, 0.60, 0.35)),
    ("pd", (0.0, 0.80, 0.70, 0.60)),
)

SUPPORTED_BIT_DEPTHS = (8, 16)
_MODALITY_FILE = re.compile(r"^(?P<stem>.+?)_(?P<idx>\d+)_(?P<name>[A-Za-z0-9\-]+)$")


def _frozen(arr: npt.NDArray[Any]) -> npt.NDArray[Any]:
    out = np.array(arr, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Slice:
    """Multi-modality 2D image.

    `value_ranges` records, per modality, the (min, max) of the encoding the
    data came from: (0, 65535) for a 16-bit file, (0.0, 1.0) for a phantom.
    """

    data: FloatArray
    modality_names: tuple[str, ...]
    value_ranges: tuple[tuple[float, float], ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValidationError("slice data must have shape (m, H, W) with m, H, W >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("slice data contains non-finite values")
        names = tuple(self.modality_names)
        if len(names) != arr.shape[0]:
            raise ValidationError(
                "modality_names length does not match modality count",
                names=len(names),
                modalities=arr.shape[0],
            )
        ranges = tuple(tuple(float(x) for x in r) for r in self.value_ranges) or tuple(
            (0.0, 1.0) for _ in names
        )
        if len(ranges) != len(names):
            raise ValidationError("value_ranges length does not match modality count")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "modality_names", names)
        object.__setattr__(self, "value_ranges", ranges)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def modalities(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def modality(self, index: int) -> FloatArray:
        if not 0 <= index < self.modalities:
            raise ValidationError(
                "modality index out of range", index=index, modalities=self.modalities
            )
        return self.data[index]


@dataclass(frozen=True)
class LabelMask:
    labels: LabelArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError("label mask must be a non-empty 2D array")
        bad = np.setdiff1d(np.unique(arr), np.asarray(CLASS_IDS))
        if bad.size:
            raise ValidationError("label mask holds undeclared class ids", ids=bad.tolist())
        object.__setattr__(self, "labels", _frozen(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def histogram(self) -> dict[int, int]:
        counts = np.bincount(self.labels.ravel(), minlength=len(CLASS_IDS))
        return {c: int(counts[c]) for c in CLASS_IDS}


def require_same_shape(a: tuple[int, int], b: tuple[int, int], *, what: str) -> None:
    if tuple(a) != tuple(b):
        raise DimensionMismatchError(f"{what}: dimension mismatch", left=list(a), right=list(b))


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    seed: int = 0
    noise_sigma: float = 0.05
    # fractions of half-size for the WM, GM and CSF ring outer edges
    ring_radii: tuple[float, float, float] = (0.3, 0.6, 0.9)
    modalities: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "ring_radii", tuple(float(r) for r in self.ring_radii))

    def validate(self) -> None:
        if self.size < 2:
            raise ValidationError("phantom size must be >= 2", size=self.size)
        if self.noise_sigma < 0 or not np.isfinite(self.noise_sigma):
            raise ValidationError("noise_sigma must be finite and >= 0", noise_sigma=self.noise_sigma)
        if len(self.ring_radii) != 3:
            raise ValidationError("ring_radii must hold exactly three radii")
        r = self.ring_radii
        if not all(0.0 < x <= 1.0 for x in r):
            raise ValidationError("ring_radii must lie in (0, 1]", ring_radii=list(r))
        if not (r[0] < r[1] < r[2]):
            raise ValidationError("ring_radii must be strictly increasing", ring_radii=list(r))
        if not 1 <= self.modalities <= len(MODALITY_PROFILES):
            raise ValidationError(
                f"modalities must be in 1..{len(MODALITY_PROFILES)}", modalities=self.modalities
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "size": self.size,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "ring_radii": list(self.ring_radii),
            "modalities": self.modalities,
        }

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> PhantomSpec:
        known = {"size", "seed", "noise_sigma", "ring_radii", "modalities"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValidationError("unknown phantom spec fields", fields=unknown)
        try:
            spec = PhantomSpec(
                size=int(raw.get("size", 64)),
                seed=int(raw.get("seed", 0)),
                noise_sigma=float(raw.get("noise_sigma", 0.05)),
                ring_radii=tuple(raw.get("ring_radii", (0.3, 0.6, 0.9))),  # type: ignore[arg-type]
                modalities=int(raw.get("modalities", 2)),
            )
        except (TypeError, ValueError) as e:
            raise ValidationError(f"malformed phantom spec: {e}") from e
        spec.validate()
        return spec


def load_phantom_spec(path: Path) -> PhantomSpec:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ImageIOError(f"phantom spec not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"phantom spec is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError("phantom spec must be a JSON object")
    return PhantomSpec.from_dict(raw)


def phantom_labels(size: int, ring_radii: Sequence[float]) -> LabelArray:
    """Rasterize the concentric rings: WM inside, then GM, then CSF."""
    c = (size - 1) / 2.0
    half = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.sqrt((xx - c) ** 2 + (yy - c) ** 2)
    labels = np.zeros((size, size), dtype=np.uint8)
    r_wm, r_gm, r_csf = (r * half for r in ring_radii)
    labels[d <= r_csf] = CSF
    labels[d <= r_gm] = GM
    labels[d <= r_wm] = WM
    return labels


def generate_phantom(spec: PhantomSpec) -> tuple[Slice, LabelMask]:
    spec.validate()
    labels = phantom_labels(spec.size, spec.ring_radii)
    profiles = MODALITY_PROFILES[: spec.modalities]

    base = np.stack([np.asarray(levels, dtype=np.float64)[labels] for _, levels in profiles])
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noisy = base + spec.noise_sigma * rng.standard_normal(base.shape)
        data = np.clip(noisy, 0.0, 1.0)
    else:
        data = base

    names = tuple(name for name, _ in profiles)
    return Slice(data=data, modality_names=names), LabelMask(labels=labels)


@dataclass(frozen=True)
class PhantomSample:
    name: str
    slice: Slice
    mask: LabelMask
    spec: PhantomSpec = field(default_factory=PhantomSpec)


def generate_phantom_set(
    count: int, spec: PhantomSpec, *, radius_jitter: float = 0.0, prefix: str = "sample"
) -> list[PhantomSample]:
    """Deterministic phantom dataset: sample i uses seed spec.seed + i.

    With radius_jitter > 0 every sample scales its three radii by a common
    factor drawn uniformly from [1 - jitter, 1 + jitter], capped so the outer
    ring stays inside the image.
    """
    if count < 1:
        raise ValidationError("count must be >= 1", count=count)
    if not 0.0 <= radius_jitter < 1.0:
        raise ValidationError("radius_jitter must lie in [0, 1)", radius_jitter=radius_jitter)
    spec.validate()

    samples: list[PhantomSample] = []
    for i in range(count):
        radii = spec.ring_radii
        if radius_jitter > 0:
            rng = np.random.default_rng([spec.seed, i])
            scale = float(rng.uniform(1.0 - radius_jitter, 1.0 + radius_jitter))
            scale = min(scale, 1.0 / radii[2])
            radii = (radii[0] * scale, radii[1] * scale, radii[2] * scale)
        sample_spec = PhantomSpec(
            size=spec.size,
            seed=spec.seed + i,
            noise_sigma=spec.noise_sigma,
            ring_radii=radii,
            modalities=spec.modalities,
        )
        slc, mask = generate_phantom(sample_spec)
        samples.append(PhantomSample(f"{prefix}_{i:03d}", slc, mask, sample_spec))
    return samples


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize(slc: Slice) -> Slice:
    """Per-modality min-max scaling to [0, 1].

    A constant modality becomes all zeros and adds a `constant_modality:<name>`
    warning to the returned slice.
    """
    out = np.empty_like(slc.data)
    warnings = list(slc.warnings)
    for i, name in enumerate(slc.modality_names):
        band = slc.data[i]
        lo = float(band.min())
        hi = float(band.max())
        if hi > lo:
            out[i] = (band - lo) / (hi - lo)
        else:
            out[i] = 0.0
            flag = f"constant_modality:{name}"
            if flag not in warnings:
                warnings.append(flag)
    return Slice(
        data=out,
        modality_names=slc.modality_names,
        value_ranges=slc.value_ranges,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _encode_png(values: npt.NDArray[np.uint16], bit_depth: int) -> bytes:
    height, width = values.shape
    writer = png.Writer(width=width, height=height, greyscale=True, bitdepth=bit_depth)
    buf = io.BytesIO()
    writer.write(buf, values.astype(np.uint32).tolist())
    return buf.getvalue()


def _decode_png(raw: bytes, path: Path) -> tuple[npt.NDArray[np.uint16], int]:
    try:
        width, height, rows, info = png.Reader(bytes=raw).read()
        pixels = [np.asarray(row, dtype=np.uint16) for row in rows]
    except png.Error as e:
        raise UnsupportedFormatError(f"unreadable PNG: {e}", path=str(path)) from e
    if not info.get("greyscale") or info.get("alpha") or info.get("palette"):
        raise UnsupportedFormatError("PNG must be single-channel grayscale", path=str(path))
    bit_depth = int(info["bitdepth"])
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise UnsupportedFormatError(
            "PNG bit depth must be 8 or 16", path=str(path), bit_depth=bit_depth
        )
    arr = np.vstack(pixels).reshape(height, width)
    return arr, (1 << bit_depth) - 1


def _encode_pgm(values: npt.NDArray[np.uint16], maxval: int) -> bytes:
    height, width = values.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + values.astype(dtype).tobytes()


def _decode_pgm(raw: bytes, path: Path) -> tuple[npt.NDArray[np.uint16], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise UnsupportedFormatError("truncated PGM header", path=str(path))
        ch = raw[pos : pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        if ch.isspace():
            pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1

    if tokens[0] != b"P5":
        raise UnsupportedFormatError("only binary PGM (P5) is supported", path=str(path))
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise UnsupportedFormatError("malformed PGM header", path=str(path)) from e
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise UnsupportedFormatError("PGM header out of range", path=str(path))

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    body = raw[pos : pos + expected]
    if len(body) != expected:
        raise UnsupportedFormatError(
            "PGM raster size does not match header", path=str(path), expected=expected
        )
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.uint16)
    if int(arr.max(initial=0)) > maxval:
        raise UnsupportedFormatError("PGM sample exceeds maxval", path=str(path))
    return arr, maxval


def read_raw_image(path: Path) -> tuple[npt.NDArray[np.uint16], int]:
    """Read one grayscale file; returns (integer samples, format maximum)."""
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise ImageIOError(f"image not found: {path}") from e
    except OSError as e:
        raise ImageIOError(f"cannot read image: {e}", path=str(path)) from e

    if raw.startswith(b"\x89PNG\r\n\x1a\n"):
        return _decode_png(raw, path)
    if raw.startswith(b"P5"):
        return _decode_pgm(raw, path)
    raise UnsupportedFormatError("unsupported image format (expected PNG or PGM)", path=str(path))


def write_raw_image(path: Path, values: npt.NDArray[np.uint16], *, bit_depth: int = 16) -> None:
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise UnsupportedFormatError("bit depth must be 8 or 16", bit_depth=bit_depth)
    maxval = (1 << bit_depth) - 1
    if values.size and int(values.max()) > maxval:
        raise ValidationError("sample exceeds bit depth", bit_depth=bit_depth)
    suffix = path.suffix.lower()
    if suffix == ".png":
        data = _encode_png(values, bit_depth)
    elif suffix == ".pgm":
        data = _encode_pgm(values, maxval)
    else:
        raise UnsupportedFormatError("output must end in .png or .pgm", path=str(path))
    atomic_write_bytes(path, data)


def write_rgb_image(path: Path, rgb: npt.NDArray[np.uint8]) -> None:
    """8-bit RGB PNG from an (H, W, 3) array."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError("RGB image must have shape (H, W, 3)", shape=list(rgb.shape))
    height, width, _ = rgb.shape
    writer = png.Writer(width=width, height=height, greyscale=False, bitdepth=8)
    buf = io.BytesIO()
    writer.write(buf, rgb.astype(np.uint8).reshape(height, width * 3).tolist())
    atomic_write_bytes(path, buf.getvalue())


def _modality_name(path: Path) -> str:
    m = _MODALITY_FILE.match(path.stem)
    return m.group("name") if m else path.stem


def read_image(paths: Path | Sequence[Path], modality_names: Sequence[str] | None = None) -> Slice:
    """Read one file per modality into a Slice scaled to [0, 1] by format maximum."""
    files = [paths] if isinstance(paths, Path) else list(paths)
    if not files:
        raise ValidationError("at least one modality file is required")

    bands: list[FloatArray] = []
    ranges: list[tuple[float, float]] = []
    shape: tuple[int, int] | None = None
    for p in files:
        arr, maxval = read_raw_image(p)
        if shape is None:
            shape = (int(arr.shape[0]), int(arr.shape[1]))
        else:
            require_same_shape(shape, (int(arr.shape[0]), int(arr.shape[1])), what=str(p))
        bands.append(arr.astype(np.float64) / maxval)
        ranges.append((0.0, float(maxval)))

    names = tuple(modality_names) if modality_names else tuple(_modality_name(p) for p in files)
    return Slice(data=np.stack(bands), modality_names=names, value_ranges=tuple(ranges))


def write_image(
    slc: Slice,
    directory: Path,
    *,
    stem: str = "slice",
    fmt: str = "png",
    bit_depth: int = 16,
) -> list[Path]:
    """Write one file per modality as `<stem>_<idx>_<name>.<fmt>`."""
    if fmt not in ("png", "pgm"):
        raise UnsupportedFormatError("format must be png or pgm", fmt=fmt)
    maxval = (1 << bit_depth) - 1
    out: list[Path] = []
    for i, name in enumerate(slc.modality_names):
        values = np.rint(np.clip(slc.data[i], 0.0, 1.0) * maxval).astype(np.uint16)
        path = directory / f"{stem}_{i}_{name}.{fmt}"
        write_raw_image(path, values, bit_depth=bit_depth)
        out.append(path)
    return out


def find_modality_files(directory: Path, *, stem: str = "slice") -> list[Path]:
    found: list[tuple[int, Path]] = []
    for p in directory.iterdir():
        if p.suffix.lower() not in (".png", ".pgm"):
            continue
        m = _MODALITY_FILE.match(p.stem)
        if m and m.group("stem") == stem:
            found.append((int(m.group("idx")), p))
    if not found:
        raise ImageIOError(f"no '{stem}_<idx>_<name>' modality files in {directory}")
    found.sort()
    return [p for _, p in found]


def read_slice_dir(directory: Path, *, stem: str = "slice") -> Slice:
    return read_image(find_modality_files(directory, stem=stem))


def read_mask(path: Path) -> LabelMask:
    arr, _ = read_raw_image(path)
    return LabelMask(labels=arr)  # type: ignore[arg-type]


def write_mask(mask: LabelMask, path: Path) -> None:
    write_raw_image(path, mask.labels.astype(np.uint16), bit_depth=8)


def write_sample_dir(
    directory: Path, slc: Slice, mask: LabelMask, *, spec: PhantomSpec | None = None
) -> list[Path]:
    paths = write_image(slc, directory)
    mask_path = directory / "mask.png"
    write_mask(mask, mask_path)
    paths.append(mask_path)
    if spec is not None:
        spec_path = directory / "phantom.json"
        atomic_write_json(spec_path, spec.to_dict())
        paths.append(spec_path)
    return paths


def read_sample_dir(directory: Path) -> tuple[Slice, LabelMask]:
    slc = read_slice_dir(directory)
    mask = read_mask(directory / "mask.png")
    require_same_shape(slc.shape, mask.shape, what=f"mask in {directory}")
    return slc, mask


def list_sample_dirs(dataset_dir: Path) -> list[Path]:
    if not dataset_dir.is_dir():
        raise ImageIOError(f"dataset directory not found: {dataset_dir}")
    dirs = sorted(p for p in dataset_dir.iterdir() if p.is_dir() and (p / "mask.png").exists())
    if not dirs:
        raise ValidationError(f"dataset is empty (no sample dirs with mask.png): {dataset_dir}")
    return dirs

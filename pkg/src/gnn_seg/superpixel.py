"""SNIC superpixels: grid-seeded, priority-queue region growing.

Each seed owns a fixed anchor at its grid-cell center. A pixel's priority for
a region is sqrt(di^2 + (compactness / s)^2 * ds^2) where di is the distance
from the region's running intensity mean (intensity scaled to 0..255) and ds
the Euclidean distance to the anchor, with s = sqrt(H * W / target_regions).
Pixels are assigned once, on their first pop; equal priorities pop in push
order.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from skimage.filters import threshold_otsu

from gnn_seg.artifacts import atomic_write_json
from gnn_seg.exceptions import ImageIOError, ValidationError
from gnn_seg.imagecore import FloatArray, Slice, read_raw_image, require_same_shape, write_raw_image

IntArray = npt.NDArray[np.int64]

INTENSITY_SCALE = 255.0
MAX_STORED_REGIONS = 1 << 16
AUTO_MODALITY = "auto"

# 4-neighborhood as (dx, dy)
_NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class SnicParams:
    target_regions: int = 200
    compactness: float = 10.0
    modality_index: int | str = AUTO_MODALITY

    def validate(self, slc: Slice | None = None) -> None:
        if self.target_regions < 1:
            raise ValidationError("target_regions must be >= 1", target_regions=self.target_regions)
        if not self.compactness >= 0 or not math.isfinite(self.compactness):
            raise ValidationError("compactness must be finite and >= 0", compactness=self.compactness)
        if isinstance(self.modality_index, str):
            if self.modality_index != AUTO_MODALITY:
                raise ValidationError(
                    "modality_index must be an integer or 'auto'", modality_index=self.modality_index
                )
        elif self.modality_index < 0:
            raise ValidationError("modality_index must be >= 0", modality_index=self.modality_index)
        if slc is None:
            return
        if self.target_regions > slc.width * slc.height:
            raise ValidationError(
                "target_regions exceeds pixel count",
                target_regions=self.target_regions,
                pixels=slc.width * slc.height,
            )
        if isinstance(self.modality_index, int) and self.modality_index >= slc.modalities:
            raise ValidationError(
                "modality_index out of range",
                modality_index=self.modality_index,
                modalities=slc.modalities,
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_regions": self.target_regions,
            "compactness": self.compactness,
            "modality_index": self.modality_index,
        }

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> SnicParams:
        modality = raw.get("modality_index", AUTO_MODALITY)
        params = SnicParams(
            target_regions=int(raw.get("target_regions", 200)),
            compactness=float(raw.get("compactness", 10.0)),
            modality_index=modality if modality == AUTO_MODALITY else int(modality),
        )
        params.validate()
        return params


@dataclass(frozen=True)
class SuperpixelLabeling:
    """Partition of an image into n regions; `region_of[y, x]` is in [0, n)."""

    region_of: IntArray
    n: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.region_of)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError("region_of must be a non-empty 2D array")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError("region_of must hold integer region ids")
        if self.n < 1:
            raise ValidationError("labeling must hold at least one region", n=self.n)
        if int(arr.min()) < 0 or int(arr.max()) >= self.n:
            raise ValidationError("region ids must lie in [0, n)", n=self.n)
        counts = np.bincount(arr.ravel(), minlength=self.n)
        if np.any(counts == 0):
            raise ValidationError(
                "region ids must be contiguous with no empty region",
                empty=np.flatnonzero(counts == 0).tolist(),
            )
        frozen = np.array(arr, dtype=np.int64, copy=True, order="C")
        frozen.setflags(write=False)
        object.__setattr__(self, "region_of", frozen)

    @property
    def height(self) -> int:
        return int(self.region_of.shape[0])

    @property
    def width(self) -> int:
        return int(self.region_of.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @cached_property
    def counts(self) -> IntArray:
        return np.bincount(self.region_of.ravel(), minlength=self.n).astype(np.int64)

    @cached_property
    def pixels_of(self) -> tuple[IntArray, ...]:
        """Per-region (row, col) coordinates in row-major order."""
        flat = self.region_of.ravel()
        order = np.argsort(flat, kind="stable")
        rows, cols = np.divmod(order, self.width)
        coords = np.column_stack([rows, cols]).astype(np.int64)
        return tuple(np.split(coords, np.cumsum(self.counts)[:-1]))

    def relabeled(self, permutation: IntArray) -> SuperpixelLabeling:
        """Region i becomes permutation[i]."""
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.n)):
            raise ValidationError("permutation must be a rearrangement of 0..n-1")
        return SuperpixelLabeling(region_of=perm[self.region_of], n=self.n)


def grid_shape(width: int, height: int, n: int) -> tuple[int, int]:
    """Seed grid (nx, ny) with nx * ny close to n and cells close to square.

    Minimizes 2 * |nx * ny - n| / n + |log(nx / ny) - log(width / height)|,
    preferring the larger nx on ties.
    """
    if width < 1 or height < 1:
        raise ValidationError("image must be at least 1x1", width=width, height=height)
    if not 1 <= n <= width * height:
        raise ValidationError("region count must lie in [1, width * height]", n=n)

    aspect = math.log(width) - math.log(height)
    best: tuple[float, int, int] | None = None
    for nx in range(1, min(width, n) + 1):
        for ny in sorted({min(height, max(1, n // nx)), min(height, -(-n // nx))}):
            cost = 2.0 * abs(nx * ny - n) / n + abs(math.log(nx) - math.log(ny) - aspect)
            if best is None or cost < best[0] - 1e-12:
                best = (cost, nx, ny)
            elif abs(cost - best[0]) <= 1e-12 and nx > best[1]:
                best = (cost, nx, ny)
    assert best is not None
    return best[1], best[2]


def seed_anchors(width: int, height: int, n: int) -> list[tuple[float, float]]:
    """Grid-cell centers (x, y), row-major with y outer."""
    nx, ny = grid_shape(width, height, n)
    xs = [(i + 0.5) * width / nx - 0.5 for i in range(nx)]
    ys = [(j + 0.5) * height / ny - 0.5 for j in range(ny)]
    return [(x, y) for y in ys for x in xs]


def _otsu_separability(band: FloatArray) -> float:
    lo, hi = float(band.min()), float(band.max())
    if hi <= lo:
        return 0.0
    t = threshold_otsu(band)
    below = band[band <= t]
    above = band[band > t]
    if below.size == 0 or above.size == 0:
        return 0.0
    w0 = below.size / band.size
    w1 = above.size / band.size
    between = w0 * w1 * (float(below.mean()) - float(above.mean())) ** 2
    return between / float(band.var())


def select_clearest_modality(slc: Slice) -> int:
    """Modality whose Otsu split explains the largest share of its variance."""
    scores = [_otsu_separability(slc.data[i]) for i in range(slc.modalities)]
    return int(np.argmax(scores))


def resolve_modality(params: SnicParams, slc: Slice) -> int:
    if params.modality_index == AUTO_MODALITY:
        return select_clearest_modality(slc)
    return int(params.modality_index)


def snic_segment(slc: Slice, params: SnicParams) -> SuperpixelLabeling:
    params.validate(slc)
    modality = resolve_modality(params, slc)
    image = slc.data[modality] * INTENSITY_SCALE
    height, width = image.shape

    anchors = seed_anchors(width, height, params.target_regions)
    n = len(anchors)
    spacing = math.sqrt(height * width / params.target_regions)
    weight = (params.compactness / spacing) ** 2

    labels = np.full((height, width), -1, dtype=np.int64)
    sums = [0.0] * n
    sizes = [0] * n

    heap: list[tuple[float, int, int, int, int]] = []
    counter = itertools.count()
    for k, (ax, ay) in enumerate(anchors):
        heapq.heappush(heap, (0.0, next(counter), math.floor(ax + 0.5), math.floor(ay + 0.5), k))

    while heap:
        _, _, x, y, k = heapq.heappop(heap)
        if labels[y, x] >= 0:
            continue
        labels[y, x] = k
        sums[k] += float(image[y, x])
        sizes[k] += 1
        mean = sums[k] / sizes[k]
        ax, ay = anchors[k]

        for dx, dy in _NEIGHBORS:
            xx, yy = x + dx, y + dy
            if 0 <= xx < width and 0 <= yy < height and labels[yy, xx] < 0:
                di = float(image[yy, xx]) - mean
                ds2 = (xx - ax) ** 2 + (yy - ay) ** 2
                priority = math.sqrt(di * di + weight * ds2)
                heapq.heappush(heap, (priority, next(counter), xx, yy, k))

    return SuperpixelLabeling(region_of=labels, n=n)


@dataclass(frozen=True)
class RegionStats:
    mean_intensity: FloatArray  # (n, m)
    mean_x: FloatArray  # column
    mean_y: FloatArray  # row
    count: IntArray


def region_stats(labeling: SuperpixelLabeling, slc: Slice) -> RegionStats:
    require_same_shape(labeling.shape, slc.shape, what="region_stats")
    flat = labeling.region_of.ravel()
    counts = labeling.counts
    denom = counts.astype(np.float64)

    means = np.empty((labeling.n, slc.modalities), dtype=np.float64)
    for i in range(slc.modalities):
        means[:, i] = np.bincount(flat, weights=slc.data[i].ravel(), minlength=labeling.n) / denom

    rows, cols = np.indices(labeling.shape, dtype=np.float64)
    mean_x = np.bincount(flat, weights=cols.ravel(), minlength=labeling.n) / denom
    mean_y = np.bincount(flat, weights=rows.ravel(), minlength=labeling.n) / denom
    return RegionStats(mean_intensity=means, mean_x=mean_x, mean_y=mean_y, count=counts)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_labeling(
    labeling: SuperpixelLabeling, path: Path, *, params: SnicParams | None = None
) -> list[Path]:
    """16-bit PNG of region ids plus a `<stem>.json` sidecar."""
    if labeling.n > MAX_STORED_REGIONS:
        raise ValidationError("too many regions for a 16-bit labeling", n=labeling.n)
    write_raw_image(path, labeling.region_of.astype(np.uint16), bit_depth=16)
    sidecar = _sidecar_path(path)
    atomic_write_json(
        sidecar,
        {
            "n": labeling.n,
            "width": labeling.width,
            "height": labeling.height,
            "params": params.to_dict() if params is not None else None,
        },
    )
    return [path, sidecar]


def read_labeling(path: Path) -> tuple[SuperpixelLabeling, SnicParams | None]:
    values, _ = read_raw_image(path)
    sidecar = _sidecar_path(path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ImageIOError(f"labeling sidecar not found: {sidecar}") from e
    except json.JSONDecodeError as e:
        raise ImageIOError(f"labeling sidecar is not valid JSON: {e}", path=str(sidecar)) from e

    labeling = SuperpixelLabeling(region_of=values.astype(np.int64), n=int(meta["n"]))
    if (labeling.width, labeling.height) != (meta.get("width"), meta.get("height")):
        raise ImageIOError("labeling sidecar size does not match image", path=str(sidecar))
    raw_params = meta.get("params")
    return labeling, SnicParams.from_dict(raw_params) if raw_params else None

"""Overlap (TP, Dice) and boundary-distance (APD) metrics per tissue class.

APD is reported in pixel units and averaged over the prediction boundary.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import cdist

from gnn_seg.exceptions import MetricUndefinedError, ValidationError
from gnn_seg.imagecore import CLASS_NAMES, TISSUE_CLASSES, LabelMask, require_same_shape

BoolArray = npt.NDArray[np.bool_]
PointArray = npt.NDArray[np.int64]

APD_UNIT = "pixel"
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class BinaryMask:
    member: BoolArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.member, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError("binary mask must be a non-empty 2D array")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "member", arr)

    @staticmethod
    def from_labels(mask: LabelMask, class_id: int) -> BinaryMask:
        return BinaryMask(member=mask.labels == class_id)

    @staticmethod
    def from_points(shape: tuple[int, int], points: Sequence[tuple[int, int]]) -> BinaryMask:
        arr = np.zeros(shape, dtype=bool)
        for r, c in points:
            arr[r, c] = True
        return BinaryMask(member=arr)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.member.shape[0]), int(self.member.shape[1])

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.member))


@dataclass(frozen=True)
class BoundarySet:
    """(row, col) boundary pixels in row-major order."""

    points: PointArray

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _overlap(P: BinaryMask, T: BinaryMask) -> int:
    require_same_shape(P.shape, T.shape, what="metric masks")
    return int(np.count_nonzero(P.member & T.member))


def tp_rate(P: BinaryMask, T: BinaryMask) -> float:
    """|P & T| / |T|."""
    inter = _overlap(P, T)
    if T.size == 0:
        raise MetricUndefinedError("TP rate is undefined for an empty reference mask")
    return inter / T.size


def dice(P: BinaryMask, T: BinaryMask) -> float:
    """|P & T| / ((|T| + |P|) / 2)."""
    inter = _overlap(P, T)
    if T.size + P.size == 0:
        raise MetricUndefinedError("Dice is undefined when both masks are empty")
    return inter / ((T.size + P.size) / 2)


def extract_boundary(M: BinaryMask) -> BoundarySet:
    """Members with a 4-neighbor outside the mask or on the image border."""
    if M.size == 0:
        raise MetricUndefinedError("boundary of an empty mask")
    interior = binary_erosion(M.member, structure=_CROSS, border_value=0)
    edge = M.member & ~interior
    return BoundarySet(points=np.argwhere(edge).astype(np.int64))


def apd(P_d: BoundarySet, T_d: BoundarySet) -> float:
    """Mean over P_d of the Euclidean distance to the nearest point of T_d."""
    if len(P_d) == 0 or len(T_d) == 0:
        raise MetricUndefinedError("APD needs two non-empty boundaries", pred=len(P_d), truth=len(T_d))
    nearest = cdist(P_d.points.astype(np.float64), T_d.points.astype(np.float64)).min(axis=1)
    return math.fsum(nearest.tolist()) / len(P_d)


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    name: str
    dice: float | None
    tp: float | None
    apd: float | None
    pred_pixels: int
    truth_pixels: int
    pred_boundary: int
    truth_boundary: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_id": self.class_id,
            "class": self.name,
            "dice": self.dice,
            "tp": self.tp,
            "apd": self.apd,
            "pred_pixels": self.pred_pixels,
            "truth_pixels": self.truth_pixels,
            "pred_boundary": self.pred_boundary,
            "truth_boundary": self.truth_boundary,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class MetricsReport:
    slice_id: str
    width: int
    height: int
    classes: tuple[ClassMetrics, ...]
    apd_unit: str = APD_UNIT

    def by_name(self, name: str) -> ClassMetrics:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "slice": self.slice_id,
            "width": self.width,
            "height": self.height,
            "apd_unit": self.apd_unit,
            "classes": [c.to_dict() for c in self.classes],
        }


def _class_metrics(pred: LabelMask, truth: LabelMask, class_id: int) -> ClassMetrics:
    P = BinaryMask.from_labels(pred, class_id)
    T = BinaryMask.from_labels(truth, class_id)
    name = CLASS_NAMES[class_id]
    flags: list[str] = []

    if P.size == 0 and T.size == 0:
        return ClassMetrics(class_id, name, None, None, None, 0, 0, 0, 0, ("not_applicable",))

    d = dice(P, T)
    tp: float | None
    if T.size == 0:
        tp = None
        flags.append("tp_undefined_empty_truth")
    else:
        tp = tp_rate(P, T)

    P_d = extract_boundary(P) if P.size else BoundarySet(np.zeros((0, 2), dtype=np.int64))
    T_d = extract_boundary(T) if T.size else BoundarySet(np.zeros((0, 2), dtype=np.int64))
    distance: float | None = None
    if len(P_d) == 0:
        flags.append("apd_undefined_empty_prediction")
    elif len(T_d) == 0:
        flags.append("apd_undefined_empty_truth")
    else:
        distance = apd(P_d, T_d)

    return ClassMetrics(
        class_id=class_id,
        name=name,
        dice=d,
        tp=tp,
        apd=distance,
        pred_pixels=P.size,
        truth_pixels=T.size,
        pred_boundary=len(P_d),
        truth_boundary=len(T_d),
        flags=tuple(flags),
    )


def evaluate(pred: LabelMask, truth: LabelMask, *, slice_id: str = "slice") -> MetricsReport:
    """Per-class Dice/TP/APD for CSF, GM and WM.

    A class absent from both masks is reported with all values None and the
    `not_applicable` flag.
    """
    require_same_shape(pred.shape, truth.shape, what="evaluate")
    classes = tuple(_class_metrics(pred, truth, c) for c in TISSUE_CLASSES)
    return MetricsReport(slice_id=slice_id, width=truth.width, height=truth.height, classes=classes)


@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    std: float | None
    count: int

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "std": self.std, "count": self.count}


@dataclass(frozen=True)
class ReportSummary:
    per_class: dict[str, dict[str, MetricSummary]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            cls: {metric: s.to_dict() for metric, s in metrics.items()}
            for cls, metrics in self.per_class.items()
        }


def summarize_reports(reports: Sequence[MetricsReport]) -> ReportSummary:
    """Mean and population standard deviation per class and metric; None values are skipped."""
    per_class: dict[str, dict[str, MetricSummary]] = {}
    for class_id in TISSUE_CLASSES:
        name = CLASS_NAMES[class_id]
        metrics: dict[str, MetricSummary] = {}
        for metric in ("dice", "tp", "apd"):
            values = [
                getattr(c, metric)
                for r in reports
                for c in r.classes
                if c.class_id == class_id and getattr(c, metric) is not None
            ]
            if values:
                arr = np.asarray(values, dtype=np.float64)
                metrics[metric] = MetricSummary(float(arr.mean()), float(arr.std()), len(values))
            else:
                metrics[metric] = MetricSummary(None, None, 0)
        per_class[name] = metrics
    return ReportSummary(per_class=per_class)

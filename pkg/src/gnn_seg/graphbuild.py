"""Region adjacency graph over superpixels plus node feature matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from gnn_seg.artifacts import atomic_write_json
from gnn_seg.exceptions import ImageIOError, ValidationError
from gnn_seg.imagecore import FloatArray, Slice, require_same_shape
from gnn_seg.superpixel import IntArray, SuperpixelLabeling, region_stats


@dataclass(frozen=True)
class RegionGraph:
    """Undirected unit-weight graph; each edge is stored once as (i, j) with i < j.

    F_g holds per-modality mean intensities (n x m) and F_p the centroid
    (x, y) scaled into [0, 1] (n x 2).
    """

    n: int
    edges: IntArray
    F_g: FloatArray
    F_p: FloatArray

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValidationError("graph must hold at least one node", n=self.n)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValidationError("edges must be stored as (i, j) with i < j")
            if int(edges.min()) < 0 or int(edges.max()) >= self.n:
                raise ValidationError("edge endpoint out of range", n=self.n)
            if np.unique(edges, axis=0).shape[0] != edges.shape[0]:
                raise ValidationError("duplicate edges")
        f_g = np.asarray(self.F_g, dtype=np.float64)
        f_p = np.asarray(self.F_p, dtype=np.float64)
        if f_g.ndim != 2 or f_g.shape[0] != self.n:
            raise ValidationError("F_g must have one row per node", shape=list(f_g.shape))
        if f_p.shape != (self.n, 2):
            raise ValidationError("F_p must be n x 2", shape=list(f_p.shape))
        for name, arr in (("edges", edges), ("F_g", f_g), ("F_p", f_p)):
            arr = np.array(arr, copy=True, order="C")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def modalities(self) -> int:
        return int(self.F_g.shape[1])

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    def has_edge(self, i: int, j: int) -> bool:
        a, b = min(i, j), max(i, j)
        if a == b:
            return False
        return bool(np.any((self.edges[:, 0] == a) & (self.edges[:, 1] == b)))

    def neighbors(self, i: int) -> list[int]:
        left = self.edges[self.edges[:, 1] == i, 0]
        right = self.edges[self.edges[:, 0] == i, 1]
        return sorted(int(v) for v in np.concatenate([left, right]))

    def degrees(self) -> IntArray:
        return np.bincount(self.edges.ravel(), minlength=self.n).astype(np.int64)

    def adjacency(self) -> FloatArray:
        a = np.zeros((self.n, self.n), dtype=np.float64)
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def is_connected(self) -> bool:
        seen = np.zeros(self.n, dtype=bool)
        stack = [0]
        seen[0] = True
        adj = [self.neighbors(i) for i in range(self.n)]
        while stack:
            for j in adj[stack.pop()]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return bool(seen.all())

    def permuted(self, permutation: IntArray) -> RegionGraph:
        """Node i becomes node permutation[i]."""
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.n)):
            raise ValidationError("permutation must be a rearrangement of 0..n-1")
        inverse = np.argsort(perm)
        return RegionGraph(
            n=self.n,
            edges=canonical_edges(perm[self.edges]),
            F_g=self.F_g[inverse],
            F_p=self.F_p[inverse],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "edges": self.edges.tolist(),
            "F_g": self.F_g.tolist(),
            "F_p": self.F_p.tolist(),
        }

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> RegionGraph:
        try:
            n = int(raw["n"])
            return RegionGraph(
                n=n,
                edges=np.asarray(raw.get("edges") or [], dtype=np.int64).reshape(-1, 2),
                F_g=np.asarray(raw["F_g"], dtype=np.float64).reshape(n, -1),
                F_p=np.asarray(raw["F_p"], dtype=np.float64).reshape(n, 2),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed graph document: {e}") from e


def canonical_edges(pairs: IntArray) -> IntArray:
    """Sorted unique (min, max) rows with self-pairs removed."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ordered = np.sort(pairs, axis=1)
    return np.unique(ordered, axis=0)


def adjacency_edges(labeling: SuperpixelLabeling) -> IntArray:
    labels = labeling.region_of
    horizontal = np.column_stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()])
    vertical = np.column_stack([labels[:-1, :].ravel(), labels[1:, :].ravel()])
    return canonical_edges(np.vstack([horizontal, vertical]))


def build_graph(labeling: SuperpixelLabeling, slc: Slice) -> RegionGraph:
    require_same_shape(labeling.shape, slc.shape, what="build_graph")
    stats = region_stats(labeling, slc)
    f_p = np.column_stack(
        [
            stats.mean_x / max(labeling.width - 1, 1),
            stats.mean_y / max(labeling.height - 1, 1),
        ]
    )
    return RegionGraph(
        n=labeling.n,
        edges=adjacency_edges(labeling),
        F_g=stats.mean_intensity,
        F_p=f_p,
    )


def node_input_features(graph: RegionGraph) -> FloatArray:
    """GNN node input: [F_g | F_p], n x (m + 2)."""
    return np.hstack([graph.F_g, graph.F_p])


def write_graph(graph: RegionGraph, path: Path) -> None:
    atomic_write_json(path, graph.to_dict())


def read_graph(path: Path) -> RegionGraph:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ImageIOError(f"graph file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ImageIOError(f"graph file is not valid JSON: {e}", path=str(path)) from e
    if not isinstance(raw, dict):
        raise ValidationError("graph document must be a JSON object")
    return RegionGraph.from_dict(raw)

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from gnn_seg.exceptions import DimensionMismatchError, ImageIOError, ValidationError
from gnn_seg.graphbuild import (
    RegionGraph,
    adjacency_edges,
    build_graph,
    node_input_features,
    read_graph,
    write_graph,
)
from gnn_seg.imagecore import PhantomSpec, Slice, generate_phantom
from gnn_seg.superpixel import SnicParams, SuperpixelLabeling, snic_segment


def _blocks8() -> SuperpixelLabeling:
    region = np.zeros((8, 8), dtype=np.int64)
    region[:4, 4:] = 1
    region[4:, :4] = 2
    region[4:, 4:] = 3
    return SuperpixelLabeling(region, 4)


def _scan_edges(labels: np.ndarray) -> set[tuple[int, int]]:
    h, w = labels.shape
    found: set[tuple[int, int]] = set()
    for y in range(h):
        for x in range(w):
            for yy, xx in ((y + 1, x), (y, x + 1)):
                if yy < h and xx < w and labels[y, x] != labels[yy, xx]:
                    a, b = int(labels[y, x]), int(labels[yy, xx])
                    found.add((min(a, b), max(a, b)))
    return found


def test_block_layout_edges_and_degrees() -> None:
    slc = Slice(data=np.full((2, 8, 8), 0.3), modality_names=("a", "b"))
    graph = build_graph(_blocks8(), slc)
    assert graph.edges.tolist() == [[0, 1], [0, 2], [1, 3], [2, 3]]
    assert graph.degrees().tolist() == [2, 2, 2, 2]
    assert not graph.has_edge(0, 3)
    assert graph.has_edge(3, 1)
    assert graph.neighbors(0) == [1, 2]


def test_block_layout_features() -> None:
    slc = Slice(data=np.full((2, 8, 8), 0.3), modality_names=("a", "b"))
    graph = build_graph(_blocks8(), slc)
    assert np.allclose(graph.F_g, 0.3, rtol=0, atol=1e-15)
    # block centroids 1.5 and 5.5 over a width of 8 pixels
    lo, hi = 1.5 / 7, 5.5 / 7
    expected = np.array([[lo, lo], [hi, lo], [lo, hi], [hi, hi]])
    assert np.allclose(graph.F_p, expected, rtol=0, atol=1e-15)


def test_single_region_has_no_edges() -> None:
    slc = Slice(data=np.zeros((3, 4)), modality_names=("a",))
    graph = build_graph(SuperpixelLabeling(np.zeros((3, 4), dtype=np.int64), 1), slc)
    assert graph.n == 1
    assert graph.edge_count == 0
    assert graph.is_connected()


def test_edges_match_brute_force_scan_on_random_labelings() -> None:
    rng = np.random.default_rng(8)
    for _ in range(30):
        h, w = (int(v) for v in rng.integers(4, 14, size=2))
        img = rng.random((h, w))
        n = int(rng.integers(1, 12))
        labeling = snic_segment(Slice(data=img, modality_names=("a",)), SnicParams(n, 5.0, 0))
        edges = adjacency_edges(labeling)
        assert {tuple(e) for e in edges.tolist()} == _scan_edges(labeling.region_of)
        graph = build_graph(labeling, Slice(data=img, modality_names=("a",)))
        assert graph.is_connected()
        assert np.all((graph.F_p >= 0) & (graph.F_p <= 1))
        for i, j in graph.edges.tolist():
            assert graph.has_edge(j, i)


def test_node_input_features_concatenates_streams() -> None:
    graph = RegionGraph(
        n=1, edges=np.zeros((0, 2), dtype=np.int64), F_g=np.array([[0.5, 0.25]]), F_p=np.array([[0.1, 0.9]])
    )
    assert node_input_features(graph).tolist() == [[0.5, 0.25, 0.1, 0.9]]


def test_node_input_features_shape_for_three_modalities() -> None:
    slc, _ = generate_phantom(PhantomSpec(size=32, seed=0, modalities=3))
    labeling = snic_segment(slc, SnicParams(20, 10.0, 0))
    X = node_input_features(build_graph(labeling, slc))
    assert X.shape == (labeling.n, 5)


def test_build_graph_dimension_mismatch() -> None:
    with pytest.raises(DimensionMismatchError):
        build_graph(_blocks8(), Slice(data=np.zeros((8, 7)), modality_names=("a",)))


def test_region_graph_validation() -> None:
    ok_g = np.zeros((3, 1))
    ok_p = np.zeros((3, 2))
    with pytest.raises(ValidationError):
        RegionGraph(n=3, edges=np.array([[1, 0]]), F_g=ok_g, F_p=ok_p)
    with pytest.raises(ValidationError):
        RegionGraph(n=3, edges=np.array([[0, 3]]), F_g=ok_g, F_p=ok_p)
    with pytest.raises(ValidationError):
        RegionGraph(n=3, edges=np.array([[0, 1], [0, 1]]), F_g=ok_g, F_p=ok_p)
    with pytest.raises(ValidationError):
        RegionGraph(n=3, edges=np.array([[0, 1]]), F_g=ok_g, F_p=np.zeros((3, 3)))


def test_permuted_graph_moves_features_with_nodes() -> None:
    slc = Slice(data=np.arange(64.0).reshape(8, 8) / 63, modality_names=("a",))
    graph = build_graph(_blocks8(), slc)
    perm = np.array([2, 0, 3, 1])
    moved = graph.permuted(perm)
    relabeled = build_graph(_blocks8().relabeled(perm), slc)
    assert np.array_equal(moved.edges, relabeled.edges)
    assert np.allclose(moved.F_g, relabeled.F_g)
    assert np.allclose(moved.F_p, relabeled.F_p)


def test_graph_json_round_trip(tmp_path: Path) -> None:
    slc, _ = generate_phantom(PhantomSpec(size=16, seed=2))
    graph = build_graph(snic_segment(slc, SnicParams(6, 10.0, 0)), slc)
    p = tmp_path / "graph.json"
    write_graph(graph, p)
    back = read_graph(p)
    assert back.n == graph.n
    assert np.array_equal(back.edges, graph.edges)
    assert np.array_equal(back.F_g, graph.F_g)
    assert np.array_equal(back.F_p, graph.F_p)


def test_read_graph_errors(tmp_path: Path) -> None:
    with pytest.raises(ImageIOError):
        read_graph(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text('{"n": 2}', encoding="utf-8")
    with pytest.raises(ValidationError):
        read_graph(p)

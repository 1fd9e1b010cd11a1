from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from gnn_seg.exceptions import CheckpointError, ConfigError, NumericalError, ValidationError
from gnn_seg.graphbuild import RegionGraph, build_graph, node_input_features
from gnn_seg.imagecore import LabelMask, PhantomSpec, Slice, generate_phantom
from gnn_seg.neural import DenseLayer, Fcn, GradBuffer, Parameter
from gnn_seg.pipeline import (
    GnnSegConfig,
    GnnSegModel,
    PixelClassifier,
    PreparedSample,
    TrainSettings,
    classify_pixels,
    count_parameters,
    cross_entropy,
    load_checkpoint,
    normalize_node_values,
    normalize_node_values_backward,
    prepare_sample,
    reconstruct_backward,
    reconstruct_slice,
    sample_backward,
    sample_forward,
    save_checkpoint,
    segment,
    structural_backward,
    structural_forward,
    structural_pass,
    train,
    window_index,
)
from gnn_seg.superpixel import SuperpixelLabeling
from tests.oracle_helpers import (
    dense_oracle,
    gat_oracle,
    gcn_oracle,
    input_gradient_error,
    max_gradient_error,
    mutual_interaction_oracle,
    self_interaction_oracle,
)

GRAD_TOL = 1e-4


def _small_config(**overrides: object) -> GnnSegConfig:
    values: dict[str, object] = dict(
        modalities=2,
        gray_fcn=(2, 3),
        position_fcn=(2, 3),
        stream_interaction_width=3,
        gnn_widths=(4, 2),
        heads=2,
        gnn_interaction_width=2,
        mutual_widths=(6, 2),
        final_fcn=(3, 1),
        classifier_hidden=(4,),
        superpixels=4,
    )
    values.update(overrides)
    return GnnSegConfig(**values)  # type: ignore[arg-type]


def _blocks8() -> SuperpixelLabeling:
    region = np.zeros((8, 8), dtype=np.int64)
    region[:4, 4:] = 1
    region[4:, :4] = 2
    region[4:, 4:] = 3
    return SuperpixelLabeling(region, 4)


def _constant_slice(value: float = 0.5, m: int = 2, size: int = 8) -> Slice:
    return Slice(data=np.full((m, size, size), value), modality_names=tuple(f"m{i}" for i in range(m)))


def _dense_chain(layers: list[DenseLayer], X: np.ndarray) -> np.ndarray:
    out = X
    for layer in layers:
        out = dense_oracle(layer.W.value, layer.b.value, layer.activation, out)
    return out


def _structural_oracle(model: GnnSegModel, graph: RegionGraph) -> np.ndarray:
    a = _dense_chain(model.gray_fcn.layers, graph.F_g)
    f = model.gray_interaction.fcn
    a = self_interaction_oracle(a, f.W.value, f.b.value, f.activation)
    b = _dense_chain(model.position_fcn.layers, graph.F_p)
    f = model.position_interaction.fcn
    b = self_interaction_oracle(b, f.W.value, f.b.value, f.activation)

    h = node_input_features(graph)
    for layer in model.gnn.layers:
        if hasattr(layer, "a"):
            h = gat_oracle(layer.W.value, layer.a.value, layer.combine, h, graph)  # type: ignore[union-attr]
        else:
            h = gcn_oracle(layer.W.value, layer.activation, h, graph)
    f = model.gnn_interaction.fcn
    g = self_interaction_oracle(h, f.W.value, f.b.value, f.activation)

    m = model.mutual
    tau = mutual_interaction_oracle(
        np.hstack([a, b]),
        g,
        (m.fcn1.W.value, m.fcn1.b.value, m.fcn1.activation),
        (m.fcn2.W.value, m.fcn2.b.value, m.fcn2.activation),
    )
    return _dense_chain(model.final_fcn.layers, tau)[:, 0]


def _phantom_sample(
    config: GnnSegConfig, *, size: int = 16, seed: int = 0, noise: float = 0.05
) -> PreparedSample:
    slc, mask = generate_phantom(PhantomSpec(size=size, seed=seed, noise_sigma=noise, modalities=config.modalities))
    return prepare_sample(config, slc, mask)


# ---------------------------------------------------------------------------
# Configuration and parameter counts
# ---------------------------------------------------------------------------


def test_default_and_tiny_configs_validate() -> None:
    GnnSegConfig().validate()
    GnnSegConfig.tiny(3).validate()


@pytest.mark.parametrize(
    "overrides",
    [
        {"mutual_widths": (100, 10)},
        {"gnn_kind": "sage"},
        {"final_fcn": (10, 2)},
        {"gray_fcn": (20, 50)},
        {"classifier_window": 2},
        {"heads": 0},
        {"gnn_widths": (500, 20)},
    ],
)
def test_inconsistent_wiring_is_a_config_error(overrides: dict[str, object]) -> None:
    with pytest.raises(ConfigError):
        GnnSegConfig(**overrides).validate()  # type: ignore[arg-type]


def test_config_from_dict_rejects_unknown_fields() -> None:
    with pytest.raises(ConfigError):
        GnnSegConfig.from_dict({"layers": 3})
    cfg = GnnSegConfig.from_dict({"gray_fcn": [20, 100], "superpixel_modality": "1"})
    assert cfg.gray_fcn == (20, 100)
    assert cfg.superpixel_modality == 1


def test_config_dict_round_trip() -> None:
    cfg = GnnSegConfig.tiny(3)
    assert GnnSegConfig.from_dict(cfg.to_dict()) == cfg


def test_dense_layer_count() -> None:
    layer = DenseLayer.init("d", 3, 20, rng=np.random.default_rng(0))
    assert count_parameters(layer).structural == 80
    assert count_parameters(layer).classifier == 0


def test_default_model_count_for_three_modalities() -> None:
    counts = count_parameters(GnnSegModel.build(GnnSegConfig(modalities=3)))
    assert 50_000 <= counts.structural <= 200_000
    assert counts.structural == 107_761
    assert counts.classifier == 4_580
    assert counts.breakdown["gnn"] == 17_500 + 25_100
    assert counts.breakdown["gray_fcn"] == 2_180
    assert counts.breakdown["final_fcn"] == 36_301


def test_concatenated_hidden_heads_widen_the_second_layer() -> None:
    counts = count_parameters(GnnSegModel.build(GnnSegConfig(modalities=3, gat_hidden_combine="concat")))
    assert counts.structural == 207_761


def test_gcn_variant_builds_and_runs() -> None:
    model = GnnSegModel.build(_small_config(gnn_kind="gcn"))
    graph = build_graph(_blocks8(), _constant_slice())
    out = structural_forward(model, _constant_slice(), _blocks8(), graph)
    assert np.allclose(out, _structural_oracle(model, graph), rtol=0, atol=1e-12)


def test_build_is_deterministic_per_seed() -> None:
    a = GnnSegModel.build(GnnSegConfig.tiny())
    b = GnnSegModel.build(GnnSegConfig.tiny())
    c = GnnSegModel.build(GnnSegConfig.tiny(), seed=1)
    for pa, pb in zip(a.parameters(), b.parameters(), strict=True):
        assert np.array_equal(pa.value, pb.value)
    assert not np.array_equal(a.gray_fcn.layers[0].W.value, c.gray_fcn.layers[0].W.value)


# ---------------------------------------------------------------------------
# Structural path
# ---------------------------------------------------------------------------


def test_zero_network_gives_zero_structural_features() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    for p in model.parameters():
        p.value[...] = 0.0
    slc = _constant_slice(0.7)
    out = structural_forward(model, slc, _blocks8(), build_graph(_blocks8(), slc))
    assert np.array_equal(out, np.zeros(4))


def test_tiny_model_on_block_image_matches_scalar_composition() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny(), seed=3)
    slc = Slice(
        data=np.stack([np.full((8, 8), 0.25), np.arange(64.0).reshape(8, 8) / 63]),
        modality_names=("a", "b"),
    )
    graph = build_graph(_blocks8(), slc)
    out = structural_forward(model, slc, _blocks8(), graph)
    assert out.shape == (4,)
    assert np.allclose(out, _structural_oracle(model, graph), rtol=0, atol=1e-12)


def test_single_node_graph_runs_end_to_end() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    slc = _constant_slice(0.3, size=5)
    labeling = SuperpixelLabeling(np.zeros((5, 5), dtype=np.int64), 1)
    out = structural_forward(model, slc, labeling, build_graph(labeling, slc))
    assert out.shape == (1,)
    assert math.isfinite(float(out[0]))


def test_structural_forward_rejects_mismatched_graph() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    slc = _constant_slice()
    one = SuperpixelLabeling(np.zeros((8, 8), dtype=np.int64), 1)
    with pytest.raises(ValidationError):
        structural_forward(model, slc, _blocks8(), build_graph(one, slc))
    three = Slice(data=np.zeros((3, 8, 8)), modality_names=("a", "b", "c"))
    with pytest.raises(ValidationError):
        structural_forward(model, three, _blocks8(), build_graph(_blocks8(), three))


def test_permuting_superpixels_leaves_the_feature_map_unchanged() -> None:
    config = GnnSegConfig.tiny()
    model = GnnSegModel.build(config, seed=5)
    sample = _phantom_sample(config, size=24, seed=2)
    base_values = structural_forward(model, sample.slice, sample.labeling, sample.graph)
    base = reconstruct_slice(sample.labeling, base_values)

    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = rng.permutation(sample.labeling.n)
        labeling = sample.labeling.relabeled(perm)
        graph = sample.graph.permuted(perm)
        moved = reconstruct_slice(labeling, structural_forward(model, sample.slice, labeling, graph))
        assert np.allclose(moved, base, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_structural_gradients(seed: int) -> None:
    model = GnnSegModel.build(_small_config(), seed=seed)
    rng = np.random.default_rng(seed)
    slc = Slice(data=rng.random((2, 8, 8)), modality_names=("a", "b"))
    graph = build_graph(_blocks8(), slc)
    R = rng.normal(size=4)

    def loss() -> float:
        return float(np.dot(structural_pass(model, graph)[0], R))

    grads = GradBuffer()
    _, cache = structural_pass(model, graph)
    structural_backward(model, cache, R, grads)
    assert max_gradient_error(model.structural_parameters(), loss, grads) < GRAD_TOL


@pytest.mark.parametrize("seed", range(5))
def test_full_sample_gradients(seed: int) -> None:
    config = _small_config()
    model = GnnSegModel.build(config, seed=seed)
    sample = _phantom_sample(config, size=8, seed=seed)
    assert sample.mask is not None
    labels = sample.mask.labels

    def loss() -> float:
        logits, _ = sample_forward(model, sample)
        return cross_entropy(logits, labels)[0]

    grads = GradBuffer()
    logits, cache = sample_forward(model, sample)
    _, d_logits = cross_entropy(logits, labels)
    sample_backward(model, sample, cache, d_logits, grads)
    assert max_gradient_error(model.parameters(), loss, grads) < GRAD_TOL


# ---------------------------------------------------------------------------
# Reconstruction and classification
# ---------------------------------------------------------------------------


def test_reconstruct_single_region_and_blocks() -> None:
    one = SuperpixelLabeling(np.zeros((3, 3), dtype=np.int64), 1)
    assert np.array_equal(reconstruct_slice(one, np.array([0.75])), np.full((3, 3), 0.75))
    img = reconstruct_slice(_blocks8(), np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.all(img[:4, :4] == 1.0)
    assert np.all(img[:4, 4:] == 2.0)
    assert np.all(img[4:, :4] == 3.0)
    assert np.all(img[4:, 4:] == 4.0)


def test_reconstruct_matches_loop_oracle() -> None:
    rng = np.random.default_rng(4)
    region = rng.integers(0, 5, size=(7, 6))
    region[0, :5] = np.arange(5)
    labeling = SuperpixelLabeling(region, 5)
    values = rng.normal(size=5)
    img = reconstruct_slice(labeling, values)
    for y in range(7):
        for x in range(6):
            assert img[y, x] == values[region[y, x]]


def test_reconstruct_rejects_wrong_length() -> None:
    with pytest.raises(ValidationError):
        reconstruct_slice(_blocks8(), np.zeros(3))


def test_reconstruct_backward_sums_per_region() -> None:
    d = reconstruct_backward(_blocks8(), np.ones((8, 8)))
    assert d.tolist() == [16.0, 16.0, 16.0, 16.0]


def test_node_value_normalization_and_its_gradient() -> None:
    values = np.array([0.3, -1.0, 2.0, 0.5])
    out, cache = normalize_node_values(values)
    assert out.min() == 0.0
    assert out.max() == 1.0
    R = np.array([0.1, -0.4, 0.7, 2.0])
    analytic = normalize_node_values_backward(cache, R)

    def loss() -> float:
        return float(np.dot(normalize_node_values(values)[0], R))

    assert input_gradient_error(values, loss, analytic) < 1e-6

    flat, flat_cache = normalize_node_values(np.full(3, 4.0))
    assert np.array_equal(flat, np.zeros(3))
    assert np.array_equal(normalize_node_values_backward(flat_cache, np.ones(3)), np.zeros(3))


def test_window_index_clamps_at_the_border() -> None:
    index = window_index(2, 2, 3)
    assert len(index) == 9
    assert index[0].tolist() == [0, 0, 0, 0]
    assert index[1].tolist() == [0, 1, 0, 1]
    assert index[4].tolist() == [0, 1, 2, 3]
    assert index[8].tolist() == [3, 3, 3, 3]


def test_zero_weight_classifier_predicts_background() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    for p in model.classifier_parameters():
        p.value[...] = 0.0
    slc = _constant_slice(0.2)
    mask = classify_pixels(model, slc, np.random.default_rng(0).random((8, 8)))
    assert mask.shape == (8, 8)
    assert np.all(mask.labels == 0)


def test_threshold_classifier_reproduces_thresholded_feature_map() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    channels = model.config.modalities + 1
    W = np.zeros((9 * channels, 4))
    center = 4 * channels + (channels - 1)
    W[center, 1] = 1.0
    b = np.array([0.0, -0.5, -10.0, -10.0])
    layer = DenseLayer("classifier.0", Parameter("classifier.0.W", W), Parameter("classifier.0.b", b))
    model.classifier = PixelClassifier(fcn=Fcn("classifier", [layer]), channels=channels, window=3)

    feature_map = np.random.default_rng(1).random((8, 8))
    mask = classify_pixels(model, _constant_slice(0.9), feature_map)
    assert np.array_equal(mask.labels, (feature_map > 0.5).astype(np.uint8))


def test_classifier_input_gradient() -> None:
    rng = np.random.default_rng(2)
    clf = PixelClassifier.init(3, (5,), window=3, rng=rng)
    stack = rng.random((3, 4, 5))
    R = rng.normal(size=(20, 4))

    def loss() -> float:
        return float(np.sum(clf.forward(stack)[0] * R))

    _, cache = clf.forward(stack)
    d_stack = clf.backward(cache, R, GradBuffer())
    assert input_gradient_error(stack, loss, d_stack) < GRAD_TOL


def test_classify_rejects_mismatched_feature_map() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    with pytest.raises(ValidationError):
        classify_pixels(model, _constant_slice(), np.zeros((8, 7)))


def test_cross_entropy_uniform_logits() -> None:
    logits = np.zeros((2, 4))
    loss, d = cross_entropy(logits, np.array([0, 3]))
    assert loss == pytest.approx(math.log(4))
    expected = np.full((2, 4), 0.25 / 2)
    expected[0, 0] -= 0.5
    expected[1, 3] -= 0.5
    assert np.allclose(d, expected)


def test_zero_noise_phantom_superpixels_share_one_feature_value() -> None:
    config = GnnSegConfig.tiny()
    model = GnnSegModel.build(config)
    slc, _ = generate_phantom(PhantomSpec(size=24, seed=0, noise_sigma=0.0))
    seg = segment(model, slc)
    for pixels in seg.sample.labeling.pixels_of:
        values = seg.feature_map[pixels[:, 0], pixels[:, 1]]
        assert np.unique(values).size == 1


@pytest.mark.parametrize("size", [12, 16, 21])
def test_segment_output_matches_input_shape(size: int) -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    slc, _ = generate_phantom(PhantomSpec(size=size, seed=1))
    seg = segment(model, slc)
    assert seg.mask.shape == (size, size)
    assert seg.feature_map.shape == (size, size)
    assert 0.0 <= seg.feature_map.min() <= seg.feature_map.max() <= 1.0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_training_rejects_zero_epochs_and_empty_data() -> None:
    model = GnnSegModel.build(GnnSegConfig.tiny())
    slc, mask = generate_phantom(PhantomSpec(size=12))
    with pytest.raises(ValidationError):
        train(model, [(slc, mask)], TrainSettings(epochs=0))
    with pytest.raises(ValidationError):
        train(model, [], TrainSettings(epochs=1))
    with pytest.raises(ConfigError):
        train(model, [(slc, mask)], TrainSettings(epochs=1, classifier_mode="pretrained"))


def test_training_is_deterministic_under_a_fixed_seed(tmp_path: Path) -> None:
    config = GnnSegConfig.tiny()
    data = [generate_phantom(PhantomSpec(size=16, seed=s)) for s in range(2)]
    settings = TrainSettings(epochs=3, seed=4)
    first = train(GnnSegModel.build(config), data, settings)
    second = train(GnnSegModel.build(config), data, settings)
    assert first.loss_trace == second.loss_trace
    assert len(first.loss_trace) == 3
    assert first.steps == 6
    assert all(math.isfinite(v) for v in first.loss_trace)

    save_checkpoint(first.model, tmp_path / "a.ckpt", extra={"loss_trace": first.loss_trace})
    save_checkpoint(second.model, tmp_path / "b.ckpt", extra={"loss_trace": second.loss_trace})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_training_descends_on_a_single_sample() -> None:
    config = GnnSegConfig.tiny()
    sample = _phantom_sample(config, size=16, seed=0)
    result = train(GnnSegModel.build(config), [sample], TrainSettings(epochs=200, lr=0.005))
    assert result.loss_trace[-1] < result.loss_trace[0]


def test_zero_learning_rate_leaves_parameters_unchanged() -> None:
    config = GnnSegConfig.tiny()
    model = GnnSegModel.build(config)
    before = [p.value.copy() for p in model.parameters()]
    train(model, [_phantom_sample(config, size=12)], TrainSettings(epochs=2, lr=0.0))
    for b, p in zip(before, model.parameters(), strict=True):
        assert np.array_equal(b, p.value)


def test_frozen_classifier_mode_only_updates_structural_parameters() -> None:
    config = GnnSegConfig.tiny()
    model = GnnSegModel.build(config)
    clf_before = [p.value.copy() for p in model.classifier_parameters()]
    struct_before = [p.value.copy() for p in model.structural_parameters()]
    train(model, [_phantom_sample(config, size=12)], TrainSettings(epochs=2, classifier_mode="frozen"))
    for b, p in zip(clf_before, model.classifier_parameters(), strict=True):
        assert np.array_equal(b, p.value)
    assert any(
        not np.array_equal(b, p.value) for b, p in zip(struct_before, model.structural_parameters(), strict=True)
    )


def test_non_finite_forward_reports_the_sample_index() -> None:
    config = GnnSegConfig.tiny()
    model = GnnSegModel.build(config)
    model.final_fcn.layers[0].W.value[0, 0] = np.nan
    data = [_phantom_sample(config, size=12, seed=s) for s in range(2)]
    with pytest.raises(NumericalError) as exc:
        train(model, data, TrainSettings(epochs=1))
    assert exc.value.sample_index in (0, 1)
    assert exc.value.layer == "final_fcn.0"
    assert exc.value.exit_code == 4


def test_training_requires_masks() -> None:
    config = GnnSegConfig.tiny()
    slc, _ = generate_phantom(PhantomSpec(size=12))
    with pytest.raises(ValidationError):
        train(GnnSegModel.build(config), [prepare_sample(config, slc)], TrainSettings(epochs=1))


def test_prepare_sample_checks_modalities_and_mask_shape() -> None:
    config = GnnSegConfig.tiny(3)
    slc, _ = generate_phantom(PhantomSpec(size=12, modalities=2))
    with pytest.raises(ValidationError):
        prepare_sample(config, slc)
    slc3, _ = generate_phantom(PhantomSpec(size=12, modalities=3))
    with pytest.raises(ValidationError):
        prepare_sample(config, slc3, LabelMask(labels=np.zeros((11, 12), dtype=np.uint8)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_reload_is_bit_exact(tmp_path: Path) -> None:
    config = GnnSegConfig.tiny()
    model = GnnSegModel.build(config, seed=9)
    sample = _phantom_sample(config, size=16)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, extra={"epochs": 0})

    loaded, header = load_checkpoint(path)
    assert header["extra"] == {"epochs": 0}
    assert header["counts"]["structural"] == count_parameters(model).structural
    assert loaded.config == config
    a = structural_forward(model, sample.slice, sample.labeling, sample.graph)
    b = structural_forward(loaded, sample.slice, sample.labeling, sample.graph)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_errors(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        load_checkpoint(bad)
    model = GnnSegModel.build(GnnSegConfig.tiny())
    with pytest.raises(CheckpointError):
        model.load_values({"gray_fcn.0.W": np.zeros((2, 2))})

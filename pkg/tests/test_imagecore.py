from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from gnn_seg.exceptions import (
    DimensionMismatchError,
    ImageIOError,
    UnsupportedFormatError,
    ValidationError,
)
from gnn_seg.imagecore import (
    CSF,
    GM,
    MODALITY_PROFILES,
    WM,
    LabelMask,
    PhantomSpec,
    Slice,
    generate_phantom,
    generate_phantom_set,
    list_sample_dirs,
    load_phantom_spec,
    normalize,
    read_image,
    read_mask,
    read_raw_image,
    read_sample_dir,
    write_image,
    write_mask,
    write_raw_image,
    write_rgb_image,
    write_sample_dir,
)


def _rasterize(size: int, radii: tuple[float, float, float]) -> dict[int, int]:
    c = (size - 1) / 2.0
    half = size / 2.0
    counts = {0: 0, CSF: 0, GM: 0, WM: 0}
    for y in range(size):
        for x in range(size):
            d = math.sqrt((x - c) ** 2 + (y - c) ** 2)
            if d <= radii[0] * half:
                counts[WM] += 1
            elif d <= radii[1] * half:
                counts[GM] += 1
            elif d <= radii[2] * half:
                counts[CSF] += 1
            else:
                counts[0] += 1
    return counts


def test_zero_noise_phantom_holds_exact_base_intensities() -> None:
    slc, mask = generate_phantom(PhantomSpec(size=64, seed=7, noise_sigma=0.0))
    assert slc.shape == (64, 64)
    assert slc.modality_names == ("t1", "t2")
    for i, (_, levels) in enumerate(MODALITY_PROFILES[:2]):
        expected = np.asarray(levels)[mask.labels]
        assert np.array_equal(slc.data[i], expected)


def test_phantom_histogram_matches_rasterization() -> None:
    _, mask = generate_phantom(PhantomSpec(size=64, seed=7, ring_radii=(0.3, 0.6, 0.9)))
    assert mask.histogram() == _rasterize(64, (0.3, 0.6, 0.9))


def test_phantom_is_a_pure_function_of_its_spec() -> None:
    spec = PhantomSpec(size=32, seed=3, noise_sigma=0.1, modalities=3)
    a, ma = generate_phantom(spec)
    b, mb = generate_phantom(spec)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(ma.labels, mb.labels)
    c, _ = generate_phantom(PhantomSpec(size=32, seed=4, noise_sigma=0.1, modalities=3))
    assert not np.array_equal(a.data, c.data)


def test_noisy_phantom_stays_in_unit_range() -> None:
    slc, _ = generate_phantom(PhantomSpec(size=32, seed=1, noise_sigma=0.5))
    assert slc.data.min() >= 0.0
    assert slc.data.max() <= 1.0


@pytest.mark.parametrize(
    "spec",
    [
        PhantomSpec(size=1),
        PhantomSpec(noise_sigma=-0.1),
        PhantomSpec(ring_radii=(0.6, 0.3, 0.9)),
        PhantomSpec(ring_radii=(0.3, 0.6, 1.2)),
        PhantomSpec(modalities=4),
    ],
)
def test_invalid_phantom_specs_are_rejected(spec: PhantomSpec) -> None:
    with pytest.raises(ValidationError):
        generate_phantom(spec)


def test_phantom_spec_json_rejects_unknown_fields(tmp_path: Path) -> None:
    p = tmp_path / "spec.json"
    p.write_text(json.dumps({"size": 16, "colour": "red"}), encoding="utf-8")
    with pytest.raises(ValidationError) as exc:
        load_phantom_spec(p)
    assert "colour" in str(exc.value)


def test_phantom_spec_json_loads(tmp_path: Path) -> None:
    p = tmp_path / "spec.json"
    p.write_text(json.dumps({"size": 16, "seed": 2, "noise_sigma": 0}), encoding="utf-8")
    spec = load_phantom_spec(p)
    assert spec == PhantomSpec(size=16, seed=2, noise_sigma=0.0)


def test_phantom_set_uses_consecutive_seeds() -> None:
    base = PhantomSpec(size=16, seed=10, noise_sigma=0.05)
    samples = generate_phantom_set(3, base)
    assert [s.name for s in samples] == ["sample_000", "sample_001", "sample_002"]
    assert [s.spec.seed for s in samples] == [10, 11, 12]
    single, _ = generate_phantom(PhantomSpec(size=16, seed=11, noise_sigma=0.05))
    assert np.array_equal(samples[1].slice.data, single.data)


def test_phantom_set_radius_jitter_keeps_rings_inside() -> None:
    samples = generate_phantom_set(8, PhantomSpec(size=24, seed=0), radius_jitter=0.3)
    for s in samples:
        assert s.spec.ring_radii[2] <= 1.0 + 1e-12
    assert len({s.spec.ring_radii for s in samples}) > 1


def test_normalize_maps_each_modality_to_unit_range() -> None:
    data = np.stack([np.arange(6.0).reshape(2, 3) * 10 + 5, np.linspace(-1, 1, 6).reshape(2, 3)])
    out = normalize(Slice(data=data, modality_names=("a", "b")))
    for i in range(2):
        assert out.data[i].min() == 0.0
        assert out.data[i].max() == 1.0
    assert out.warnings == ()


def test_normalize_constant_modality_becomes_zero_with_warning() -> None:
    data = np.stack([np.full((3, 3), 0.7), np.eye(3)])
    out = normalize(Slice(data=data, modality_names=("flat", "eye")))
    assert np.array_equal(out.data[0], np.zeros((3, 3)))
    assert out.warnings == ("constant_modality:flat",)


def test_slice_rejects_mismatched_names_and_non_finite() -> None:
    with pytest.raises(ValidationError):
        Slice(data=np.zeros((2, 3, 3)), modality_names=("only",))
    with pytest.raises(ValidationError):
        Slice(data=np.array([[np.nan]]), modality_names=("a",))


def test_slice_data_is_read_only() -> None:
    slc = Slice(data=np.zeros((4, 4)), modality_names=("a",))
    assert slc.modalities == 1
    with pytest.raises(ValueError):
        slc.data[0, 0, 0] = 1.0


def test_label_mask_rejects_undeclared_ids() -> None:
    with pytest.raises(ValidationError):
        LabelMask(labels=np.array([[0, 7]]))


@pytest.mark.parametrize("fmt", ["png", "pgm"])
def test_write_then_read_is_identity_on_stored_bit_depth(tmp_path: Path, fmt: str) -> None:
    slc, _ = generate_phantom(PhantomSpec(size=20, seed=5, noise_sigma=0.1))
    paths = write_image(slc, tmp_path, fmt=fmt)
    assert [p.name for p in paths] == [f"slice_0_t1.{fmt}", f"slice_1_t2.{fmt}"]
    back = read_image(paths)
    expected = np.rint(slc.data * 65535) / 65535
    assert np.array_equal(back.data, expected)
    assert back.modality_names == ("t1", "t2")
    assert back.value_ranges == ((0.0, 65535.0), (0.0, 65535.0))


def test_eight_bit_png_round_trip(tmp_path: Path) -> None:
    values = np.arange(12, dtype=np.uint16).reshape(3, 4) * 20
    p = tmp_path / "x.png"
    write_raw_image(p, values, bit_depth=8)
    back, maxval = read_raw_image(p)
    assert maxval == 255
    assert np.array_equal(back, values)


def test_hand_written_sixteen_bit_pgm(tmp_path: Path) -> None:
    p = tmp_path / "hand.pgm"
    body = np.array([[0, 1], [256, 65535]], dtype=">u2").tobytes()
    p.write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + body)
    arr, maxval = read_raw_image(p)
    assert maxval == 65535
    assert arr.tolist() == [[0, 1], [256, 65535]]


def test_truncated_pgm_is_rejected(tmp_path: Path) -> None:
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(UnsupportedFormatError):
        read_raw_image(p)


def test_unknown_format_and_missing_file(tmp_path: Path) -> None:
    p = tmp_path / "x.bmp"
    p.write_bytes(b"BM....")
    with pytest.raises(UnsupportedFormatError) as exc:
        read_raw_image(p)
    assert exc.value.exit_code == 3
    with pytest.raises(ImageIOError):
        read_raw_image(tmp_path / "missing.png")


def test_rgb_png_is_not_a_grayscale_slice(tmp_path: Path) -> None:
    p = tmp_path / "rgb.png"
    write_rgb_image(p, np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(UnsupportedFormatError):
        read_raw_image(p)


def test_modalities_with_different_sizes_raise_dimension_mismatch(tmp_path: Path) -> None:
    a = tmp_path / "slice_0_a.png"
    b = tmp_path / "slice_1_b.png"
    write_raw_image(a, np.zeros((4, 4), dtype=np.uint16))
    write_raw_image(b, np.zeros((4, 5), dtype=np.uint16))
    with pytest.raises(DimensionMismatchError) as exc:
        read_image([a, b])
    assert exc.value.exit_code == 2


def test_mask_round_trip(tmp_path: Path) -> None:
    _, mask = generate_phantom(PhantomSpec(size=16))
    p = tmp_path / "mask.png"
    write_mask(mask, p)
    assert np.array_equal(read_mask(p).labels, mask.labels)


def test_sample_dir_round_trip_and_listing(tmp_path: Path) -> None:
    spec = PhantomSpec(size=12, seed=1)
    slc, mask = generate_phantom(spec)
    for name in ("b", "a"):
        d = tmp_path / name
        d.mkdir()
        write_sample_dir(d, slc, mask, spec=spec)
    (tmp_path / "stray").mkdir()

    assert [p.name for p in list_sample_dirs(tmp_path)] == ["a", "b"]
    back, back_mask = read_sample_dir(tmp_path / "a")
    assert back.shape == (12, 12)
    assert np.array_equal(back_mask.labels, mask.labels)
    assert json.loads((tmp_path / "a" / "phantom.json").read_text(encoding="utf-8"))["seed"] == 1


def test_empty_dataset_dir_is_a_validation_error(tmp_path: Path) -> None:
    with pytest.raises(ValidationError):
        list_sample_dirs(tmp_path)

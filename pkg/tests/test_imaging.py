"""Unit tests for image loading, contour blending, and superpixel segmentation."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from graphmatch.exceptions import ImageDecodeError
from graphmatch.imaging import (
    ImageRecord,
    extract_contours,
    load_image,
    slic_segment,
)

DATA = Path(__file__).parent / "data"


def _write_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.round(pixels * 255.0).astype(np.uint8), mode="L").save(path)


def test_load_image_grayscale_range_and_size(tmp_path):
    rng = np.random.default_rng(0)
    src = rng.random((12, 17))
    p = tmp_path / "img.png"
    _write_png(p, src)
    rec = load_image(p, (17, 12), modality="face", subject_id="s1", view="frontal")
    assert rec.pixels.shape == (12, 17)
    assert rec.pixels.dtype == np.float64
    assert rec.pixels.min() >= 0.0 and rec.pixels.max() <= 1.0
    np.testing.assert_allclose(rec.pixels, np.round(src * 255) / 255.0, atol=1e-12)
    assert (rec.modality, rec.subject_id, rec.view) == ("face", "s1", "frontal")
    resized = load_image(p, (8, 6))
    assert resized.pixels.shape == (6, 8)
    assert resized.pixels.min() >= 0.0 and resized.pixels.max() <= 1.0


def test_load_image_errors(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"this is not an image")
    with pytest.raises(ImageDecodeError):
        load_image(bad, (8, 8))
    good = tmp_path / "ok.png"
    _write_png(good, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        load_image(good, (0, 8))


def test_extract_contours_identity_and_constant():
    rng = np.random.default_rng(1)
    img = ImageRecord(rng.random((10, 10)), "face", "s", "v")
    same = extract_contours(img, 0.0)
    np.testing.assert_array_equal(same.pixels, img.pixels)
    const = ImageRecord(np.full((9, 9), 0.4), "face", "s", "v")
    out = extract_contours(const, 0.7)
    np.testing.assert_allclose(out.pixels, 0.3 * 0.4 * np.ones((9, 9)), atol=1e-15)
    with pytest.raises(ValueError):
        extract_contours(img, 1.5)


def test_extract_contours_vertical_step():
    # hand-evaluated Sobel: maxima exactly on the two columns beside the step
    pixels = np.zeros((20, 20))
    pixels[:, 10:] = 1.0
    out = extract_contours(ImageRecord(pixels, "face", "s", "v"), 1.0).pixels
    np.testing.assert_allclose(out[:, [9, 10]], np.ones((20, 2)), atol=1e-15)
    away = np.delete(out, [9, 10], axis=1)
    np.testing.assert_allclose(away, np.zeros_like(away), atol=1e-15)


def _assert_valid_partition(seg, height, width, requested):
    assert seg.labels.shape == (height, width)
    assert seg.n_segments <= requested
    used = np.unique(seg.labels)
    np.testing.assert_array_equal(used, np.arange(seg.n_segments))
    assert int(seg.areas.sum()) == height * width
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for lab in range(seg.n_segments):
        _, n_comp = ndimage.label(seg.labels == lab, structure=structure)
        assert n_comp == 1, f"segment {lab} is disconnected"


def test_slic_single_segment_constant_image():
    img = ImageRecord(np.full((10, 10), 0.6), "face", "s", "v")
    seg = slic_segment(img, 1)
    assert seg.n_segments == 1
    _assert_valid_partition(seg, 10, 10, 1)
    np.testing.assert_allclose(seg.centroids[0], [4.5, 4.5], atol=1e-12)
    np.testing.assert_allclose(seg.mean_intensity[0], 0.6, atol=1e-12)
    np.testing.assert_allclose(seg.std_intensity[0], 0.0, atol=1e-12)
    assert seg.areas[0] == 100


def test_slic_constant_30x30_matches_golden():
    img = ImageRecord(np.full((30, 30), 0.5), "face", "s", "v")
    seg = slic_segment(img, 9, compactness=10.0, iterations=10)
    _assert_valid_partition(seg, 30, 30, 9)
    assert 7 <= seg.n_segments <= 9
    assert np.all(seg.areas >= 50) and np.all(seg.areas <= 150)
    golden = json.loads((DATA / "slic_constant_30x30_9.json").read_text())
    assert seg.n_segments == golden["n_segments"]
    np.testing.assert_array_equal(seg.labels, np.asarray(golden["labels"]))


def test_slic_step_image_boundary_follows_intensity():
    pixels = np.zeros((20, 20))
    pixels[:, 10:] = 1.0
    seg = slic_segment(ImageRecord(pixels, "face", "s", "v"), 2)
    _assert_valid_partition(seg, 20, 20, 2)
    assert seg.n_segments == 2
    # per row, the label switch must sit within one column of the step
    for r in range(20):
        row = seg.labels[r]
        switches = np.nonzero(row[1:] != row[:-1])[0] + 1
        assert len(switches) == 1
        assert abs(int(switches[0]) - 10) <= 1


def test_slic_partition_property_random_image():
    rng = np.random.default_rng(7)
    img = ImageRecord(rng.random((37, 29)), "face", "s", "v")
    seg = slic_segment(img, 12)
    _assert_valid_partition(seg, 37, 29, 12)
    again = slic_segment(img, 12)
    np.testing.assert_array_equal(seg.labels, again.labels)


def test_slic_argument_errors():
    img = ImageRecord(np.zeros((5, 5)), "face", "s", "v")
    with pytest.raises(ValueError):
        slic_segment(img, 0)
    with pytest.raises(ValueError):
        slic_segment(img, 26)

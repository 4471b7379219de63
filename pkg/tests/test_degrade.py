import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cri import degrade
from cri.degrade import DegradationSpec
from cri.errors import InvalidSpecError

SPECS = [
    DegradationSpec("mask", mask=degrade.center_mask(32, 32)),
    DegradationSpec("grayscale"),
    DegradationSpec("downsample", scale=4),
    DegradationSpec("identity"),
]


def test_all_ones_mask_is_identity(rng):
    img = rng.random((8, 8, 3))
    spec = DegradationSpec("mask", mask=np.ones((8, 8)))
    assert np.array_equal(degrade.apply(spec, img), img)


def test_gray_of_white_is_white():
    out = degrade.apply(DegradationSpec("grayscale"), np.ones((1, 1, 3)))
    np.testing.assert_allclose(out, np.ones((1, 1, 3)), atol=1e-15)


def test_box_downsample_of_grid():
    grid = np.arange(1, 17, dtype=float).reshape(4, 4)
    img = np.repeat(grid[:, :, None], 3, axis=2)
    out = degrade.apply(DegradationSpec("downsample", scale=2), img)
    # direct 2x2 means of the row-major 1..16 grid
    oracle = np.array([[np.mean(grid[i:i + 2, j:j + 2]) for j in (0, 2)] for i in (0, 2)])
    assert np.array_equal(oracle, [[3.5, 5.5], [11.5, 13.5]])
    for ch in range(3):
        assert np.array_equal(out[:, :, ch], oracle)


@pytest.mark.parametrize("spec", SPECS[:3], ids=["mask", "grayscale", "downsample"])
def test_linearity_residual(spec, rng):
    for _ in range(5):
        img, p = rng.random((32, 32, 3)), rng.standard_normal((32, 32, 3))
        assert degrade.adjoint_check(spec, img, p) < 1e-10


@pytest.mark.parametrize("spec", SPECS, ids=["mask", "grayscale", "downsample", "identity"])
def test_adjoint_inner_product(spec, rng):
    x = rng.standard_normal((32, 32, 3))
    y = rng.standard_normal(spec.output_shape(x.shape))
    lhs = np.sum(degrade.apply(spec, x) * y)
    rhs = np.sum(x * degrade.adjoint(spec, y, x.shape))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("spec", SPECS[:2], ids=["mask", "grayscale"])
def test_idempotence_exact(spec, rng):
    for _ in range(20):
        once = degrade.apply(spec, rng.random((32, 32, 3)))
        assert np.array_equal(degrade.apply(spec, once), once)


def test_gray_matches_luma_dot(rng):
    img = rng.random((16, 16, 3))
    np.testing.assert_allclose(degrade.apply(DegradationSpec("grayscale"), img)[:, :, 1], img @ degrade.LUMA,
                               rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)))
def test_range_preserved(img):
    for spec in (DegradationSpec("mask", mask=degrade.center_mask(8, 8)), DegradationSpec("grayscale"),
                 DegradationSpec("downsample", scale=2)):
        out = degrade.apply(spec, img)
        assert out.min() >= 0 and out.max() <= 1 + 1e-15


def test_center_mask_area():
    m = degrade.center_mask(32, 32, 0.25)
    assert m.sum() == 32 * 32 - 16 * 16
    assert m[16, 16] == 0 and m[0, 0] == 1


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        DegradationSpec("blur")
    with pytest.raises(InvalidSpecError):
        DegradationSpec("mask")
    with pytest.raises(InvalidSpecError):
        DegradationSpec("downsample")
    with pytest.raises(InvalidSpecError):
        DegradationSpec("downsample", scale=0)
    with pytest.raises(InvalidSpecError):
        DegradationSpec("grayscale", scale=2)
    with pytest.raises(InvalidSpecError):
        DegradationSpec("mask", mask=np.full((4, 4), 0.5))
    with pytest.raises(InvalidSpecError):
        degrade.apply(DegradationSpec("downsample", scale=3), np.zeros((32, 32, 3)))
    with pytest.raises(InvalidSpecError):
        degrade.apply(DegradationSpec("mask", mask=np.ones((8, 8))), np.zeros((32, 32, 3)))
    with pytest.raises(InvalidSpecError):
        degrade.spec_for_task("deblur", 32)


def test_spec_for_task_and_roundtrip():
    sr = degrade.spec_for_task("sr", 32, scale=4)
    assert sr == DegradationSpec("downsample", scale=4)
    assert sr.output_shape((32, 32, 3)) == (8, 8, 3)
    assert degrade.spec_for_task("sr", 32, scale=16).output_shape((32, 32, 3)) == (2, 2, 3)
    for spec in SPECS:
        assert DegradationSpec.from_dict(spec.to_dict()) == spec

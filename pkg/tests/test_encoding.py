import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fogfusion.encoding import (
    CalibrationModel,
    EncoderConfig,
    GatedSlices,
    LidarPointSet,
    RadarScan,
    project_lidar,
    replicate_radar,
    warp_gated,
    warp_image,
)

CAL = CalibrationModel.default()
H, W = 96, 192


def test_on_axis_point_lands_on_principal_point():
    img = project_lidar(LidarPointSet([[25.0, 0.0, 0.0, 0.7]]), CAL)
    nz = np.argwhere(img[0] > 0)
    assert nz.tolist() == [[H // 2, W // 2]]
    assert img[0, H // 2, W // 2] == pytest.approx(25.0 / EncoderConfig().lidar_max_range)
    assert img[2, H // 2, W // 2] == pytest.approx(0.7)


def test_empty_inputs_give_zero_planes():
    assert not project_lidar(LidarPointSet(np.zeros((0, 4))), CAL).any()
    assert not replicate_radar(RadarScan(np.zeros((0, 4))), CAL).any()
    assert project_lidar(np.zeros((0, 4)), CAL).shape == (3, H, W)


def test_points_behind_or_beyond_range_are_dropped():
    pts = [[-10.0, 0, 0, 1], [500.0, 0, 0, 1]]
    assert not project_lidar(LidarPointSet(pts), CAL).any()


@settings(max_examples=200, deadline=None)
@given(st.floats(2.0, 100.0), st.floats(2.0, 100.0), st.floats(-0.15, 0.15), st.floats(-0.05, 0.05),
       st.floats(0, 1), st.floats(0, 1), st.booleans())
def test_nearest_point_wins(r1, r2, ay, az, i1, i2, swap):
    """Two points on one camera ray: the pixel holds the nearer point's triple, regardless of input order."""
    assume(abs(r1 - r2) > 1e-6)
    d = np.array([1.0, ay, az]) / np.linalg.norm([1.0, ay, az])
    p1, p2 = np.r_[r1 * d, i1], np.r_[r2 * d, i2]
    pts = [p2, p1] if swap else [p1, p2]
    img = project_lidar(LidarPointSet(pts), CAL)
    near = p1 if r1 <= r2 else p2
    alone = project_lidar(LidarPointSet([near]), CAL)
    np.testing.assert_array_equal(img, alone)


def test_equal_range_tie_is_order_independent():
    a, b = [20.0, 0, 0, 0.1], [20.0, 0, 0, 0.9]
    np.testing.assert_array_equal(project_lidar(LidarPointSet([a, b]), CAL), project_lidar(LidarPointSet([b, a]), CAL))


def test_two_points_one_pixel_example():
    img = project_lidar(LidarPointSet([[30.0, 0, 0, 0.2], [10.0, 0, 0, 0.9]]), CAL)
    assert img[0, H // 2, W // 2] == pytest.approx(10 / 120)
    assert img[2, H // 2, W // 2] == pytest.approx(0.9)


def test_radar_center_column():
    img = replicate_radar(RadarScan([[0.0, 40.0, 0.0, 0.8]]), CAL)
    cols = np.flatnonzero(img[0].any(axis=0))
    assert cols.tolist() == [W // 2]
    np.testing.assert_allclose(img[0, :, W // 2], 40 / 200)
    np.testing.assert_allclose(img[1, :, W // 2], 0.8)


def test_radar_positive_azimuth_is_left():
    img = replicate_radar(RadarScan([[10.0, 40.0, 0.0, 0.8]]), CAL)
    assert np.flatnonzero(img[0].any(axis=0))[0] < W // 2


@pytest.mark.parametrize("swap", [False, True])
def test_radar_nearest_in_column(swap):
    dets = [[0.0, 20.0, 0.0, 0.3], [0.0, 50.0, 0.0, 0.9]]
    img = replicate_radar(RadarScan(dets[::-1] if swap else dets), CAL)
    assert img[0, 0, W // 2] == pytest.approx(0.1)
    assert img[1, 0, W // 2] == pytest.approx(0.3)


def test_radar_target_limit():
    with pytest.raises(ValueError):
        RadarScan(np.zeros((101, 4)))


def _smooth(h, w):
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    return np.stack([0.5 + 0.4 * np.sin(2 * xx + yy), 0.5 + 0.3 * np.cos(3 * yy), 0.3 + 0.4 * xx * yy]).astype(np.float32)


def test_identity_homography():
    img = _smooth(40, 60)
    np.testing.assert_allclose(warp_image(img, np.eye(3), (40, 60)), img, atol=1e-6)


def test_translation_leaves_zero_border():
    img = _smooth(40, 60) + 0.05
    out = warp_image(img, np.array([[1.0, 0, 5], [0, 1, 0], [0, 0, 1]]), (40, 60))
    assert not out[:, :, :5].any()
    np.testing.assert_allclose(out[:, :, 5:], img[:, :, :-5], atol=1e-6)


def test_projective_round_trip_psnr():
    img = _smooth(80, 120)
    h = np.array([[1.02, 0.03, 2.0], [-0.02, 0.98, 1.5], [1e-4, -5e-5, 1.0]])
    fwd = warp_image(img, h, (80, 120))
    back = warp_image(fwd, np.linalg.inv(h), (80, 120))
    # compare away from the border, where the forward warp had no source
    inner = (slice(None), slice(6, -6), slice(6, -6))
    mse = np.mean((back[inner] - img[inner]) ** 2)
    assert 10 * np.log10(1.0 / mse) > 30


def test_singular_homography_rejected():
    with pytest.raises(ValueError, match="singular"):
        warp_gated(GatedSlices(np.zeros((3, 4, 4)), np.zeros((3, 3))), (8, 8))


def test_gated_homography_maps_principal_points():
    p = CAL.gated_homography() @ np.array([CAL.gated.cx, CAL.gated.cy, 1.0])
    assert p[:2] / p[2] == pytest.approx([CAL.camera.cx, CAL.camera.cy])

import math

import numpy as np
import pytest

from fogfusion.encoding import CalibrationModel, LidarPointSet
from fogfusion.entropy import mean_entropy
from fogfusion.weather import (
    AIRLIGHT,
    SceneObject,
    SceneSpec,
    WeatherCondition,
    apply_condition,
    apply_fog,
    apply_night,
    apply_snow_rain,
    fog_transmission,
    random_scene,
    render_clear,
)

CAL = CalibrationModel.default()


def _car(x, y=0.0, z=0.0):
    return SceneObject("car", (x, y, z), (4.0, 1.8, 1.5))


@pytest.fixture(scope="module")
def scene_frame():
    return render_clear(random_scene(3), CAL)


def _frames_equal(a, b):
    return (np.array_equal(a.camera, b.camera) and np.array_equal(a.lidar.points, b.lidar.points)
            and np.array_equal(a.radar.detections, b.radar.detections) and np.array_equal(a.gated.images, b.gated.images)
            and a.boxes == b.boxes)


def test_single_car_on_axis():
    f = render_clear(SceneSpec(seed=1, objects=[_car(20.0)]), CAL)
    assert len(f.boxes) == 1
    x1, y1, x2, y2 = f.boxes[0].box
    assert (x1 + x2) / 2 == pytest.approx(CAL.camera.cx, abs=1e-6)
    assert (y1 + y2) / 2 == pytest.approx(CAL.camera.cy, abs=1e-6)
    assert f.boxes[0].occlusion == 0.0 and f.boxes[0].truncation == 0.0
    pts = f.lidar.points
    u, v, _ = CAL.project(pts[:, :3])
    inside = (u >= x1) & (u < x2) & (v >= y1) & (v < y2)
    r = np.linalg.norm(pts[inside, :3], axis=1)
    assert inside.sum() > 10
    # the visible faces sit between 18 m (front) and 22 m (rear corners)
    assert np.all(np.abs(r - 20.0) < 2.2)


def test_empty_scene_has_only_ground():
    f = render_clear(SceneSpec(seed=2), CAL)
    assert f.boxes == []
    z = f.lidar.points[:, 2]
    assert len(z) > 0 and np.allclose(z, -1.6, atol=0.2)


def test_occlusion_matches_zbuffer_count():
    front, rear = _car(12.0), _car(25.0, z=1.5)
    both = render_clear(SceneSpec(seed=4, objects=[front, rear]), CAL)
    rear_only = render_clear(SceneSpec(seed=4, objects=[rear]), CAL)
    empty = render_clear(SceneSpec(seed=4), CAL)
    rear_px = rear_only.depth < empty.depth
    visible = rear_px & (both.depth == rear_only.depth)
    oracle = 1.0 - visible.sum() / rear_px.sum()
    assert len(both.boxes) == 2
    assert 0.0 < oracle < 1.0
    assert both.boxes[1].occlusion == pytest.approx(oracle, abs=1e-9)
    assert both.boxes[0].occlusion == 0.0


def test_render_deterministic():
    spec = random_scene(11)
    assert _frames_equal(render_clear(spec, CAL), render_clear(random_scene(11), CAL))


def test_conditions_deterministic(scene_frame):
    for cond in (WeatherCondition.fog(40), WeatherCondition("snow_rain", clutter_rate=300),
                 WeatherCondition(ambient_light=0.3)):
        assert _frames_equal(apply_condition(scene_frame, cond), apply_condition(scene_frame, cond))


def test_fog_clear_limit_is_identity(scene_frame):
    out = apply_fog(scene_frame, math.inf)
    assert _frames_equal(out, scene_frame)


def test_fog_transmission_closed_form():
    assert fog_transmission(25.0, 50.0) == pytest.approx(20 ** -0.5)
    assert fog_transmission(25.0, 50.0) == pytest.approx(0.2236, abs=1e-4)
    assert fog_transmission(100.0, math.inf) == 1.0


def test_fog_camera_follows_koschmieder(scene_frame):
    out = apply_fog(scene_frame, 50.0)
    t = fog_transmission(scene_frame.depth, 50.0)
    expect = scene_frame.camera * t[None] + AIRLIGHT * (1 - t[None])
    np.testing.assert_allclose(out.camera, expect, atol=1e-6)


def test_dense_fog_collapses_lidar_range(scene_frame):
    out = apply_fog(scene_frame, 40.0)
    assert np.linalg.norm(out.lidar.points[:, :3], axis=1).max() <= 20.0
    assert out.weather.kind == "dense_fog"


def test_fog_keeps_radar_and_boxes(scene_frame):
    out = apply_fog(scene_frame, 30.0)
    np.testing.assert_array_equal(out.radar.detections, scene_frame.radar.detections)
    assert out.boxes == scene_frame.boxes


def test_fog_needs_depth(scene_frame):
    with pytest.raises(ValueError, match="depth"):
        apply_fog(scene_frame.replace(depth=None), 50.0)


def test_night_full_ambient_is_camera_identity_up_to_noise(scene_frame):
    out = apply_night(scene_frame, 1.0)
    assert np.abs(out.camera - scene_frame.camera).max() < 0.15
    assert np.abs(out.camera - scene_frame.camera).mean() < 0.02


def test_night_asymmetry(scene_frame):
    dark = apply_night(scene_frame, 0.0)
    assert mean_entropy(dark.camera) < 0.2 * mean_entropy(scene_frame.camera)
    np.testing.assert_array_equal(dark.lidar.points, scene_frame.lidar.points)


def test_night_sweep_is_monotone():
    ambients = [1.0, 0.8, 0.6, 0.4, 0.2, 0.0]
    frames = [render_clear(random_scene(s), CAL) for s in range(5)]
    curve = [np.mean([mean_entropy(apply_night(f, a).camera) for f in frames]) for a in ambients]
    assert all(b <= a + 1e-9 for a, b in zip(curve, curve[1:]))


def test_snow_rate_zero_is_identity(scene_frame):
    assert apply_snow_rain(scene_frame, 0.0) is scene_frame


def test_snow_clutter_count_scales_with_rate():
    base = render_clear(SceneSpec(seed=5), CAL)
    base = base.replace(lidar=LidarPointSet(np.zeros((0, 4))))
    counts = {}
    for rate in (50.0, 100.0):
        counts[rate] = np.mean([len(apply_snow_rain(base.replace(seed=s), rate).lidar.points) for s in range(100)])
    assert counts[100.0] / counts[50.0] == pytest.approx(2.0, rel=0.05)


def test_streak_pixels_take_streak_value(scene_frame):
    out = apply_snow_rain(scene_frame, 200.0)
    changed = np.any(out.camera != scene_frame.camera, axis=0)
    assert changed.any()
    vals = out.camera[:, changed]
    assert np.all(vals >= 0.8) and np.all(vals[0] == vals[1]) and np.all(vals[1] == vals[2])


def test_weather_condition_validation():
    with pytest.raises(ValueError):
        WeatherCondition("dense_fog", 300.0)
    with pytest.raises(ValueError):
        WeatherCondition("hail")
    with pytest.raises(ValueError):
        WeatherCondition(ambient_light=1.5)
    assert WeatherCondition.fog(300).kind == "light_fog"

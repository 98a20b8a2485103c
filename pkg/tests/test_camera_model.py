import numpy as np
import pytest

from rsdso import camera_model as cam


def make_cam(distortion=(-0.2, 0.05, 1e-3, -5e-4)):
    return cam.CameraIntrinsics(300.0, 310.0, 159.5, 119.5, 320, 240, 1e-4, distortion)


def test_project_unproject_round_trip():
    c = make_cam(())
    rng = np.random.default_rng(0)
    px = rng.uniform([0, 0], [319, 239], size=(100, 2))
    d = rng.uniform(0.2, 2.0, size=100)
    X = cam.unproject(px, d, c)
    assert np.abs(1.0 / X[:, 2] - d).max() < 1e-12
    assert np.abs(cam.project(X, c) - px).max() < 1e-10


def test_project_behind_camera_raises():
    with pytest.raises(cam.BehindCameraError):
        cam.project(np.array([0.0, 0.0, -1.0]), make_cam(()))


def test_undistort_inverts_distort():
    c = make_cam()
    rng = np.random.default_rng(1)
    px = rng.uniform([0, 0], [319, 239], size=(200, 2))
    assert np.abs(cam.undistort(cam.distort(px, c), c) - px).max() < 1e-7


def test_distort_jacobian_finite_difference():
    c = make_cam()
    px = np.array([[30.0, 200.0], [160.0, 120.0], [300.0, 10.0]])
    J = cam.distort_jacobian(px, c)
    eps = 1e-5
    for k in range(2):
        d = np.zeros(2)
        d[k] = eps
        fd = (cam.distort(px + d, c) - cam.distort(px - d, c)) / (2 * eps)
        assert np.abs(fd - J[:, :, k]).max() < 1e-7


def test_strong_distortion_domain_error():
    c = cam.CameraIntrinsics(100.0, 100.0, 159.5, 119.5, 320, 240, 0.0, (-2.0, 0.0, 0.0, 0.0))
    with pytest.raises(cam.DistortionDomainError):
        cam.distort(np.array([209.5, 119.5]), c)


def test_row_time_without_distortion_is_row_offset():
    c = make_cam(())
    rmap = cam.build_row_time_map(c)
    assert cam.row_time(np.array([10.0, 120.0]), rmap) == pytest.approx(0.0)
    assert cam.row_time(np.array([10.0, 37.25]), rmap) == pytest.approx(37.25 - 120.0)
    with pytest.raises(cam.OutOfImageError):
        cam.row_time(np.array([-1.0, 5.0]), rmap)


def test_row_time_map_follows_distorted_row():
    c = make_cam()
    rmap = cam.build_row_time_map(c)
    px = np.array([52.0, 31.0])
    assert cam.row_time(px, rmap) == pytest.approx(cam.distort(px, c)[1] - c.y0_distorted, abs=1e-9)


def test_scaled_intrinsics():
    s = make_cam(()).scaled(2)
    assert (s.width, s.height) == (80, 60)
    assert s.fx == pytest.approx(75.0)
    assert s.cx == pytest.approx((159.5 + 0.5) / 4 - 0.5)


def test_invalid_intrinsics_rejected():
    with pytest.raises(ValueError):
        cam.CameraIntrinsics(-1.0, 1.0, 1.0, 1.0, 10, 10, 0.0)
    with pytest.raises(ValueError):
        cam.CameraIntrinsics(1.0, 1.0, 1.0, 1.0, 10, 10, -1.0)
    with pytest.raises(ValueError):
        cam.CameraIntrinsics(1.0, 1.0, 1.0, 1.0, 10, 10, 0.0, (0.1,))


def test_calibration_round_trip(tmp_path):
    c = make_cam()
    path = tmp_path / "calib.txt"
    cam.write_calibration(path, c)
    assert cam.read_calibration(path) == c


@pytest.mark.parametrize("text", [
    "pinhole 1 1 1 1\nsize 10 10\n",
    "pinhole 1 1 1\nsize 10 10\nrow_time_delta 0\n",
    "pinhole 1 1 1 1\nsize 10 10\nrow_time_delta 0\nfoo 1\n",
    "pinhole 1 1 1 1\npinhole 1 1 1 1\nsize 10 10\nrow_time_delta 0\n",
    "pinhole 1 1 1 1\nsize 10 10\nrow_time_delta x\n",
])
def test_calibration_errors(tmp_path, text):
    path = tmp_path / "calib.txt"
    path.write_text(text)
    with pytest.raises(cam.CalibrationFormatError):
        cam.read_calibration(path)

import numpy as np
import pytest

from lidar_pms.calib_io import Calibration

# Published rectified projections and extrinsics of a KITTI raw drive (2011_09_26).
KITTI_CAM_TO_CAM = """\
calib_time: 09-Jan-2012 13:57:47
corner_dist: 9.950000e-02
S_rect_02: 1.242000e+03 3.750000e+02
R_rect_00: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
P_rect_02: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
P_rect_03: 7.215377e+02 0.000000e+00 6.095593e+02 -3.395242e+02 0.000000e+00 7.215377e+02 1.728540e+02 2.199936e+00 0.000000e+00 0.000000e+00 1.000000e+00 2.729905e-03
"""

KITTI_VELO_TO_CAM = """\
calib_time: 15-Mar-2012 11:37:16
R: 7.533745e-03 -9.999714e-01 -6.166020e-04 1.480249e-02 7.280733e-04 -9.998902e-01 9.998621e-01 7.523790e-03 1.480755e-02
T: -4.069766e-03 -7.631618e-02 -2.717806e-01
delta_f: 0.000000e+00 0.000000e+00
delta_c: 0.000000e+00 0.000000e+00
"""


@pytest.fixture
def kitti_calib_files(tmp_path):
    cam = tmp_path / "calib_cam_to_cam.txt"
    velo = tmp_path / "calib_velo_to_cam.txt"
    cam.write_text(KITTI_CAM_TO_CAM)
    velo.write_text(KITTI_VELO_TO_CAM)
    return cam, velo


@pytest.fixture(scope="session")
def simple_calib():
    return Calibration.from_intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=40.0, baseline=0.5, width=100, height=80)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

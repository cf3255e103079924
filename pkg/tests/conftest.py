import numpy as np
import pytest

from flownorm.datasets import SyntheticScene, render_pair
from flownorm.flow import ground_truth_flow
from flownorm.geometry import CameraIntrinsics, SE3Pose
from flownorm.imagedata import build_pyramid
from flownorm.residuals import PointSet, select_points

GT_MOTION = (0.05, 0.02, 0.03, 0.01, -0.02, 0.01)


class Pair:
    def __init__(self, depth_model="slanted", seed=1, motion=GT_MOTION, n_points=600):
        self.scene = SyntheticScene(seed=seed, depth_model=depth_model)
        self.K = self.scene.intrinsics
        self.T_gt = SE3Pose.exp(motion)
        self.src, self.tgt, self.dense_flow, self.visible = render_pair(self.scene, self.T_gt)
        self.Ps = build_pyramid(self.src.image)
        self.Pt = build_pyramid(self.tgt.image)
        self.points = select_points(self.Ps, self.src.depth, 0, n_points)
        self.gt_flow = ground_truth_flow(self.src.depth, self.T_gt, self.K, depth_t=self.tgt.depth)


@pytest.fixture(scope="session")
def pair():
    return Pair()


@pytest.fixture(scope="session")
def make_pair():
    cache = {}

    def make(**kw):
        key = tuple(sorted(kw.items()))
        if key not in cache:
            cache[key] = Pair(**kw)
        return cache[key]

    return make


class ShiftPair(Pair):
    """Fronto-parallel plane shifted by exactly 16 px: every pyramid level is an integer shift."""

    def __init__(self):
        super().__init__("fronto-parallel", seed=3, motion=(0.128, 0, 0, 0, 0, 0))
        # keep points clear of the blank band the shift leaves at the right edge
        keep = self.points.pixels[:, 0] < 280
        self.points = PointSet(self.points.pixels[keep], self.points.inverse_depths[keep])


@pytest.fixture(scope="session")
def shift_pair():
    return ShiftPair()


@pytest.fixture
def K():
    return CameraIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240)


def random_pose(rng, rot_scale=0.2, trans_scale=0.2):
    return SE3Pose.exp(np.r_[rng.normal(0, trans_scale, 3), rng.normal(0, rot_scale, 3)])

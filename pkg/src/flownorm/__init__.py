"""Direct photometric pose tracking with a flow-guided robust norm."""

from .errors import FlowNormError, InputError
from .flow import FlowField, FlowProviderConfig, make_flow
from .geometry import CameraIntrinsics, SE3Pose
from .imagedata import GrayImage, build_pyramid
from .residuals import PointSet, select_points
from .robustnorm import FlowNormParams, flow_norm_factor
from .solver import AlignmentResult, SolverConfig, solve_joint, solve_pose

__version__ = "0.1.0"

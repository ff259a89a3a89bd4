"""Pattern-free extrinsic calibration for four-camera surround-view fisheye rigs."""

from .camera_model import (
    FisheyeIntrinsics,
    PixelPoint,
    UnitRay,
    forward_polynomial,
    invert_polynomial,
    pixel_to_ray,
    ray_to_pixel,
)
from .rig_geometry import (
    Camera,
    CameraRig,
    Extrinsics,
    GroundIntersection,
    GroundPoint,
    Quaternion,
    camera_to_vehicle,
    ground_to_pixel,
    pixel_to_ground,
    quat_to_matrix,
    vehicle_to_camera,
)
from .calibration import (
    CalibrationProblem,
    CalibrationResult,
    KeypointPair,
    SolverConfig,
    calibrate,
    decode_params,
    encode_params,
    objective,
    reprojection_error,
)
from .metrics import MdeReport, mde, photometric_error
from .bev_renderer import BevConfig, BevImage, BevLayer, bev_pixel_to_ground, ground_to_bev_pixel, render_bev
from .synthetic import (
    PoseErrorReport,
    RoughnessSpec,
    SyntheticRigSpec,
    apply_height_noise,
    generate_keypoints,
    iri_height_bound,
    make_rig,
    perturb_rig,
    pose_error,
)

__version__ = "0.1.0"

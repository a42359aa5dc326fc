"""flatsplat: CPU differentiable flat-Gaussian splatting with multi-view
distance and normal regularization, TSDF meshing, and evaluation tools."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Camera,
    CameraIntrinsics,
    CameraPose,
    RelativePose,
    backproject,
    plane_homography,
    project,
    ray_grid,
    relative_pose,
    transform_point,
    warp_pixel,
)
from .scene import (  # noqa: F401
    FlatGaussian,
    GaussianScene,
    covariance3d,
    gaussian_normal,
    plane_distance,
    project_covariance,
)
from .renderer import (  # noqa: F401
    MapAdjoints,
    RenderBuffers,
    SplatGradients,
    evaluate_alpha,
    render,
    render_backward,
)

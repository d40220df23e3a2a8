"""Rigid-motion invariant association of depth superpixels between two range views."""

__version__ = "0.1.0"

import warnings

# numba falls back to another threading layer on its own
warnings.filterwarnings("ignore", message="The TBB threading layer")

from .assoc import (  # noqa: E402
    Association,
    AssociationSet,
    associate,
    build_mean_index,
    estimate_transform_ransac,
    evaluate,
    kabsch,
)
from .geometry import FeatureSet, RelFeature, ViewFeatures, view_features  # noqa: E402
from .matching import EditCosts, MatchTolerances, compare_rdl, order_sequence, order_view  # noqa: E402
from .rangeio import CameraIntrinsics, OrganizedCloud, RangeImage, backproject, estimate_normals  # noqa: E402
from .segment import Decomposition, SegmentParams, Superpixel, decompose  # noqa: E402
from .transform import RigidTransform  # noqa: E402

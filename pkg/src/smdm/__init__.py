"""Statistical multi-organ deformation modeling: Laplacian mesh registration,
deformation modes and kernel regression of target motion from organ features."""

from .cohort import ORGANS, TARGET, Cohort
from .errors import (ConfigError, MeshError, ModelError, NonManifoldEdgeError, OpenMeshError,
                     RegistrationError, ResampleError, SizeMismatchError, SmdmError)
from .mesh import SurfaceMesh, laplacian_operator
from .registration import RegistrationParams, affine_prealign, ldsm_register

__version__ = "0.1.0"

__all__ = [
    "ORGANS", "TARGET", "Cohort", "SurfaceMesh", "laplacian_operator", "RegistrationParams",
    "affine_prealign", "ldsm_register", "ConfigError", "MeshError", "ModelError",
    "NonManifoldEdgeError", "OpenMeshError", "RegistrationError", "ResampleError",
    "SizeMismatchError", "SmdmError",
]

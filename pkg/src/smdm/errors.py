"""Exception hierarchy shared by all modules."""


class SmdmError(Exception):
    """Base class for every error raised by this package."""


class MeshError(SmdmError):
    """Invalid mesh input (index range, degenerate faces, topology)."""


class NonManifoldEdgeError(MeshError):
    def __init__(self, edge, count):
        self.edge = tuple(int(v) for v in edge)
        self.count = int(count)
        super().__init__(
            f"non-manifold edge {self.edge}: shared by {self.count} triangles"
        )


class OpenMeshError(MeshError):
    """Operation needs a watertight mesh."""


class SizeMismatchError(SmdmError, ValueError):
    pass


class RegistrationError(SmdmError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (outer iteration {iteration})"
        super().__init__(message)


class ResampleError(SmdmError):
    pass


class ModelError(SmdmError):
    """Statistical / regression model misuse or numerical breakdown."""


class ConfigError(SmdmError):
    pass

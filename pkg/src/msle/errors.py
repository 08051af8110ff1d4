"""Exception types shared across the package."""


class MsleError(Exception):
    """Base class for all package-specific errors."""


class SwallowedPoint(MsleError):
    """A point's image entered the hull during chain evaluation."""


class BranchFailure(MsleError):
    """An inverse slit-map step left the upper half plane (eps too large)."""


class CoincidentPoints(MsleError):
    """Two evaluation points coincide where a kernel is singular."""


class MarkCollision(MsleError):
    """A boundary mark image is too close to the driving value."""


class HullCollision(MsleError):
    """The simulated curve entered the mass support."""


class SingularSystem(MsleError):
    """A linear solve failed; signals grid or domain pathology."""


class MissingReference(MsleError):
    """A normalized partition value was requested without its t=0 reference."""


class StepLimit(MsleError):
    """A sampled walk exceeded the configured step cap."""


class MarkSwallowed(MsleError):
    """The hull reached the marked boundary arc (legitimate dipolar stop)."""


class EmptyArc(MsleError):
    """A boundary arc selection matched no lattice sites."""


class SideAmbiguous(MsleError):
    """A probe is too close to the trace polyline to classify by side."""


class ConfigError(MsleError):
    """A run configuration file failed to parse or validate."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{where} {message}".strip())

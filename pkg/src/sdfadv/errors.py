"""Exception types shared across the package."""


class DegenerateBeam(ValueError):
    """A beam whose endpoint coincides with its sensor origin."""


class RankDeficient(ValueError):
    """Not enough non-degenerate directions to build the requested subspace."""


class InvalidShape(ValueError):
    """Decoder parameters fell outside the domain where the SDF is defined."""


class ObjectAtSensor(RuntimeError):
    """The inserted object contains a sensor origin (placed inside the minimum range)."""


class SurfaceNotFound(RuntimeError):
    """Bisection finished without reaching the surface tolerance."""


class ScoreOutOfRange(ValueError):
    """A detection score outside the open interval (0, 1)."""


class InfeasibleStart(RuntimeError):
    """The starting shape/pose violates a realism constraint."""


class DegenerateRadius(ValueError):
    """Random baseline requested with a zero perturbation radius."""


class EmptyOutcomes(ValueError):
    """A recall curve was requested over zero trials."""


class Diverged(RuntimeError):
    """Shape reconstruction objective blew up."""

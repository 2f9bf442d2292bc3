"""Exception hierarchy shared by every forcekit module."""


class ForcekitError(Exception):
    """Base class for all errors raised by forcekit."""


class ShapeMismatch(ForcekitError, ValueError):
    pass


class NonFiniteCoordinate(ForcekitError, ValueError):
    pass


class SpeciesMismatch(ForcekitError, ValueError):
    pass


class OverlappingAtoms(ForcekitError, ValueError):
    pass


class InvalidMolecule(ForcekitError, ValueError):
    pass


class NonFiniteGradient(ForcekitError, FloatingPointError):
    """A gradient contained NaN or Inf. ``index`` is the flat index of the first offender."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StaleRecording(ForcekitError, RuntimeError):
    pass


class MissingLabels(ForcekitError, ValueError):
    pass


class EmptyDataset(ForcekitError, ValueError):
    pass


class TooShort(ForcekitError, ValueError):
    pass


class MissingInitialEnergy(ForcekitError, ValueError):
    pass


class DegenerateFit(ForcekitError, ValueError):
    pass


class SimulationDiverged(ForcekitError, FloatingPointError):
    """MD state left the finite/bounded region.

    ``step`` is the MD step at which the guard tripped and ``partial`` holds
    the trajectory recorded up to that point (may be ``None`` when raised
    from a single integrator step).
    """

    def __init__(self, message, step, partial=None):
        super().__init__(message)
        self.step = step
        self.partial = partial


class ParseError(ForcekitError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InconsistentSpecies(ParseError):
    pass


class EmptyTrajectory(ForcekitError, ValueError):
    pass

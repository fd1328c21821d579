"""Exception types shared across the package."""


class MPMError(Exception):
    """Base class for solver and configuration failures."""


class ConfigError(MPMError):
    """Invalid configuration; ``path`` is the dotted key path.

    Syntax errors carry ``line`` and ``column``; ``errors`` lists every
    ``(path, message)`` pair found when more than one key is wrong.
    """

    def __init__(self, path, message, line=None, column=None, errors=None):
        self.path = path
        self.line = line
        self.column = column
        self.errors = list(errors) if errors else [(path, message)]
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{path}{where}: {message}")


class GridEscapeError(MPMError):
    def __init__(self, particle, position):
        self.particle = particle
        x, y = (float(v) for v in position)
        super().__init__(f"particle {particle} at ({x:.6g}, {y:.6g}) left the "
                         "background grid; enlarge the grid")


class InvertedStateError(MPMError):
    def __init__(self, particle, det_F):
        self.particle = particle
        self.det_F = det_F
        super().__init__(f"particle {particle} inverted (det F = {det_F:.3e})")


class ConvergenceError(MPMError):
    def __init__(self, message, history=(), step=None):
        self.history = list(history)
        self.step = step
        super().__init__(message)


class LinearSolveError(MPMError):
    pass


class AdjointError(MPMError):
    pass


class DeterminismError(MPMError):
    pass


class DegenerateDesignError(MPMError):
    pass


class VerificationError(MPMError):
    """A self-check (gradient oracle, stride independence) did not pass."""

"""Exception hierarchy shared by every module of the solver."""


class SolverError(Exception):
    """Base class for all errors raised by ipcdiff."""


class InvertedRestElement(SolverError):
    pass


class NonManifold(SolverError):
    pass


class DegenerateElement(SolverError):
    pass


class NonPositiveDeterminant(SolverError):
    pass


class NonPositiveDistance(SolverError):
    pass


class DegenerateEdge(SolverError):
    pass


class NewtonDivergence(SolverError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SingularSystem(SolverError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class LineSearchFailure(SolverError):
    pass


class ForwardSolveFailure(SolverError):
    pass


class SchemaError(SolverError):
    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


class DanglingReference(SchemaError):
    pass


class UnknownKind(SolverError):
    pass

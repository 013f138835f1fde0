"""Exception hierarchy shared across the package."""


class SceneLinkError(Exception):
    """Base class for all package errors."""


class ParseError(SceneLinkError):
    """Malformed record in an input file. Carries table/section and offset."""

    def __init__(self, message: str, *, table: str | None = None, offset=None):
        detail = message
        if table is not None:
            detail = f"{table}: {detail}"
        if offset is not None:
            detail = f"{detail} (record offset {offset})"
        super().__init__(detail)
        self.table = table
        self.offset = offset


class SchemaError(SceneLinkError):
    """Input file is structurally valid but missing required fields."""


class IntegrityError(SceneLinkError):
    """Referential integrity violated between records."""


class ValidationError(SceneLinkError):
    """A value violates a documented invariant."""


class BindingError(SceneLinkError):
    """A manifest entry references a name that does not exist in the model."""


class InsufficientViewsError(SceneLinkError):
    """Fewer observations than triangulation requires."""


class DegenerateGeometryError(SceneLinkError):
    """Geometry too ill-conditioned to solve (near-parallel rays, collinear points, ...)."""


class NonConvergedError(SceneLinkError):
    """Iterative refinement failed to converge. Carries the last residual."""

    def __init__(self, message: str, last_rms: float):
        super().__init__(f"{message} (last rms {last_rms:.6g})")
        self.last_rms = last_rms


class ConflictError(SceneLinkError):
    """Mutation conflicts with current aggregate state (double fulfillment, stale version)."""


class UnknownIdError(SceneLinkError):
    """Lookup of a scene/issue/element/part id that does not exist."""

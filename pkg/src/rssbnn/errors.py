"""Exception types shared across the package."""


class RssbnnError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(RssbnnError):
    """Operands have incompatible shapes."""


class DomainError(RssbnnError):
    """A value lies outside the mathematical domain of an operation."""


class NonFiniteValue(RssbnnError):
    """A forward pass produced NaN or Inf."""


class NonScalarRoot(RssbnnError):
    """backward() was called on a node that is not scalar-valued."""


class DegenerateGroup(RssbnnError):
    """A weight group has size zero."""


class LabelDomain(RssbnnError):
    """Labels are not binary 0/1."""


class EmptyRecord(RssbnnError):
    """An incident record contains no events."""


class DegenerateLabels(RssbnnError):
    """An operation requires both classes but got a single-class input."""


class Divergence(RssbnnError):
    """Training loss became non-finite."""


class SchemaMismatch(RssbnnError):
    """A file or dataset does not match the expected schema."""


class InvalidConfig(RssbnnError):
    """A configuration value is out of range or inconsistent."""

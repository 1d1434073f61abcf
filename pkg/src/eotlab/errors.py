"""Exception types shared across the package."""

from __future__ import annotations


class EotlabError(Exception):
    """Base class for all package errors."""


class ConfigError(EotlabError):
    """Invalid configuration or input file."""


class DomainError(EotlabError):
    """A precondition on an operation's inputs was violated."""


class MassMismatchError(DomainError):
    """Marginal total masses differ beyond tolerance."""


class SmallnessError(DomainError):
    """The configured smallness threshold for an improvement step was exceeded."""


class AdmissibilityError(DomainError):
    """A rescaling left the configured admissibility windows."""


class CertificateError(EotlabError):
    """An optimality certificate (dual feasibility / gap) failed to verify."""

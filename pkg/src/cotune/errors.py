"""Exception hierarchy. ``InputError`` maps to CLI exit code 1."""


class CotuneError(Exception):
    pass


class InputError(CotuneError, ValueError):
    """Malformed or inconsistent user input (files, tables, plans)."""


class MembershipError(InputError):
    """A configuration is not a member of the search space."""


class RepositoryFormatError(InputError):
    """A stored run document cannot be parsed."""


class FitError(CotuneError, RuntimeError):
    """The kernel matrix stayed singular after jitter escalation."""

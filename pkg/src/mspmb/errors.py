"""Exception types shared across the package."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class DegeneracyError(ArithmeticError):
    """Raised when a covariance or innovation matrix is numerically singular."""

    def __init__(self, message, component=None):
        if component is not None:
            message = f"{message} (component: {component})"
        super().__init__(message)
        self.component = component


class AssociationTooLarge(ContractError):
    """Exact enumeration was requested for a problem beyond the factorial guard."""

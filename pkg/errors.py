"""Exception hierarchy for the MDIQKD toolkit."""

from typing import Optional, Tuple


class MDIQKDError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MDIQKDError, ValueError):
    """Invalid or incomplete configuration."""


class DomainError(MDIQKDError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ValidationError(MDIQKDError, ValueError):
    """Table data failed validation.

    ``cell`` is ``(basis, alice_intensity, bob_intensity)`` when the
    problem can be pinned to a single table cell.
    """

    def __init__(self, message: str, cell: Optional[Tuple[str, str, str]] = None) -> None:
        if cell is not None:
            message = f"{message} [cell basis={cell[0]} alice={cell[1]} bob={cell[2]}]"
        super().__init__(message)
        self.cell = cell


class PrecisionError(MDIQKDError):
    """Photon-number truncation too coarse for the requested tolerance."""


class InfeasibleError(MDIQKDError):
    """Linear program infeasible; the data contradict the model."""

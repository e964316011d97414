"""
Data ownership ledger.

Custodians keep de-identified user data in a replicated record store and the
identifying information in their own stores; a ledger of link contracts lets
owners claim, break and restore the link between the two, or move their
identifying information into a personal vault.
"""

__version__ = "0.1.0"

from .config import Settings, load_settings
from .errors import (
    ConfigurationError,
    ForbiddenError,
    NotFoundError,
    OwnershipError,
    RejectedError,
    UnauthorizedError,
)
from .models import DenyReason, OutcomeKind, OwnershipState, ResolutionOutcome, Role
from .system import System

__all__ = [
    "__version__",
    # Configuration
    "Settings",
    "load_settings",
    # Deployment
    "System",
    # Models
    "DenyReason",
    "OutcomeKind",
    "OwnershipState",
    "ResolutionOutcome",
    "Role",
    # Errors
    "ConfigurationError",
    "ForbiddenError",
    "NotFoundError",
    "OwnershipError",
    "RejectedError",
    "UnauthorizedError",
]

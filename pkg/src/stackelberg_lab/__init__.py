"""Stackelberg-Nash null-controllability laboratory.

Solves the follower Nash equilibrium and the leader HUM problem for coupled linear
stochastic parabolic systems on a binomial noise tree, and checks the duality identities
that make the discrete scheme exact.
"""

import logging
import sys
from importlib.metadata import PackageNotFoundError, version

FORMAT = "%(asctime)s | %(levelname)-7s | %(filename)s:%(lineno)d | %(funcName)s | %(message)s"

logging.basicConfig(
    level=logging.INFO, format=FORMAT, handlers=[logging.StreamHandler(sys.stderr)]
)
logger = logging.getLogger("stackelberg_lab")


try:
    __version__ = version("stackelberg_lab")
except PackageNotFoundError:
    # package is not installed
    __version__ = "0.0.0"
    logger.error("stackelberg-lab package is not installed.")


class StackelbergLabException(Exception):
    """Custom exception for the Stackelberg-Nash laboratory."""


class ValidationError(StackelbergLabException):
    """A configuration or a constructed object violates one of its invariants."""


class SolverError(StackelbergLabException):
    """An iterative solver failed to converge."""


class NonContractionError(SolverError):
    """A Picard or Nash fixed-point iteration stopped contracting."""


class CGStagnationError(SolverError):
    """Conjugate gradient on the regularized Gramian stopped reducing the residual."""


class WeightOverflowError(SolverError):
    """Too many Carleman weight exponentials hit the log cap."""


class ObservabilityError(SolverError):
    """An observability probe was rejected or has a vanishing observed energy."""


class InvariantCheckError(StackelbergLabException):
    """A verification gate of a run failed."""

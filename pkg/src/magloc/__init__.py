"""Eigenpairs of magnetic Laplacians on rectangles and checks of their localisation."""

__version__ = "0.1.0"

from .grid import Grid, build_grid  # noqa: E402
from .magop import HermitianOperator, assemble  # noqa: E402
from .eig import EigenPair, smallest_eigenpairs  # noqa: E402

__all__ = ["Grid", "build_grid", "HermitianOperator", "assemble", "EigenPair", "smallest_eigenpairs", "__version__"]

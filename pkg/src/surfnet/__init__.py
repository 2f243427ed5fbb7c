"""Surface network operators, layers and verification pipelines."""

__version__ = "0.1.0"

from .mesh import Mesh, load_mesh, save_mesh  # noqa: F401
from .la import SparseOperator, spmv  # noqa: F401
from .ops import assemble_laplacian, assemble_dirac  # noqa: F401

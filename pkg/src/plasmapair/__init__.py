"""Two-component plasma-type free-boundary system on unit-area domains.

Computes solution branches in the coupling strength ``lambda`` by three
independent routes (small-lambda contraction fixed point, bordered Newton,
free-energy minimization), the weighted dual spectrum of the linearization,
and a battery of identity/monotonicity audits along each branch.
"""

from .mesh import DomainShape, DomainMesh, build_mesh, integrate, green_apply, gradient_dot
from .solver import ProblemParams, SolutionState, Branch
from .spectral import WeightedSpace, SpectralSet, eigen_solve, sobolev_constant
from .variational import DensityPair, coercivity_gate, free_energy, coordinate_minimize

__version__ = "0.1.0"

__all__ = [
    "DomainShape",
    "DomainMesh",
    "build_mesh",
    "integrate",
    "green_apply",
    "gradient_dot",
    "ProblemParams",
    "SolutionState",
    "Branch",
    "WeightedSpace",
    "SpectralSet",
    "eigen_solve",
    "sobolev_constant",
    "DensityPair",
    "coercivity_gate",
    "free_energy",
    "coordinate_minimize",
    "__version__",
]

"""Nonconforming space-time virtual element solver for the 1D heat equation.

Modules: ``polybasis`` (scaled monomials and quadrature), ``geometry``
(prismatic space-time meshes with hanging nodes, slabs, and topology
flags), ``local_vem`` (element-local projectors and forms), ``assembly``
(global system, reference-element cache, slab solver), ``analysis``
(benchmark solutions, error measures, residual indicator), ``adaptivity``
(Dörfler marking and study loops), and ``cli`` (batch study driver).
"""

__version__ = "0.1.0"

__all__ = [
    "polybasis",
    "geometry",
    "local_vem",
    "assembly",
    "analysis",
    "adaptivity",
    "cli",
]

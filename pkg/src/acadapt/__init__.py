"""Adaptive atomistic/continuum coupling on the 2D triangular lattice.

Subpackage layout mirrors the pipeline: lattice geometry and defects,
EAM site potential and Cauchy-Born density, coupled mesh, interface
reconstruction, stress tensors and their divergence-free correction,
nonlinear solver, a posteriori estimators, stability constant, and the
adaptive drivers.
"""

__version__ = "0.1.0"

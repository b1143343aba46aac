"""Coarse-scale surrogate solvers for rough-coefficient elliptic problems.

Localized orthogonal decomposition on nested Cartesian meshes, explicit ReLU
network emulation of the local Petrov-Galerkin matrices, and a reproducible
experiment harness (service + CLI) around both.
"""

__version__ = "0.1.0"

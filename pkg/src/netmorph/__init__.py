"""Mixed finite element simulation of adaptive transport networks.

Submodules
----------
mesh        triangular meshes, generators and refinement
fem         P1/P0/RT0 assembly, solvers and norms
dynamics    IMEX time stepping of the conductance-pressure system
stationary  variational and penalty computation of stationary states
oned        one-dimensional extinction and stability analysis
io          configs, VTK snapshots, CSV and JSON outputs
"""

__version__ = "0.1.0"

__all__ = ["mesh", "fem", "dynamics", "stationary", "oned", "io", "runner", "__version__"]

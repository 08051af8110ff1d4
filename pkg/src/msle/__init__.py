"""Numerical laboratory for off-critical Loewner evolutions.

Exact slit-map chains (loewner), massive Green and Poisson kernels on
quadrature grids (kernels), determinant-ratio partition martingales and
off-critical drifts (partition), driving-process simulation with a
finite-difference Ito evaluator (sde), killed-walk and loop-erasure lattice
cross-checks (lattice), and a verification harness covering generator
identities, Monte Carlo martingales, lattice-vs-continuum comparisons, and
the Green-splitting proxy (verify). The msle console script exposes all of
it behind reproducible run configurations.
"""

import os as _os

# MSLE_WORKERS caps library-level parallelism; it must land in the BLAS
# environment before numpy loads, hence here rather than in the CLI
_workers = _os.environ.get("MSLE_WORKERS", "").strip()
if _workers.isdigit() and int(_workers) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _workers)

__version__ = "0.1.0"

from . import errors, kernels, lattice, loewner, partition, sde, verify  # noqa: F401,E402

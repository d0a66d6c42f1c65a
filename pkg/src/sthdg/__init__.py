"""Space-time HDG discretization of the 2D incompressible Navier-Stokes
equations with pointwise divergence-free velocities, plus a verification
harness for its identities, constants and refinement behaviour."""
import os as _os

_threads = _os.environ.get("STHDG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .mesh import (SpaceTimeLayout, SpatialMesh, build_face_topology, build_uniform_mesh,  # noqa: E402
                   read_mesh, refine_uniform, write_mesh)
from .spaces import SlabSpace  # noqa: E402
from .benchmarks import ProblemData, get_benchmark, manufactured, taylor_green  # noqa: E402
from .solver import RunResult, SolverConfig, run_simulation  # noqa: E402

__all__ = ["SpaceTimeLayout", "SpatialMesh", "build_face_topology", "build_uniform_mesh",
           "read_mesh", "refine_uniform", "write_mesh", "SlabSpace", "ProblemData",
           "get_benchmark", "manufactured", "taylor_green", "RunResult", "SolverConfig",
           "run_simulation"]
__version__ = "0.1.0"

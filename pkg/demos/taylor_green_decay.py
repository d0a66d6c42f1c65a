"""Decay of a confined vortex cell.

Runs the unforced benchmark, prints the per-slab energy balance and the
H(div) residuals of the solved velocity, then writes the last snapshot as
VTK.  With f = 0 the kinetic energy at the slab ends can only go down; the
ledger shows where it goes (time jumps, viscous and upwind dissipation).

    python3 demos/taylor_green_decay.py [n] [N]
"""
import sys
from pathlib import Path

from sthdg.benchmarks import taylor_green
from sthdg.cli import write_vtk
from sthdg.mesh import SpaceTimeLayout, build_uniform_mesh
from sthdg.solver import SolverConfig, run_simulation

n = int(sys.argv[1]) if len(sys.argv) > 1 else 8
N = int(sys.argv[2]) if len(sys.argv) > 2 else 8

data = taylor_green(nu=0.01, T=1.0)
run = run_simulation(data, SolverConfig(condense=True), build_uniform_mesh(n),
                     SpaceTimeLayout.uniform(data.T, N), k_s=2, k_t=1)

print(f"{'slab':>4} {'t1':>6} {'|u-|^2':>12} {'jump':>10} {'viscous':>10} {'upwind':>10} "
      f"{'residual':>9} {'picard':>6}")
for e in run.ledger:
    print(f"{e['slab']:4d} {e['t1']:6.3f} {e['energy_out']:12.6e} {e['jump']:10.3e} "
          f"{e['viscous']:10.3e} {e['convective']:10.3e} {e['relative_residual']:9.1e} "
          f"{e['iterations']:6d}")

worst = {k: max(c[k] for c in run.conformity) for k in ("divergence", "normal_jump", "boundary_normal")}
print("max H(div) residuals:", ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
print(f"elapsed {run.elapsed:.1f}s")

st = run.states[-1]
out = Path("demo_out")
out.mkdir(exist_ok=True)
write_vtk(out / "taylor_green_final.vtk", run.space, st.u.sum(-1), st.p.sum(-1), "final state")
print("wrote", out / "taylor_green_final.vtk")

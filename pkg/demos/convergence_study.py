"""Joint (h, tau) refinement on the forced benchmark with a known solution.

For each level: the L2(L2) error, an energy-norm proxy, the Cauchy
increment to the next level and the two asymptotic-consistency residuals
against a compactly supported test function.  The scheme comes with no
proven rate, so the numbers to look at are the monotone columns; the
fitted orders are printed for information.

    python3 demos/convergence_study.py [k_s] [k_t]
"""
import sys

from sthdg.benchmarks import manufactured
from sthdg.verify import consistency_residuals, convergence_study

k_s = int(sys.argv[1]) if len(sys.argv) > 1 else 1
k_t = int(sys.argv[2]) if len(sys.argv) > 2 else 0

data = manufactured(nu=0.01, T=1.0)
study = convergence_study(data, levels=((2, 2), (4, 4), (8, 8), (16, 16)), k_s=k_s, k_t=k_t,
                          progress=lambda r: print(f"  level n={r['n']} done in {r['seconds']:.1f}s"))
cons = consistency_residuals(study, data)

print(f"{'n':>3} {'N':>3} {'L2L2':>10} {'energy':>10} {'cauchy':>10} {'visc':>10} {'conv':>10}")
for r, c in zip(study.records, cons):
    print(f"{r['n']:3d} {r['N']:3d} {r['l2l2']:10.3e} {r['energy']:10.3e} "
          f"{r.get('cauchy', float('nan')):10.3e} {c['viscous']:10.3e} {c['convective']:10.3e}")
print("fitted orders:", ", ".join(f"{k}={v:.2f}" for k, v in study.orders.items()))

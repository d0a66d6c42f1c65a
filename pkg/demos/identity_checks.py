"""Operator identities and inequality constants on small meshes.

The viscous and convective forms are evaluated twice: once from the
assembled matrices, once from their lifted (discrete-gradient) rewriting.
Random fields make any missing face term show up at O(1).  The second half
measures the constants of the discrete inequalities on three meshes and
shows what happens when the penalty is far too small.
"""
from sthdg.verify import (coercivity_negative_control, constant_estimates, identity_suite,
                          make_space)

for n, k_s, k_t in [(2, 1, 0), (2, 2, 1), (4, 2, 1)]:
    r = identity_suite(make_space(n, k_s, k_t), seed=0, samples=50)
    keys = ("viscous", "convection", "positivity", "lifting", "gradient", "time_lifting")
    print(f"n={n} k_s={k_s} k_t={k_t}: " + " ".join(f"{k}={r[k]:.1e}" for k in keys))

est = constant_estimates(levels=(2, 4, 8), k_s=1, k_t=1, samples=50, duality=False)
cols = ("poincare", "lifting", "coercivity", "boundedness", "h1", "convection_sampled")
print(f"{'n':>3} " + " ".join(f"{c:>12}" for c in cols))
for row in est["rows"]:
    print(f"{row['n']:3d} " + " ".join(f"{row[c]:12.4f}" for c in cols))
print("bounded:", all(est["bounded"].values()))

neg = coercivity_negative_control(alpha=0.01)
print(f"alpha=0.01: smallest a_h Rayleigh quotient {neg['exact_min']:.3f} -> coercivity broken={neg['broken']}")

"""Dead-zone underflow rates: why large shared-scale groups lose signal.

With absmax scaling, a group's smallest elements are divided by its
maximum; as the group grows, more of them fall below the dead-zone
half-width delta = q_min/2 and quantize to zero.  The escape probability
decays like G^-delta for Laplace data but only G^-(delta^2) for Normal
data, which is the analytical reason rotations (which gaussianize) help at
large group sizes and hurt at small ones.
"""

from microfp import ModelGrid, Sampler, rate_experiment

GRID = ModelGrid.with_dead_zone(0.25)
GROUPS = [2 ** e for e in range(6, 15)]
N = 2_000_000

print(f"grid levels {GRID.levels}  (dead zone half-width delta = {GRID.delta})\n")
print(f"{'G':>6} | {'laplace R':>10} {'escape':>8} | {'normal R':>10} {'escape':>8}")
lap = rate_experiment(Sampler("laplace", 7), GRID, GROUPS, N)
nrm = rate_experiment(Sampler("normal", 7), GRID, GROUPS, N)
for rl, rn in zip(lap.rows, nrm.rows):
    print(f"{rl.G:>6} | {rl.R:>10.4f} {rl.escape_prob:>8.4f} "
          f"| {rn.R:>10.4f} {rn.escape_prob:>8.4f}")

print(f"\nfitted escape-rate exponents (log P ~ a log G + b log log G + c):")
print(f"  laplace: a = {lap.slope:+.4f}   (theory: -delta   = -0.25)")
print(f"  normal:  a = {nrm.slope:+.4f}   (theory: -delta^2 = -0.0625)")
print("\nNormal data holds on to its mass much longer as G grows -- the")
print("crossover that makes rotations pay off for coarse-grouped formats.")

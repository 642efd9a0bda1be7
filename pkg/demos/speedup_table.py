"""
How much cheaper is path-only retraining?
=========================================

For full R-ary trees with uniform rounds, the train-to-unlearn ratio has a
closed form.  The table puts it next to the ratio counted client by client,
and both grow with the number of stages.
"""

from fractions import Fraction

from fedshard.analysis import balanced_tree_counts, r1

print(f"{'K':>5} {'R':>2} {'closed form':>12} {'counted':>10}")
for R in (2, 3):
    for P in range(2, 6):
        K = R**P
        t_train, t_un = balanced_tree_counts(K, R, t0=5)
        counted = Fraction(t_train, t_un[0])
        print(f"{K:5d} {R:2d} {r1(K, R):12.4f} {str(counted):>10}")

"""Finite-difference checks of the hand-written backward passes.

The full suite (every op, all six heads with and without position-sensitive
outputs, pooling and the loss, 10 seeds each) runs under `psrpn gradcheck`;
this demo runs two seeds of a few representative cases and explains the
numbers.

Run: python demos/03_gradients.py
"""
from psrpn.gradsuite import CASES, case_step, run_suite

names = ["conv2d 3x3 s2", "batch_norm joint levels", "separable_gcn", "head gcn-ns ps", "ps_pool", "compute_loss"]
print(f"{len(CASES)} cases in the suite; checking {len(names)} of them here.\n")
print(f"{'case':<26}{'seed':>5}{'coords':>8}{'max rel err':>14}  step")
for r in run_suite(seeds=2, names=names):
    print(f"{r.case:<26}{r.seed:>5}{r.n_checked:>8}{r.max_rel_error:>14.2e}  {case_step(r.case):g}")

print("\nEach check casts the graph to float64, contracts the output with a random")
print("weight tensor, and compares analytic gradients with central differences on")
print("a random subset of coordinates. Heads take a 1e-6 step because their ReLUs")
print("would otherwise be crossed by the perturbation.")

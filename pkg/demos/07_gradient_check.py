"""Verify the analytic gradients against central finite differences.

Every parameter of a small but complete network (strided convolutions,
upsampling, skip concatenation, the combined cross-entropy plus Dice
loss) is perturbed in float64 and compared against the backward pass.
Takes roughly ten seconds.
"""

from psat.nnet import gradient_check

report = gradient_check(seed=0)
print(f"parameters checked: {report.n_params}")
print(f"max relative error: {report.max_rel_err:.3e} in {report.worst_tensor}")
print(f"elapsed: {report.seconds:.1f}s")
print()
for name, err in sorted(report.per_tensor.items()):
    print(f"  {name:12s} {err:.3e}")
print()
print("PASS" if report.passed else "FAIL")

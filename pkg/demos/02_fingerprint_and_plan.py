"""Fingerprint two cohorts and derive their training plans.

The plan adapts to the data: target spacing is the fingerprint's median
spacing, the patch is rounded down to fit the pooling depth and a voxel
budget, and the normalization window comes from pooled foreground
percentiles. Adult and pediatric cohorts therefore get different plans
from the same rules.
"""

from psat.fingerprint import compute_fingerprint
from psat.phantom import default_adult_spec, default_pediatric_spec, generate_cohort
from psat.plan import derive_plan, preprocess

adult = generate_cohort(default_adult_spec(), n=8, seed=7)
ped = generate_cohort(default_pediatric_spec(), n=8, seed=8)

for cohort in (adult, ped):
    fp = compute_fingerprint(cohort.split_cases("train"))
    plan = derive_plan(fp)
    print(f"{cohort.cohort_tag}:")
    print(f"  median shape   {fp.median_shape}")
    print(f"  spacing median {fp.spacing_median}")
    print(f"  clip window    [{fp.fg_p005:.0f}, {fp.fg_p995:.0f}]")
    print(f"  -> target spacing {plan.target_spacing}")
    print(f"  -> patch {plan.patch_size}, levels {plan.num_levels}, "
          f"channels {plan.channels()}")
    print(f"  -> plan hash {plan.plan_hash()[:12]}")

plan = derive_plan(compute_fingerprint(adult.split_cases("train")))
case = adult.cases[0]
prepped = preprocess(case, plan)
print(f"\npreprocessing {case.case_id}: {case.volume.shape} @ {case.volume.spacing}")
print(f"  -> {prepped.volume.shape} @ {prepped.volume.spacing}")
print(f"  normalized intensity range [{prepped.volume.voxels.min():.2f}, "
      f"{prepped.volume.voxels.max():.2f}]")

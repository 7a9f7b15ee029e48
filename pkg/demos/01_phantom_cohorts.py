"""Generate the three phantom cohorts and look at what makes them differ.

The adult and pediatric cohorts share one organ layout; the pediatric
bodies are volume-contracted so that the large member of each
same-intensity organ pair shrinks onto the adult size of the small
member. The internal cohort adds an intensity shift and extra noise on
top of the contracted geometry, standing in for a different scanner.
"""

import numpy as np

from psat.phantom import (
    default_adult_spec,
    default_internal_spec,
    default_pediatric_spec,
    generate_cohort,
    merge_balanced,
    organ_volume,
)

adult = generate_cohort(default_adult_spec(), n=4, seed=7)
ped = generate_cohort(default_pediatric_spec(), n=4, seed=8)
internal = generate_cohort(default_internal_spec(), n=2, seed=9, split_fracs=(0.0, 0.0))

print("cohort sizes:", {c.cohort_tag: len(c.cases) for c in (adult, ped, internal)})
print("splits:", {part: adult.splits[part] for part in ("train", "val", "test")})

names = adult.organ_names()
print("\nmean organ volumes (mL), adult vs pediatric:")
for oid in sorted(names):
    vol_a = np.mean([organ_volume(c.labels, oid) for c in adult.cases]) / 1000.0
    vol_p = np.mean([organ_volume(c.labels, oid) for c in ped.cases]) / 1000.0
    ratio = vol_p / vol_a
    print(f"  {names[oid]:9s} {vol_a:7.2f}  {vol_p:7.2f}   ratio {ratio:.3f}")

# the contraction lands pediatric kidney on adult prostate size
kid_p = np.mean([organ_volume(c.labels, 2) for c in ped.cases])
pro_a = np.mean([organ_volume(c.labels, 1) for c in adult.cases])
print(f"\npediatric kidney vs adult prostate volume: {kid_p / pro_a:.3f}")

case = adult.cases[0]
fg = case.volume.voxels[case.labels.labels > 0]
print(f"\nfirst adult case: shape {case.volume.shape}, spacing {case.volume.spacing}")
print(f"foreground intensity mean {fg.mean():.0f}, std {fg.std():.0f}")

shift = internal.cases[0].volume.voxels[internal.cases[0].labels.labels > 0].mean()
print(f"internal cohort foreground mean {shift:.0f} (scanner shift)")

mixed = merge_balanced(adult, ped, seed=10)
print(f"\nmerged learning set: {len(mixed.cases)} cases, "
      f"train ids {mixed.splits['train']}")

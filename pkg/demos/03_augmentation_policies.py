"""Compare the detail and contraction augmentation policies.

Both sample isotropic scales, intensity scaling, noise, and blur; no
mirroring ever. The contraction policy widens the scale interval so its
smallest factor halves organ volume (0.5 ** (1/3) linearly), which is
what lets an adult-trained model meet pediatric organ sizes.
"""

import numpy as np

from psat.augment import (Transform, apply_transform, contraction_policy,
                          detail_policy, sample_transform)
from psat.seeds import make_rng

rng = make_rng(0, "demo")
for policy in (detail_policy(), contraction_policy()):
    scales = [sample_transform(policy, rng).scale for _ in range(20000)]
    lo, hi = min(scales), max(scales)
    print(f"{policy.name:12s} scale in [{lo:.4f}, {hi:.4f}] "
          f"(volume factor {lo ** 3:.3f} .. {hi ** 3:.3f})")

print(f"\ncontraction lower edge vs 0.5^(1/3): "
      f"{contraction_policy().scale_lo:.6f} vs {0.5 ** (1 / 3):.6f}")

# one transform applied to a sphere: label volume follows the cube law
grid = np.zeros((32, 32, 32), dtype=np.float32)
z, y, x = np.mgrid[:32, :32, :32]
mask = ((z - 16) ** 2 + (y - 16) ** 2 + (x - 16) ** 2) <= 8 ** 2
labels = mask.astype(np.uint16)
grid[mask] = 1.0

t = Transform(apply_spatial=True, scale=0.875, angles_deg=(0.0, 0.0, 0.0),
              apply_intensity=False, intensity_mult=1.0)
_, out_labels = apply_transform(grid, labels, t)
ratio = out_labels.sum() / labels.sum()
print(f"\nscale {t.scale:.3f} applied: label volume ratio {ratio:.3f} "
      f"(cube law predicts {t.scale ** 3:.3f})")

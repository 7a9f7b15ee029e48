"""Train a small network from scratch and run full-volume inference.

Miniature settings (reduced voxel budget and channel count) keep this
demo around a minute. The training loop is the real one: foreground-
forced patch sampling, augmentation, polynomial learning-rate decay,
and checkpointing on the best validation score.
"""

import time

from psat.augment import detail_policy
from psat.evaluation import dsc
from psat.fingerprint import compute_fingerprint
from psat.phantom import default_adult_spec, generate_cohort
from psat.plan import derive_plan, preprocess, restore_to_native
from psat.nnet import load_checkpoint
from psat.train import TrainSchedule, infer, train_direct

cohort = generate_cohort(default_adult_spec(), n=8, seed=21)
plan = derive_plan(
    compute_fingerprint(cohort.split_cases("train")),
    voxel_budget=4096,   # 16^3 patches instead of the default 32^3
    base_channels=4,
)
print(f"plan: patch {plan.patch_size}, levels {plan.num_levels}, "
      f"channels {plan.channels()}")

train_cases = [preprocess(c, plan) for c in cohort.split_cases("train")]
val_cases = [preprocess(c, plan) for c in cohort.split_cases("val")]

schedule = TrainSchedule(epochs=6, steps_per_epoch=12)
t0 = time.perf_counter()
result = train_direct(
    plan, train_cases, val_cases, detail_policy(), schedule,
    seed=3, out_dir="demo_run", strategy="demo",
    label_names=cohort.organ_names(),
)
print(f"trained {result.n_steps} steps in {time.perf_counter() - t0:.0f}s")
print("loss per epoch:", " ".join(f"{v:.3f}" for v in result.train_loss))
print(f"best val organ-mean DSC {result.best_val:.3f} at epoch {result.best_epoch}")

ckpt = load_checkpoint(result.checkpoint_path)
test_case = cohort.split_cases("test")[0]
prepped = preprocess(test_case, plan)
pred = infer(ckpt, prepped)
native = restore_to_native(pred, prepped)
print(f"\ninference on {test_case.case_id}: prediction restored to "
      f"{native.shape} @ {native.spacing}")
for oid, name in sorted(cohort.organ_names().items()):
    score = dsc(native, test_case.labels, oid)
    shown = "absent" if score is None else f"{score:.3f}"
    print(f"  {name:9s} DSC {shown}")

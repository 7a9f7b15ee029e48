"""Fine-tuning versus rehearsal on a pretrained checkpoint.

An adult-pretrained model is adapted to the pediatric cohort two ways:
pediatric-only fine-tuning, and rehearsal that mixes adult draws back
in at a replay ratio. Watch the adult validation score: fine-tuning
lets it slide, rehearsal holds it up.
"""

from psat.augment import detail_policy
from psat.fingerprint import compute_fingerprint
from psat.nnet import load_checkpoint
from psat.phantom import default_adult_spec, default_pediatric_spec, generate_cohort
from psat.plan import derive_plan, preprocess
from psat.train import PatchSampler, TrainSchedule, TransferSpec, _validate, train_direct, transfer

adult = generate_cohort(default_adult_spec(), n=8, seed=31)
ped = generate_cohort(default_pediatric_spec(), n=8, seed=32)
plan = derive_plan(
    compute_fingerprint(adult.split_cases("train")),
    voxel_budget=4096, base_channels=4,
)
prep = lambda cohort, part: [preprocess(c, plan) for c in cohort.split_cases(part)]
adult_train, adult_val = prep(adult, "train"), prep(adult, "val")
ped_train, ped_val = prep(ped, "train"), prep(ped, "val")

base = train_direct(
    plan, adult_train, adult_val, detail_policy(),
    TrainSchedule(epochs=6, steps_per_epoch=12),
    seed=5, out_dir="demo_transfer/pretrain", strategy="pretrain",
)
print(f"pretrained on adult: val DSC {base.best_val:.3f}")


def adult_score(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    scores = _validate(ckpt.config, ckpt.params, adult_val,
                       ckpt.config.patch_size, float(ckpt.meta["background"]))
    return sum(scores.values()) / len(scores)


print(f"adult score before adaptation: {adult_score(base.checkpoint_path):.3f}")

finetune = TransferSpec(mode="p", lr0_grid=(1e-3,), epochs_grid=(200,))
rehearse = TransferSpec(mode="m", lr0_grid=(1e-3,), epochs_grid=(200,),
                        replay_grid=(0.5,))

ft = transfer(base.checkpoint_path, finetune, ped_train, ped_val,
              seed=6, out_dir="demo_transfer/finetune", epochs_scale=0.02)
print(f"\nfine-tune: pediatric val {ft.best_val:.3f}, "
      f"adult now {adult_score(ft.checkpoint_path):.3f}")

rh = transfer(base.checkpoint_path, rehearse, ped_train, ped_val,
              adult_train=adult_train, seed=6,
              out_dir="demo_transfer/rehearse", epochs_scale=0.02)
print(f"rehearsal: pediatric val {rh.best_val:.3f}, "
      f"adult now {adult_score(rh.checkpoint_path):.3f}")
print(f"chosen grid point: {rh.chosen}")

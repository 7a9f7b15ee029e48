"""Score two strategies and render the study table.

Runs a miniature two-strategy study end to end through the driver,
then shows the significance-marked table: rows are strategies, columns
organs, and each cell holds adult/pediatric/internal percentages with
a dagger where a strategy significantly improves on the baseline.
"""

from psat.orchestrator import ExperimentConfig, run_experiment

cfg = ExperimentConfig(
    n_adult=8, n_pediatric=8, n_internal=2,
    voxel_budget=4096, base_channels=4,
    pretrain_epochs=4, steps_per_epoch=10,
    epochs_scale=0.005,
    lr0_grid=(1e-3,), epochs_grid=(200,), replay_grid=(0.5,),
    strategies=("PaSaAdTo", "PaSaAdTm"),
    baseline="PaSaAdTo",
)
result = run_experiment(cfg, out_root="demo_study", log=print)

print()
print(result.report_text)
print(f"pretrain runs: {result.n_pretrain_runs}, "
      f"adaptation runs: {result.n_transfer_runs}")
print(f"full report files under {result.out_root}/")

manifest = result.manifests["PaSaAdTm"]
print(f"\nPaSaAdTm manifest: status {manifest.status}, "
      f"reused pretrain: {manifest.pretrain_reused}, "
      f"chosen {manifest.chosen}")

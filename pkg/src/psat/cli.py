"""Command-line interface.

Stages are exposed separately (generate, fingerprint, plan, train,
transfer, evaluate, report) and end to end (study). Exit codes: 0 on
success, 2 for configuration or validation problems, 3 when a run
fails. The only environment variable consulted is ``PSAT_OUT``, the
fallback output root.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .errors import RuntimeFailure, ValidationError
from .nnet import gradient_check
from .orchestrator import (
    ExperimentConfig,
    RunManifest,
    _StudyState,
    _run_strategy,
    load_config,
    parse_strategy,
    report,
    resolve_out_root,
    run_experiment,
)
from .phantom import save_cohort


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psat",
        description="segmentation strategy laboratory on synthetic phantom cohorts",
    )
    parser.add_argument("--version", action="version", version=f"psat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help_text: str, *, config=True, out=True, seed=False,
            strategy=None, baseline=False, epochs_scale=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            p.add_argument("--config", metavar="INI", help="experiment config file")
        if out:
            p.add_argument("--out", metavar="DIR", help="output root (default: config, then $PSAT_OUT)")
        if seed:
            p.add_argument("--seed", type=int, metavar="N", help="override the seed")
        if strategy is not None:
            p.add_argument("--strategy", metavar="CODE", required=strategy == "required",
                           default=None if strategy == "required" else "PaSaAdTo",
                           help="strategy code, e.g. PaSaAdTo")
        if baseline:
            p.add_argument("--baseline", metavar="CODE", help="baseline strategy for the table")
        if epochs_scale:
            p.add_argument("--epochs-scale", type=float, metavar="X",
                           help="scale factor applied to grid epoch counts")
        return p

    add("generate", "write the synthetic cohorts to disk", seed=True)
    add("fingerprint", "print dataset statistics for a strategy's plan source",
        strategy="optional")
    add("plan", "derive and print the training plan for a strategy", strategy="optional")
    add("train", "pretrain the network for a strategy's plan/set/augmentation triple",
        seed=True, strategy="required", epochs_scale=False)
    add("transfer", "adapt a pretrained checkpoint to the pediatric cohort",
        seed=True, strategy="required", epochs_scale=True)
    add("evaluate", "score a strategy's final checkpoint on the test splits",
        strategy="required")
    add("report", "rebuild the study table from evaluation files", config=False,
        baseline=True)
    study = add("study", "run every configured strategy end to end", seed=True,
                baseline=True, epochs_scale=True)
    study.add_argument("--preset", metavar="NAME", choices=("trends",),
                       help="run a named study preset instead of the config")
    check = sub.add_parser("gradcheck", help="finite-difference check of every gradient",
                           description="finite-difference check of every gradient")
    check.add_argument("--seed", type=int, default=0, metavar="N")
    return parser


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        field = "cohort_seed" if args.command == "generate" else "train_seed"
        cfg = dataclasses.replace(cfg, **{field: seed})
    scale = getattr(args, "epochs_scale", None)
    if scale is not None:
        cfg = dataclasses.replace(cfg, epochs_scale=scale)
    baseline = getattr(args, "baseline", None)
    if baseline is not None and args.command == "study":
        if baseline not in cfg.strategies:
            raise ValidationError(f"baseline {baseline} is not among the strategies")
        cfg = dataclasses.replace(cfg, baseline=baseline)
    return cfg


def _cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = resolve_out_root(args.out, cfg)
    state = _StudyState(cfg, out)
    for key in ("a", "p", "internal"):
        cohort = state.cohorts[key]
        path = save_cohort(cohort, out / "cohorts" / cohort.cohort_tag)
        print(f"{cohort.cohort_tag}: {len(cohort.cases)} cases -> {path}")
    return 0


def _cmd_fingerprint(args) -> int:
    cfg = _load_cfg(args)
    code = parse_strategy(args.strategy)
    state = _StudyState(cfg, resolve_out_root(args.out, cfg))
    from .fingerprint import compute_fingerprint

    fp = compute_fingerprint(state.cohorts[code.plan_src].split_cases("train"))
    text = fp.to_json()
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "fingerprint.json").write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_plan(args) -> int:
    cfg = _load_cfg(args)
    code = parse_strategy(args.strategy)
    state = _StudyState(cfg, resolve_out_root(args.out, cfg))
    plan = state.plan_for(code)
    text = plan.to_json()
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "plan.json").write_text(text)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    code = parse_strategy(args.strategy)
    out = resolve_out_root(args.out, cfg)
    state = _StudyState(cfg, out, log=print)
    manifest = RunManifest(strategy=str(code))
    ckpt = state.pretrain(code, manifest)
    result = state.pretrained[code.pretrain_key][1]
    print(f"checkpoint: {ckpt}")
    print(f"best validation DSC: {result.best_val:.4f} (epoch {result.best_epoch})")
    return 0


def _cmd_transfer(args) -> int:
    cfg = _load_cfg(args)
    code = parse_strategy(args.strategy)
    out = resolve_out_root(args.out, cfg)
    pre_ckpt = out / "pretrain" / code.pretrain_key / "best.psc"
    if not pre_ckpt.is_file():
        raise ValidationError(
            f"no pretrained checkpoint at {pre_ckpt}; run "
            f"`psat train --strategy {code}` first"
        )
    state = _StudyState(cfg, out, log=print)
    state.pretrained[code.pretrain_key] = (str(pre_ckpt), None)
    run_dir = out / "runs" / str(code)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(strategy=str(code))
    ckpt_path, _ = _run_strategy(state, code, run_dir, manifest)
    (run_dir / "result.json").write_text(json.dumps(
        {"checkpoint": str(ckpt_path), "chosen": manifest.chosen},
        sort_keys=True, indent=2,
    ) + "\n")
    (run_dir / "manifest.json").write_text(manifest.to_json())
    print(f"checkpoint: {ckpt_path}")
    if manifest.chosen:
        print(f"chosen grid point: {manifest.chosen}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate, report_to_json

    cfg = _load_cfg(args)
    code = parse_strategy(args.strategy)
    out = resolve_out_root(args.out, cfg)
    run_dir = out / "runs" / str(code)
    result_path = run_dir / "result.json"
    pre_ckpt = out / "pretrain" / code.pretrain_key / "best.psc"
    if result_path.is_file():
        ckpt = json.loads(result_path.read_text())["checkpoint"]
    elif code.transfer == "o" and pre_ckpt.is_file():
        ckpt = str(pre_ckpt)
    else:
        raise ValidationError(
            f"no finished run for {code} under {out}; run "
            f"`psat transfer --strategy {code}` first"
        )
    state = _StudyState(cfg, out)
    plan = state.plan_for(code)
    run_dir.mkdir(parents=True, exist_ok=True)
    for key in ("a", "p", "internal"):
        cohort = state.cohorts[key]
        rep = evaluate(ckpt, cohort, plan)
        (run_dir / f"eval_{cohort.cohort_tag}.json").write_text(report_to_json(rep))
        organ_names = cohort.organ_names()
        scores = ", ".join(
            f"{organ_names[k]}={v:.3f}" for k, v in sorted(rep.means.items())
        )
        print(f"{cohort.cohort_tag}: {scores}")
    return 0


def _cmd_report(args) -> int:
    out = args.out
    if out is None:
        out = resolve_out_root(None, ExperimentConfig())
    text, _ = report(out, baseline=getattr(args, "baseline", None))
    sys.stdout.write(text)
    return 0


def _cmd_study(args) -> int:
    if getattr(args, "preset", None) == "trends":
        from .statsbench import run_trends_preset

        cfg = load_config(args.config) if args.config else None
        out = args.out or str(resolve_out_root(None, cfg or ExperimentConfig()))
        verdict = run_trends_preset(out, config=cfg, log=print)
        return 0 if verdict["passed"] else 3
    cfg = _load_cfg(args)
    result = run_experiment(cfg, out_root=args.out, log=print)
    failed = [m.strategy for m in result.manifests.values() if m.status != "ok"]
    sys.stdout.write(result.report_text)
    print(f"report written to {result.out_root / 'report.csv'}")
    if failed:
        print(f"failed strategies: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def _cmd_gradcheck(args) -> int:
    rep = gradient_check(seed=args.seed)
    print(f"parameters checked: {rep.n_params}")
    print(f"max relative error: {rep.max_rel_err:.3e} (worst: {rep.worst_tensor})")
    print(f"elapsed: {rep.seconds:.1f}s")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 3


_HANDLERS = {
    "generate": _cmd_generate,
    "fingerprint": _cmd_fingerprint,
    "plan": _cmd_plan,
    "train": _cmd_train,
    "transfer": _cmd_transfer,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "study": _cmd_study,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version and 2 for usage errors
        return 0 if exc.code in (0, None) else 2
    try:
        return _HANDLERS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

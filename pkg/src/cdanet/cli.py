"""Command-line entry point.

Subcommands: gen-data, train, eval, analyze, ablate, sweep.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .config import ConfigError, ExperimentConfig, load_experiment_config, write_resolved
from .data import DataError, DomainSplits, split_and_encode
from .evaluation import evaluate, knn_translation_analysis, write_neighbor_report
from .experiments import (
    AblationPlan,
    run_ablations,
    sweep_hyper,
    sweep_sparsity,
    write_metrics_csv,
)
from .model import ModelAssembly
from .train import (
    CheckpointError,
    DivergenceError,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train_augmentation,
    train_translation,
    transfer_parameters,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_domains(cfg: ExperimentConfig):
    """Build both domains' splits (and the correspondence when known)."""
    if cfg.data_mode == "synthetic":
        source, target, corr = data_mod.generate_synthetic(cfg.synthetic)
        return split_and_encode(source), split_and_encode(target), corr
    spec = cfg.csv
    source_schema = data_mod.read_schema(spec.source_schema, "source")
    target_schema = data_mod.read_schema(spec.target_schema, "target")
    source = data_mod.load_csv(source_schema, spec.source_csv, spec.label_threshold)
    target = data_mod.load_csv(target_schema, spec.target_csv, spec.label_threshold)
    corr = data_mod.read_correspondence(spec.correspondence) if spec.correspondence else None
    return split_and_encode(source), split_and_encode(target), corr


def _resolve_out(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(cfg: ExperimentConfig, args) -> tuple[int, ...]:
    if getattr(args, "seed", None) is not None:
        return (args.seed,)
    return cfg.seeds


def cmd_gen_data(args) -> int:
    cfg = load_experiment_config(args.config)
    if cfg.data_mode != "synthetic" or cfg.synthetic is None:
        raise ConfigError("[data] mode: gen-data needs mode=synthetic with a synthetic section")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "data"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    source, target, corr = data_mod.generate_synthetic(cfg.synthetic)
    data_mod.write_csv(source, out / "source.csv")
    data_mod.write_csv(target, out / "target.csv")
    data_mod.write_schema(source.schema, out / "source.schema")
    data_mod.write_schema(target.schema, out / "target.schema")
    data_mod.write_correspondence(corr, out / "correspondence.csv")
    write_resolved(cfg, out / "resolved_config.cfg")
    print(f"wrote synthetic domains to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    out = _resolve_out(cfg, args)
    write_resolved(cfg, out / "resolved_config.cfg")
    timing = cfg.timing or args.timing
    source, target, _ = _load_domains(cfg)
    for seed in _seeds(cfg, args):
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        train_cfg = replace(cfg.train, seed=seed)
        summary = {"seed": seed}

        stage1 = None
        if args.stage in ("translation", "both"):
            stage1, rec1 = train_translation(source, target, train_cfg)
            save_checkpoint(stage1, run_dir / "stage1_best.ckpt", meta={"stage": 1, "seed": seed})
            rec1.write_jsonl(run_dir / "stage1_metrics.jsonl", timing=timing)
            summary["stage1_best_val_auc"] = rec1.best_val_auc
            summary["stage1_stop_reason"] = rec1.stop_reason
            summary["stage1_test"] = evaluate(stage1, target.test, stage=1, domain="target")

        if args.stage in ("augmentation", "both"):
            if stage1 is None:
                payload = load_checkpoint(run_dir / "stage1_best.ckpt")
                stage1 = ModelAssembly(source.schema, target.schema, train_cfg.model_config(), seed, stage=1)
                apply_checkpoint(stage1, payload)
            stage2 = transfer_parameters(stage1)
            save_checkpoint(stage2, run_dir / "stage2_transfer.ckpt", meta={"stage": 2, "seed": seed, "transferred": True})
            stage2, rec2 = train_augmentation(target, stage2, train_cfg)
            save_checkpoint(stage2, run_dir / "stage2_best.ckpt", meta={"stage": 2, "seed": seed})
            rec2.write_jsonl(run_dir / "stage2_metrics.jsonl", timing=timing)
            summary["stage2_best_val_auc"] = rec2.best_val_auc
            summary["stage2_stop_reason"] = rec2.stop_reason
            summary["stage2_test"] = evaluate(stage2, target.test, stage=2)

        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        print(f"seed {seed}: " + json.dumps(summary))
    return EXIT_OK


def _build_assembly(cfg: ExperimentConfig, source: DomainSplits, target: DomainSplits, stage: int, seed: int):
    train_cfg = replace(cfg.train, seed=seed)
    return ModelAssembly(source.schema, target.schema, train_cfg.model_config(), seed, stage=stage)


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config)
    source, target, _ = _load_domains(cfg)
    model = _build_assembly(cfg, source, target, args.stage, _seeds(cfg, args)[0])
    apply_checkpoint(model, load_checkpoint(args.checkpoint))
    splits = {"train": target.train, "val": target.val, "test": target.test}
    metrics = evaluate(model, splits[args.split], stage=args.stage, domain=args.domain)
    line = json.dumps({"split": args.split, "stage": args.stage, **metrics})
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}_stage{args.stage}.json").write_text(line + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_experiment_config(args.config)
    source, target, corr = _load_domains(cfg)
    if args.correspondence:
        corr = data_mod.read_correspondence(args.correspondence)
    model = _build_assembly(cfg, source, target, args.stage, _seeds(cfg, args)[0])
    apply_checkpoint(model, load_checkpoint(args.checkpoint))
    report = knn_translation_analysis(
        model,
        source.train,
        target.train,
        corr,
        k=args.k if args.k is not None else cfg.eval.k,
        metric=args.metric or cfg.eval.metric,
        normalize=cfg.eval.normalize,
    )
    out_path = Path(args.out) if args.out else Path(cfg.output_dir) / "neighbors.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_neighbor_report(report, out_path)
    print(
        json.dumps(
            {
                "queries": len(report.queries),
                "candidates": report.n_candidates,
                "k": report.k,
                "metric": report.metric,
                "hit_rate": report.hit_rate,
                "chance_rate": report.chance_rate,
            }
        )
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_experiment_config(args.config)
    out = _resolve_out(cfg, args)
    write_resolved(cfg, out / "resolved_config.cfg")
    source, target, _ = _load_domains(cfg)
    plan = AblationPlan(tuple(cfg.eval.ablation_variants))
    rows, means = run_ablations(plan, source, target, cfg.train, _seeds(cfg, args), n_jobs=args.parallel)
    write_metrics_csv(rows, out / "ablations.csv", timing=cfg.timing or args.timing)
    for variant in plan.variants:
        print(f"{variant}: mean test AUC {means[variant]:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_experiment_config(args.config)
    out = _resolve_out(cfg, args)
    write_resolved(cfg, out / "resolved_config.cfg")
    source, target, _ = _load_domains(cfg)
    seeds = _seeds(cfg, args)
    if args.kind == "sparsity":
        rows = sweep_sparsity(
            cfg.eval.ratios, source, target, cfg.train, seeds, variants=("full", "mlp"), n_jobs=args.parallel
        )
        path = out / "sparsity.csv"
    else:
        rows = sweep_hyper(
            cfg.eval.alpha_grid, cfg.eval.beta_grid, source, target, cfg.train, seeds, n_jobs=args.parallel
        )
        path = out / "hyper.csv"
    write_metrics_csv(rows, path, timing=cfg.timing or args.timing)
    print(f"wrote {len(rows)} cells to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the [output] seeds list with one seed")
        p.add_argument("--out", default=None, help="override the [output] dir")

    p = sub.add_parser("gen-data", help="write synthetic CSVs, schemas, and the correspondence")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the translation and/or augmentation stage per seed")
    common(p)
    p.add_argument("--stage", choices=("translation", "augmentation", "both"), default="both")
    p.add_argument("--timing", action="store_true", help="emit real wall times (breaks byte reproducibility)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--stage", type=int, choices=(1, 2), default=2)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="translated-feature nearest-neighbor report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default=None)
    p.add_argument("--correspondence", default=None, help="correspondence CSV (csv data mode)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("ablate", help="train every ablation variant and tabulate mean AUC")
    common(p)
    p.add_argument("--parallel", type=int, default=1, help="worker processes across cells")
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="data-sparsity or loss-weight sweep")
    common(p)
    p.add_argument("--kind", choices=("sparsity", "hyper"), required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

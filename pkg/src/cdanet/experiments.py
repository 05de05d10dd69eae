"""Ablation runner, data-sparsity and loss-weight sweeps, benchmark setups.

Every cell of every sweep is a pure function of (configs, seed), so grids can
be distributed across processes and rerun bit-identically.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import (
    Correspondence,
    Dataset,
    DomainSplits,
    EncodedDataset,
    SyntheticConfig,
    generate_synthetic,
    split_and_encode,
    subsample_train,
)
from .evaluation import evaluate, evaluate_baseline
from .model import ExtractorConfig, ModelAssembly
from .train import TrainConfig, train_augmentation, train_single_domain, train_translation, transfer_parameters

ABLATION_VARIANTS = (
    "full",
    "wo_orth",
    "wo_cross",
    "wo_translation_network",
    "wo_augmentation_network",
)


@dataclass(frozen=True)
class AblationPlan:
    variants: tuple[str, ...] = ABLATION_VARIANTS

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in ABLATION_VARIANTS]
        if unknown:
            raise ValueError(f"unknown ablation variant '{unknown[0]}' (choose from {ABLATION_VARIANTS})")
        if "full" not in self.variants:
            raise ValueError("ablation plan must include the 'full' reference variant")


@dataclass
class RunResult:
    cell: str
    seed: int
    auc: float
    logloss: float
    val_auc: float
    wall_ms: float
    stop_reasons: tuple[str, ...]


def run_variant(
    variant: str,
    source: DomainSplits,
    target: DomainSplits,
    cfg: TrainConfig,
    return_model: bool = False,
):
    """Train one ablation variant end to end and score the target test split."""
    if variant not in ABLATION_VARIANTS and variant != "mlp":
        raise ValueError(f"unknown variant '{variant}'")
    t0 = time.perf_counter()
    model = None
    reasons: list[str] = []

    if variant == "mlp":
        baseline, record = train_single_domain(target, cfg)
        metrics = evaluate_baseline(baseline, target.test)
        reasons.append(record.stop_reason)
        val_auc = record.best_val_auc
        model = baseline
    elif variant == "wo_translation_network":
        # no pretraining: the augmentation network starts from random init
        fresh = ModelAssembly(source.schema, target.schema, cfg.model_config(), cfg.seed, stage=2)
        model, record = train_augmentation(target, fresh, cfg)
        metrics = evaluate(model, target.test, stage=2)
        reasons.append(record.stop_reason)
        val_auc = record.best_val_auc
    elif variant == "wo_augmentation_network":
        model, record = train_translation(source, target, cfg)
        metrics = evaluate(model, target.test, stage=1, domain="target")
        reasons.append(record.stop_reason)
        val_auc = record.best_val_auc
    else:
        stage_cfg = cfg
        if variant == "wo_orth":
            stage_cfg = replace(cfg, beta=0.0)
        elif variant == "wo_cross":
            stage_cfg = replace(cfg, alpha=0.0)
        stage1, rec1 = train_translation(source, target, stage_cfg)
        transferred = transfer_parameters(stage1)
        model, rec2 = train_augmentation(target, transferred, stage_cfg)
        metrics = evaluate(model, target.test, stage=2)
        reasons.extend([rec1.stop_reason, rec2.stop_reason])
        val_auc = rec2.best_val_auc

    wall_ms = (time.perf_counter() - t0) * 1000.0
    result = RunResult(
        cell=variant,
        seed=cfg.seed,
        auc=metrics["auc"],
        logloss=metrics["logloss"],
        val_auc=val_auc,
        wall_ms=wall_ms,
        stop_reasons=tuple(reasons),
    )
    return (result, model) if return_model else result


def run_ablations(
    plan: AblationPlan,
    source: DomainSplits,
    target: DomainSplits,
    cfg: TrainConfig,
    seeds: Sequence[int],
    n_jobs: int = 1,
) -> tuple[list[RunResult], dict[str, float]]:
    """All plan variants under identical seeds; returns rows and per-variant
    mean test AUC."""
    if len(seeds) < 3:
        raise ValueError(f"ablations need at least 3 seeds for variance, got {len(seeds)}")
    cells = [(variant, source, target, replace(cfg, seed=seed)) for variant in plan.variants for seed in seeds]
    rows = _map_cells(_ablation_cell, cells, n_jobs)
    means = {
        variant: float(np.mean([r.auc for r in rows if r.cell == variant])) for variant in plan.variants
    }
    return rows, means


def _ablation_cell(args) -> RunResult:
    variant, source, target, cfg = args
    return run_variant(variant, source, target, cfg)


def subsample_target_train(target: DomainSplits, ratio: float, seed: int) -> DomainSplits:
    """Shrink the target train split only; validation and test stay fixed."""
    raw_train = Dataset(target.schema, target.train.examples)
    sub = subsample_train(raw_train, ratio, seed)
    return DomainSplits(target.schema, EncodedDataset(sub), target.val, target.test)


def sweep_sparsity(
    ratios: Sequence[float],
    source: DomainSplits,
    target: DomainSplits,
    cfg: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = ("full",),
    n_jobs: int = 1,
) -> list[RunResult]:
    """Full run per (train ratio, seed, variant) with the target train split
    subsampled; the same subsample is shared by every variant at a cell."""
    if not ratios:
        raise ValueError("sparsity sweep needs at least one ratio")
    for r in ratios:
        if not (0.0 < r <= 1.0):
            raise ValueError(f"train ratio must be in (0, 1], got {r}")
    cells = []
    for ratio in ratios:
        for seed in seeds:
            for variant in variants:
                cells.append((ratio, variant, source, target, replace(cfg, seed=seed)))
    return _map_cells(_sparsity_cell, cells, n_jobs)


def _sparsity_cell(args) -> RunResult:
    ratio, variant, source, target, cfg = args
    target_sub = subsample_target_train(target, ratio, cfg.seed)
    result = run_variant(variant, source, target_sub, cfg)
    result.cell = f"ratio={ratio:g}:{variant}"
    return result


def sweep_hyper(
    alpha_grid: Sequence[float],
    beta_grid: Sequence[float],
    source: DomainSplits,
    target: DomainSplits,
    cfg: TrainConfig,
    seeds: Sequence[int],
    n_jobs: int = 1,
) -> list[RunResult]:
    """Full two-stage run per (alpha, beta, seed) grid point."""
    if not alpha_grid or not beta_grid:
        raise ValueError("hyper sweep needs non-empty alpha and beta grids")
    if any(a < 0 for a in alpha_grid) or any(b < 0 for b in beta_grid):
        raise ValueError("loss-weight grids must be non-negative")
    cells = []
    for a in alpha_grid:
        for b in beta_grid:
            for seed in seeds:
                cells.append((a, b, source, target, replace(cfg, seed=seed)))
    return _map_cells(_hyper_cell, cells, n_jobs)


def _hyper_cell(args) -> RunResult:
    a, b, source, target, cfg = args
    result = run_variant("full", source, target, replace(cfg, alpha=a, beta=b))
    result.cell = f"alpha={a:g},beta={b:g}"
    return result


def _map_cells(fn, cells, n_jobs: int):
    if n_jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, cells))


def write_metrics_csv(rows: Sequence[RunResult], path, timing: bool = False) -> None:
    """Sweep/ablation CSV; wall_ms is 0 unless timing output is requested."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant_or_cell", "seed", "auc", "logloss", "wall_ms"])
        for r in rows:
            w.writerow([r.cell, r.seed, repr(r.auc), repr(r.logloss), int(r.wall_ms) if timing else 0])


# ---------------------------------------------------------------------------
# benchmark setups
# ---------------------------------------------------------------------------

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_SPARSITY_RATIOS = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_ALPHA_GRID = (0.001, 0.01, 0.03, 0.1, 1.0)
DEFAULT_BETA_GRID = (0.01, 0.1, 1.0)


def default_benchmark_config() -> tuple[SyntheticConfig, TrainConfig]:
    """Desk-scale benchmark: 20k train examples per domain after the 8:1:1
    split, latent width 32, two-expert extractor; a run takes well under the
    two-minute budget on one core."""
    data_cfg = SyntheticConfig(
        latent_dim=8,
        n_users=4000,
        n_items_per_domain=2000,
        overlap_user_fraction=0.5,
        feature_noise_sigma=0.6,
        bucket_count=8,
        label_bias=0.0,
        n_examples=25000,
        seed=20240,
    )
    train_cfg = TrainConfig(
        alpha=0.05,
        beta=0.1,
        lr=2e-3,
        batch_size=256,
        max_epochs=15,
        patience=3,
        seed=0,
        extractor=ExtractorConfig(kind="mmoe", n_experts=2),
        d=32,
        emb_dim=16,
    )
    return data_cfg, train_cfg


def zero_noise_analysis_config() -> tuple[SyntheticConfig, TrainConfig]:
    """Noise-free generator for the translated-feature content analysis."""
    data_cfg = SyntheticConfig(
        latent_dim=8,
        n_users=1200,
        n_items_per_domain=3000,
        overlap_user_fraction=0.5,
        feature_noise_sigma=0.0,
        bucket_count=8,
        label_bias=0.0,
        n_examples=4000,
        seed=777,
    )
    train_cfg = TrainConfig(
        alpha=0.05,
        beta=0.1,
        lr=2e-3,
        batch_size=256,
        max_epochs=12,
        patience=3,
        seed=0,
        extractor=ExtractorConfig(kind="mmoe", n_experts=2),
        d=32,
        emb_dim=16,
    )
    return data_cfg, train_cfg


def prepare_benchmark(data_cfg: SyntheticConfig) -> tuple[DomainSplits, DomainSplits, Correspondence]:
    """Generate both domains, split 8:1:1 chronologically, and encode."""
    source, target, corr = generate_synthetic(data_cfg)
    return split_and_encode(source), split_and_encode(target), corr

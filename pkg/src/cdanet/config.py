"""Experiment configuration: flat sectioned key=value files.

Every defaulted field is echoed back into the resolved-config dump, so a dump
fully determines a rerun.  All randomness flows from explicit integer seeds
expanded through ``numpy.random.SeedSequence`` with fixed purpose tags (data
generation, parameter init, shuffling, subsampling), so components can be
reseeded independently; run seeds come from the [output] seeds list, the
dataset seed from [data] seed.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig
from .model import ExtractorConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Missing, unknown, or malformed configuration content."""


_SCHEMA = {
    "data": (
        "mode",
        "latent_dim",
        "n_users",
        "n_items_per_domain",
        "overlap_user_fraction",
        "feature_noise_sigma",
        "bucket_count",
        "label_bias",
        "n_examples",
        "seed",
        "source_csv",
        "target_csv",
        "source_schema",
        "target_schema",
        "label_threshold",
        "correspondence",
    ),
    "model": ("extractor", "d", "emb_dim", "n_experts", "n_shared_experts", "trunk_widths", "tower_hidden"),
    "train": ("alpha", "beta", "lr", "stage2_lr", "batch_size", "max_epochs", "patience", "eval_every"),
    "eval": ("k", "metric", "normalize", "ratios", "alpha_grid", "beta_grid", "ablation_variants"),
    "output": ("dir", "seeds", "timing"),
}


@dataclass(frozen=True)
class CsvDataSpec:
    source_csv: str
    target_csv: str
    source_schema: str
    target_schema: str
    label_threshold: float | None = None
    correspondence: str | None = None


@dataclass(frozen=True)
class EvalSettings:
    k: int = 5
    metric: str = "cosine"
    normalize: bool = False
    ratios: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    alpha_grid: tuple[float, ...] = (0.001, 0.01, 0.03, 0.1, 1.0)
    beta_grid: tuple[float, ...] = (0.01, 0.1, 1.0)
    ablation_variants: tuple[str, ...] = (
        "full",
        "wo_orth",
        "wo_cross",
        "wo_translation_network",
        "wo_augmentation_network",
    )


@dataclass(frozen=True)
class ExperimentConfig:
    data_mode: str = "synthetic"
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    csv: CsvDataSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: str = "runs/experiment"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    timing: bool = False


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return lineno
        elif key is not None and current == section and "=" in line:
            if line.split("=", 1)[0].strip() == key:
                return lineno
    return 0


def _parse_typed(section: str, key: str, raw: str, caster, text: str):
    try:
        return caster(raw)
    except (TypeError, ValueError):
        line = _line_of(text, section, key)
        raise ConfigError(f"[{section}] {key} (line {line}): cannot parse {raw!r}") from None


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(t) for t in raw.split(",") if t.strip() != "")


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(t) for t in raw.split(",") if t.strip() != "")


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"[{section}] (line {_line_of(text, section)}): unknown section")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                line = _line_of(text, section, key)
                raise ConfigError(f"[{section}] {key} (line {line}): unknown key")

    def get(section, key, default):
        if parser.has_option(section, key):
            return parser.get(section, key)
        return default

    def typed(section, key, default, caster):
        raw = get(section, key, None)
        if raw is None or raw == "":
            return default
        return _parse_typed(section, key, raw, caster, text)

    mode = get("data", "mode", "synthetic")
    if mode not in ("synthetic", "csv"):
        raise ConfigError(f"[data] mode (line {_line_of(text, 'data', 'mode')}): must be 'synthetic' or 'csv'")

    synthetic = None
    csv_spec = None
    if mode == "synthetic":
        synthetic = SyntheticConfig(
            latent_dim=typed("data", "latent_dim", 8, int),
            n_users=typed("data", "n_users", 4000, int),
            n_items_per_domain=typed("data", "n_items_per_domain", 2000, int),
            overlap_user_fraction=typed("data", "overlap_user_fraction", 0.5, float),
            feature_noise_sigma=typed("data", "feature_noise_sigma", 0.5, float),
            bucket_count=typed("data", "bucket_count", 8, int),
            label_bias=typed("data", "label_bias", 0.0, float),
            n_examples=typed("data", "n_examples", 25000, int),
            seed=typed("data", "seed", 0, int),
        )
    else:
        required = ("source_csv", "target_csv", "source_schema", "target_schema")
        values = {}
        for key in required:
            raw = get("data", key, "")
            if not raw:
                raise ConfigError(f"[data] {key}: required when mode=csv")
            if not Path(raw).exists():
                raise ConfigError(f"[data] {key}: file not found: {raw}")
            values[key] = raw
        corr = get("data", "correspondence", "") or None
        if corr and not Path(corr).exists():
            raise ConfigError(f"[data] correspondence: file not found: {corr}")
        csv_spec = CsvDataSpec(
            label_threshold=typed("data", "label_threshold", None, float),
            correspondence=corr,
            **values,
        )

    extractor = ExtractorConfig(
        kind=get("model", "extractor", "mmoe"),
        layer_widths=typed("model", "trunk_widths", None, _ints),
        n_experts=typed("model", "n_experts", 2, int),
        n_shared_experts=typed("model", "n_shared_experts", None, int),
    )
    eval_every = typed("train", "eval_every", 0, int)
    try:
        train = TrainConfig(
            alpha=typed("train", "alpha", 0.01, float),
            beta=typed("train", "beta", 0.1, float),
            lr=typed("train", "lr", 1e-3, float),
            stage2_lr=typed("train", "stage2_lr", None, float),
            batch_size=typed("train", "batch_size", 256, int),
            max_epochs=typed("train", "max_epochs", 200, int),
            patience=typed("train", "patience", 5, int),
            eval_every=eval_every if eval_every > 0 else None,
            seed=0,
            extractor=extractor,
            d=typed("model", "d", 128, int),
            emb_dim=typed("model", "emb_dim", 64, int),
            tower_hidden=typed("model", "tower_hidden", None, int),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

    eval_settings = EvalSettings(
        k=typed("eval", "k", 5, int),
        metric=get("eval", "metric", "cosine"),
        normalize=bool(typed("eval", "normalize", 0, int)),
        ratios=typed("eval", "ratios", EvalSettings.ratios, _floats),
        alpha_grid=typed("eval", "alpha_grid", EvalSettings.alpha_grid, _floats),
        beta_grid=typed("eval", "beta_grid", EvalSettings.beta_grid, _floats),
        ablation_variants=tuple(
            t.strip() for t in get("eval", "ablation_variants", ",".join(EvalSettings.ablation_variants)).split(",")
        ),
    )

    seeds = typed("output", "seeds", (0, 1, 2, 3, 4), _ints)
    if not seeds:
        raise ConfigError("[output] seeds: need at least one seed")
    return ExperimentConfig(
        data_mode=mode,
        synthetic=synthetic,
        csv=csv_spec,
        train=train,
        eval=eval_settings,
        output_dir=get("output", "dir", "runs/experiment"),
        seeds=seeds,
        timing=bool(typed("output", "timing", 0, int)),
    )


def resolved_text(cfg: ExperimentConfig) -> str:
    """Full key=value dump, defaults included; reparsing it reproduces cfg."""
    parser = configparser.ConfigParser(interpolation=None)
    data: dict[str, str] = {"mode": cfg.data_mode}
    if cfg.data_mode == "synthetic":
        s = cfg.synthetic
        data.update(
            latent_dim=str(s.latent_dim),
            n_users=str(s.n_users),
            n_items_per_domain=str(s.n_items_per_domain),
            overlap_user_fraction=repr(s.overlap_user_fraction),
            feature_noise_sigma=repr(s.feature_noise_sigma),
            bucket_count=str(s.bucket_count),
            label_bias=repr(s.label_bias),
            n_examples=str(s.n_examples),
            seed=str(s.seed),
        )
    else:
        c = cfg.csv
        data.update(
            source_csv=c.source_csv,
            target_csv=c.target_csv,
            source_schema=c.source_schema,
            target_schema=c.target_schema,
            label_threshold="" if c.label_threshold is None else repr(c.label_threshold),
            correspondence=c.correspondence or "",
        )
    parser["data"] = data
    ex = cfg.train.extractor
    parser["model"] = {
        "extractor": ex.kind,
        "d": str(cfg.train.d),
        "emb_dim": str(cfg.train.emb_dim),
        "n_experts": str(ex.n_experts),
        "n_shared_experts": "" if ex.n_shared_experts is None else str(ex.n_shared_experts),
        "trunk_widths": "" if ex.layer_widths is None else ",".join(str(w) for w in ex.layer_widths),
        "tower_hidden": "" if cfg.train.tower_hidden is None else str(cfg.train.tower_hidden),
    }
    parser["train"] = {
        "alpha": repr(cfg.train.alpha),
        "beta": repr(cfg.train.beta),
        "lr": repr(cfg.train.lr),
        "stage2_lr": "" if cfg.train.stage2_lr is None else repr(cfg.train.stage2_lr),
        "batch_size": str(cfg.train.batch_size),
        "max_epochs": str(cfg.train.max_epochs),
        "patience": str(cfg.train.patience),
        "eval_every": str(cfg.train.eval_every or 0),
    }
    parser["eval"] = {
        "k": str(cfg.eval.k),
        "metric": cfg.eval.metric,
        "normalize": str(int(cfg.eval.normalize)),
        "ratios": ",".join(repr(r) for r in cfg.eval.ratios),
        "alpha_grid": ",".join(repr(a) for a in cfg.eval.alpha_grid),
        "beta_grid": ",".join(repr(b) for b in cfg.eval.beta_grid),
        "ablation_variants": ",".join(cfg.eval.ablation_variants),
    }
    parser["output"] = {
        "dir": cfg.output_dir,
        "seeds": ",".join(str(s) for s in cfg.seeds),
        "timing": str(int(cfg.timing)),
    }
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(resolved_text(cfg), encoding="utf-8")

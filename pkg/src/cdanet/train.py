"""Adam optimizer, the two-stage trainer, early stopping, and checkpoints.

Every run is a pure function of (datasets, config): parameter init, shuffle
order, and evaluation cadence all derive from the config seed, so rerunning
reproduces every logged metric bit for bit in a single-threaded process.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .data import Batch, DomainSplits, EncodedDataset, batches
from .evaluation import evaluate, evaluate_baseline
from .model import (
    ExtractorConfig,
    LossBreakdown,
    ModelAssembly,
    ModelConfig,
    SingleDomainModel,
    loss_augmentation,
    loss_single,
    loss_translation_total,
)

CHECKPOINT_MAGIC = b"CDA1"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """A loss component became non-finite during training."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    beta: float = 0.1
    lr: float = 1e-3
    stage2_lr: float | None = None  # None: lr * 0.1 (gentle fine-tuning)
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 5
    eval_every: int | None = None  # None: validate once per epoch
    seed: int = 0
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    d: int = 128
    emb_dim: int = 64
    tower_hidden: int | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lr <= 0 or (self.stage2_lr is not None and self.stage2_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")

    @property
    def effective_stage2_lr(self) -> float:
        return self.stage2_lr if self.stage2_lr is not None else self.lr * 0.1

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, emb_dim=self.emb_dim, extractor=self.extractor, tower_hidden=self.tower_hidden)


class Adam:
    """Standard Adam with bias correction; gradients are zeroed after a step."""

    def __init__(self, params: list[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v = {p.name: np.zeros_like(p.values) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if p.tensor.grad is None:
                raise RuntimeError(f"missing gradient for trainable parameter '{p.name}'")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.tensor.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values[...] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.tensor.zero_grad()

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        for name in self.m:
            if name not in state["m"]:
                raise CheckpointError(f"optimizer state is missing moments for '{name}'")
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalPoint:
    step: int
    epoch: int
    losses: dict
    val_auc: float
    extras: dict
    wall_ms: float


@dataclass
class RunRecord:
    stage: int
    history: list[EvalPoint] = field(default_factory=list)
    best_val_auc: float = float("-inf")
    best_step: int = -1
    stop_reason: str = ""

    def write_jsonl(self, path, timing: bool = False) -> None:
        """One record per validation; wall_ms is 0 unless timing is requested."""
        with open(path, "w", encoding="utf-8") as fh:
            for pt in self.history:
                rec = {"step": pt.step, "epoch": pt.epoch}
                rec.update(pt.losses)
                rec["val_auc"] = pt.val_auc
                rec.update(pt.extras)
                rec["wall_ms"] = pt.wall_ms if timing else 0
                fh.write(json.dumps(rec) + "\n")


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    for name in ("vani_s", "vani_t", "cross_s", "cross_t", "orth", "aug", "total"):
        v = getattr(breakdown, name)
        if v is not None and not np.isfinite(v):
            raise DivergenceError(f"loss component '{name}' became non-finite at step {step}")


@dataclass
class _LoopState:
    step: int = 0
    start_epoch: int = 0
    evals_without_improvement: int = 0
    best_val_auc: float = float("-inf")
    best_step: int = -1


def _train_loop(
    *,
    stage: int,
    cfg: TrainConfig,
    epoch_batches: Callable[[int], Iterator],
    train_step: Callable[[object], LossBreakdown],
    validate: Callable[[], tuple[float, dict]],
    get_state: Callable[[], dict],
    set_state: Callable[[dict], None],
    loop_state: _LoopState,
    on_checkpoint: Callable[[int, _LoopState], None] | None = None,
) -> RunRecord:
    record = RunRecord(stage=stage)
    best_params: dict | None = None
    t0 = time.perf_counter()
    last_losses: dict = {}
    stop = False

    def run_validation(epoch: int) -> None:
        nonlocal best_params, stop
        val_auc, extras = validate()
        wall_ms = (time.perf_counter() - t0) * 1000.0
        record.history.append(
            EvalPoint(loop_state.step, epoch, dict(last_losses), val_auc, extras, wall_ms)
        )
        if val_auc > loop_state.best_val_auc:
            loop_state.best_val_auc = val_auc
            loop_state.best_step = loop_state.step
            loop_state.evals_without_improvement = 0
            best_params = get_state()
        else:
            loop_state.evals_without_improvement += 1
            if loop_state.evals_without_improvement >= cfg.patience:
                stop = True
        if on_checkpoint is not None:
            on_checkpoint(epoch, loop_state)

    for epoch in range(loop_state.start_epoch, cfg.max_epochs):
        for batch_pack in epoch_batches(epoch):
            breakdown = train_step(batch_pack)
            loop_state.step += 1
            _check_finite(breakdown, loop_state.step)
            last_losses = breakdown.as_dict()
            if cfg.eval_every and loop_state.step % cfg.eval_every == 0:
                run_validation(epoch)
                if stop:
                    break
        if not cfg.eval_every and not stop:
            run_validation(epoch)
        if stop:
            record.stop_reason = "early_stop"
            break
    else:
        record.stop_reason = "max_epochs"

    if best_params is not None:
        set_state(best_params)
    record.best_val_auc = loop_state.best_val_auc
    record.best_step = loop_state.best_step
    return record


def _paired_epoch(source_train: EncodedDataset, target_train: EncodedDataset, cfg: TrainConfig, epoch: int):
    """One batch per domain per step; the larger train set drives the epoch
    and the smaller one restarts (fresh permutation) as needed."""
    ns, nt = len(source_train), len(target_train)
    src_seed, tgt_seed = cfg.seed * 2, cfg.seed * 2 + 1

    def cycling(n, seed):
        rnd = 0
        while True:
            yield from batches(n, cfg.batch_size, seed, epoch, rnd)
            rnd += 1

    if ns >= nt:
        driver = batches(ns, cfg.batch_size, src_seed, epoch)
        follower = cycling(nt, tgt_seed)
        for src_idx in driver:
            yield source_train.batch(src_idx), target_train.batch(next(follower))
    else:
        driver = batches(nt, cfg.batch_size, tgt_seed, epoch)
        follower = cycling(ns, src_seed)
        for tgt_idx in driver:
            yield source_train.batch(next(follower)), target_train.batch(tgt_idx)


def train_translation(
    source: DomainSplits,
    target: DomainSplits,
    cfg: TrainConfig,
    checkpoint_dir=None,
    resume_from: "CheckpointPayload | None" = None,
) -> tuple[ModelAssembly, RunRecord]:
    """First stage: joint vanilla objectives, cross-supervised translation,
    and the orthogonality penalty; early stop on target validation AUC."""
    model = ModelAssembly(source.schema, target.schema, cfg.model_config(), cfg.seed, stage=1)
    opt = Adam(model.trainable_parameters(), cfg.lr)
    loop_state = _LoopState()
    if resume_from is not None:
        _apply_resume(model, opt, resume_from, loop_state)

    def train_step(pack) -> LossBreakdown:
        batch_s, batch_t = pack
        with Tape() as tape:
            total, breakdown = loss_translation_total(model, batch_s, batch_t, cfg.alpha, cfg.beta)
            tape.backward(total)
        opt.step()
        return breakdown

    def validate():
        val = evaluate(model, target.val, stage=1, domain="target")
        src = evaluate(model, source.val, stage=1, domain="source")
        return val["auc"], {"source_val_auc": src["auc"]}

    on_checkpoint = _periodic_saver(model, opt, checkpoint_dir) if checkpoint_dir else None
    record = _train_loop(
        stage=1,
        cfg=cfg,
        epoch_batches=lambda epoch: _paired_epoch(source.train, target.train, cfg, epoch),
        train_step=train_step,
        validate=validate,
        get_state=model.state,
        set_state=model.load_state,
        loop_state=loop_state,
        on_checkpoint=on_checkpoint,
    )
    return model, record


def transfer_parameters(translation_model: ModelAssembly, aug_domain: str = "target") -> ModelAssembly:
    """Copy embedding, extractor, and both translators into a fresh stage-2
    assembly whose augmented tower is newly initialized; no array aliasing."""
    src_schema = translation_model.schemas["source"]
    tgt_schema = translation_model.schemas["target"]
    aug = ModelAssembly(
        src_schema, tgt_schema, translation_model.config, translation_model.seed, stage=2, aug_domain=aug_domain
    )
    for name, p in aug.params.items():
        donor = translation_model.params.get(name)
        if donor is None:
            continue  # the augmented tower is new
        if donor.values.shape != p.values.shape:
            raise ValueError(f"transfer: parameter '{name}' has shape {donor.values.shape} vs {p.values.shape}")
        p.values[...] = donor.values  # value copy into a distinct buffer
    return aug


def train_augmentation(
    target: DomainSplits,
    transferred_model: ModelAssembly,
    cfg: TrainConfig,
    zero_translated: bool = False,
    checkpoint_dir=None,
    resume_from: "CheckpointPayload | None" = None,
) -> tuple[ModelAssembly, RunRecord]:
    """Second stage: single CTR objective over augmented latents on the
    augmentation domain only (plus the retained orthogonality penalty)."""
    model = transferred_model
    if model.stage != 2:
        raise ValueError("train_augmentation needs a stage-2 assembly (see transfer_parameters)")
    opt = Adam(model.active_parameters(), cfg.effective_stage2_lr)
    loop_state = _LoopState()
    if resume_from is not None:
        _apply_resume(model, opt, resume_from, loop_state)

    def epoch_batches(epoch):
        for idx in batches(len(target.train), cfg.batch_size, cfg.seed * 2 + 1, epoch):
            yield target.train.batch(idx)

    def train_step(batch: Batch) -> LossBreakdown:
        with Tape() as tape:
            total, breakdown = loss_augmentation(model, batch, cfg.beta, zero_translated=zero_translated)
            tape.backward(total)
        opt.step()
        return breakdown

    def validate():
        val = evaluate(model, target.val, stage=2)
        return val["auc"], {}

    on_checkpoint = _periodic_saver(model, opt, checkpoint_dir) if checkpoint_dir else None
    record = _train_loop(
        stage=2,
        cfg=cfg,
        epoch_batches=epoch_batches,
        train_step=train_step,
        validate=validate,
        get_state=model.state,
        set_state=model.load_state,
        loop_state=loop_state,
        on_checkpoint=on_checkpoint,
    )
    return model, record


def train_single_domain(splits: DomainSplits, cfg: TrainConfig) -> tuple[SingleDomainModel, RunRecord]:
    """Single-domain MLP baseline trained on one domain's data only."""
    model = SingleDomainModel(splits.schema, cfg.model_config(), cfg.seed)
    opt = Adam(model.trainable_parameters(), cfg.lr)

    def epoch_batches(epoch):
        for idx in batches(len(splits.train), cfg.batch_size, cfg.seed * 2 + 1, epoch):
            yield splits.train.batch(idx)

    def train_step(batch: Batch) -> LossBreakdown:
        with Tape() as tape:
            total, breakdown = loss_single(model, batch)
            tape.backward(total)
        opt.step()
        return breakdown

    def validate():
        return evaluate_baseline(model, splits.val)["auc"], {}

    record = _train_loop(
        stage=1,
        cfg=cfg,
        epoch_batches=epoch_batches,
        train_step=train_step,
        validate=validate,
        get_state=model.state,
        set_state=model.load_state,
        loop_state=_LoopState(),
    )
    return model, record


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class CheckpointPayload:
    params: dict
    optim: dict | None
    meta: dict


def save_checkpoint(model, path, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON meta, named fp64 records."""
    meta = dict(meta or {})
    if hasattr(model, "fingerprint"):
        meta.setdefault("fingerprint", model.fingerprint())
    names = list(model.params.keys())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = model.params[name].values
            _write_record(fh, name, arr)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Qddd", optimizer.t, optimizer.beta1, optimizer.beta2, optimizer.eps))
            for name in names:
                fh.write(np.ascontiguousarray(optimizer.m[name], dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(optimizer.v[name], dtype="<f8").tobytes())


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> CheckpointPayload:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        params = {}
        order = []
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "record name length"))
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"ndim of '{name}'"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"shape of '{name}'"))[0] for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 8, f"values of '{name}'")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            order.append(name)
        (has_optim,) = struct.unpack("<B", _read_exact(fh, 1, "optimizer flag"))
        optim = None
        if has_optim:
            t, b1, b2, eps = struct.unpack("<Qddd", _read_exact(fh, 32, "optimizer header"))
            m, v = {}, {}
            for name in order:
                size = params[name].size * 8
                m[name] = np.frombuffer(_read_exact(fh, size, f"m of '{name}'"), dtype="<f8").reshape(
                    params[name].shape
                ).copy()
                v[name] = np.frombuffer(_read_exact(fh, size, f"v of '{name}'"), dtype="<f8").reshape(
                    params[name].shape
                ).copy()
            optim = {"t": t, "beta1": b1, "beta2": b2, "eps": eps, "m": m, "v": v}
    return CheckpointPayload(params=params, optim=optim, meta=meta)


def apply_checkpoint(model, payload: CheckpointPayload, optimizer: Adam | None = None) -> None:
    """Install checkpoint values; fails loudly on any name or shape mismatch."""
    for name, p in model.params.items():
        if name not in payload.params:
            raise CheckpointError(f"checkpoint is missing parameter '{name}'")
        arr = payload.params[name]
        if tuple(arr.shape) != p.values.shape:
            raise CheckpointError(
                f"parameter '{name}': checkpoint shape {tuple(arr.shape)} != model shape {p.values.shape}"
            )
    extra = [k for k in payload.params if k not in model.params]
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameter '{extra[0]}'")
    for name, p in model.params.items():
        p.values[...] = payload.params[name]
    if optimizer is not None:
        if payload.optim is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        optimizer.load_state_dict(payload.optim)


def _periodic_saver(model, opt: Adam, checkpoint_dir):
    from pathlib import Path

    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)

    def save(epoch: int, loop_state: _LoopState) -> None:
        meta = {
            "stage": model.stage,
            "step": loop_state.step,
            "epoch_completed": epoch,
            "evals_without_improvement": loop_state.evals_without_improvement,
            "best_val_auc": loop_state.best_val_auc,
            "best_step": loop_state.best_step,
        }
        save_checkpoint(model, out / f"epoch{epoch:04d}.ckpt", optimizer=opt, meta=meta)

    return save


def _apply_resume(model, opt: Adam, payload: CheckpointPayload, loop_state: _LoopState) -> None:
    apply_checkpoint(model, payload, optimizer=opt if payload.optim is not None else None)
    meta = payload.meta
    loop_state.step = int(meta.get("step", 0))
    loop_state.start_epoch = int(meta.get("epoch_completed", -1)) + 1
    loop_state.evals_without_improvement = int(meta.get("evals_without_improvement", 0))
    loop_state.best_val_auc = float(meta.get("best_val_auc", float("-inf")))
    loop_state.best_step = int(meta.get("best_step", -1))

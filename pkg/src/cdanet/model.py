"""Network components and objectives for two-domain CTR with latent translation.

A ModelAssembly owns every parameter of one training run under hierarchical
names ("emb.shared.user_id.table", "trans.target.W", ...).  Stage 1 carries a
prediction tower per domain plus a square translator per domain; stage 2
replaces the towers with one freshly initialized tower over the concatenation
of a latent feature and its translated counterpart.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import Batch, Schema

EXTRACTOR_KINDS = ("indep_mlp", "shared_mlp", "mmoe", "ple")
DOMAINS = ("source", "target")

_TAG_INIT = 0x111717


@dataclass(frozen=True)
class ExtractorConfig:
    """Feature-extractor family and sizing.

    ``layer_widths`` are the trunk/expert widths after the per-domain input
    layer; the last width must equal the latent size d (default (d, d)).
    For "ple", ``n_experts`` counts per-domain private experts and
    ``n_shared_experts`` (default: same) counts the shared ones.
    """

    kind: str = "mmoe"
    layer_widths: tuple[int, ...] | None = None
    n_experts: int = 2
    n_shared_experts: int | None = None

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor kind '{self.kind}' (choose from {EXTRACTOR_KINDS})")
        if self.kind in ("mmoe", "ple") and self.n_experts < 1:
            raise ValueError(f"{self.kind} needs n_experts >= 1")
        if self.kind == "ple" and self.n_shared_experts is not None and self.n_shared_experts < 0:
            raise ValueError("n_shared_experts must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    emb_dim: int = 64
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    tower_hidden: int | None = None  # None: use d

    def trunk_widths(self) -> tuple[int, ...]:
        widths = self.extractor.layer_widths or (self.d, self.d)
        if widths[-1] != self.d:
            raise ValueError(f"extractor layer_widths must end at d={self.d}, got {widths}")
        return widths


class ParamRegistry:
    """Creates uniquely named parameters with a shared init stream."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, values, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        p = Parameter(name, values, trainable)
        self.params[name] = p
        return p

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-a, a, size=(fan_in, fan_out)))


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, fan_in: int, fan_out: int):
        self.W = reg.glorot(f"{name}.W", fan_in, fan_out)
        self.b = reg.add(f"{name}.b", np.zeros((1, fan_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W.tensor), self.b.tensor)


class MLP:
    """Dense stack with relu between layers and a linear last layer."""

    def __init__(self, reg: ParamRegistry, name: str, dims: Sequence[int]):
        self.layers = [Linear(reg, f"{name}.l{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class FieldEmbedding:
    """Embedding table for a categorical field, or a linear map for a dense one."""

    def __init__(self, reg: ParamRegistry, prefix: str, spec, emb_dim: int):
        self.spec = spec
        if spec.kind == "dense":
            self.proj = Linear(reg, f"{prefix}.proj", spec.dense_dim, emb_dim)
            self.table = None
        else:
            self.table = reg.glorot(f"{prefix}.table", spec.vocab_size, emb_dim)
            self.proj = None

    def __call__(self, column) -> Tensor:
        spec = self.spec
        if spec.kind == "dense":
            return self.proj(Tensor(column))
        if spec.kind == "multi_hot":
            flat, offsets = column
            return ad.pool_rows(self.table.tensor, flat, offsets, context=spec.name)
        return ad.gather_rows(self.table.tensor, column, context=spec.name)


class EmbeddingLayer:
    """Per-field embeddings; overlapped fields reference one shared object."""

    def __init__(self, reg: ParamRegistry, source_schema: Schema, target_schema: Schema, emb_dim: int):
        self.emb_dim = emb_dim
        self.schemas = {"source": source_schema, "target": target_schema}
        self.fields = {"source": {}, "target": {}}
        src_by_name = {f.name: f for f in source_schema.fields}
        tgt_by_name = {f.name: f for f in target_schema.fields}
        for f in source_schema.fields:
            other = tgt_by_name.get(f.name)
            if f.overlapped:
                if other is None or other != f:
                    raise ValueError(
                        f"overlapped field '{f.name}' must exist with an identical spec in both domains"
                    )
                self.fields["source"][f.name] = FieldEmbedding(reg, f"emb.shared.{f.name}", f, emb_dim)
            else:
                self.fields["source"][f.name] = FieldEmbedding(reg, f"emb.source.{f.name}", f, emb_dim)
        for f in target_schema.fields:
            if f.overlapped:
                other = src_by_name.get(f.name)
                if other is None or other != f:
                    raise ValueError(
                        f"overlapped field '{f.name}' must exist with an identical spec in both domains"
                    )
                self.fields["target"][f.name] = self.fields["source"][f.name]  # shared object
            else:
                self.fields["target"][f.name] = FieldEmbedding(reg, f"emb.target.{f.name}", f, emb_dim)

    def width(self, domain: str) -> int:
        return len(self.schemas[domain].fields) * self.emb_dim

    def __call__(self, domain: str, batch: Batch) -> Tensor:
        schema = self.schemas[domain]
        parts = [self.fields[domain][f.name](batch.columns[f.name]) for f in schema.fields]
        return reduce(ad.concat, parts)


class _Extractor:
    """Per-domain input layer followed by a kind-specific trunk ending at width d."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, in_widths: dict[str, int]):
        ex = cfg.extractor
        d = cfg.d
        trunk = (d,) + cfg.trunk_widths()
        self.kind = ex.kind
        self.adapters = {dom: Linear(reg, f"ext.{dom}.adapter", in_widths[dom], d) for dom in DOMAINS}
        if ex.kind == "indep_mlp":
            self.trunks = {dom: MLP(reg, f"ext.{dom}.trunk", trunk) for dom in DOMAINS}
        elif ex.kind == "shared_mlp":
            shared = MLP(reg, "ext.shared.trunk", trunk)
            self.trunks = {dom: shared for dom in DOMAINS}
        elif ex.kind == "mmoe":
            self.experts = [MLP(reg, f"ext.shared.expert{j}", trunk) for j in range(ex.n_experts)]
            self.gates = {dom: Linear(reg, f"ext.{dom}.gate", d, ex.n_experts) for dom in DOMAINS}
        else:  # ple
            n_shared = ex.n_experts if ex.n_shared_experts is None else ex.n_shared_experts
            self.shared_experts = [MLP(reg, f"ext.shared.expert{j}", trunk) for j in range(n_shared)]
            self.private_experts = {
                dom: [MLP(reg, f"ext.{dom}.private{j}", trunk) for j in range(ex.n_experts)]
                for dom in DOMAINS
            }
            n_total = ex.n_experts + n_shared
            self.gates = {dom: Linear(reg, f"ext.{dom}.gate", d, n_total) for dom in DOMAINS}

    def __call__(self, domain: str, e: Tensor) -> Tensor:
        # the adapter stays linear so each domain can map its embedding space
        # onto a common basis without losing sign information
        a = self.adapters[domain](e)
        if self.kind in ("indep_mlp", "shared_mlp"):
            return self.trunks[domain](a)
        if self.kind == "mmoe":
            experts = self.experts
        else:
            experts = self.private_experts[domain] + self.shared_experts
        gate = ad.softmax_rows(self.gates[domain](a))
        mixed = None
        for j, expert in enumerate(experts):
            term = ad.mul(ad.select_columns(gate, j, j + 1), expert(a))
            mixed = term if mixed is None else ad.add(mixed, term)
        return mixed


class ModelAssembly:
    """Every parameter and forward path of one run.

    stage 1: towers "source"/"target" plus translators.
    stage 2: same embedding/extractor/translator layout plus one augmented
    tower over [z, z'] for ``aug_domain``; the stage-1 towers are absent.
    """

    def __init__(
        self,
        source_schema: Schema,
        target_schema: Schema,
        config: ModelConfig,
        seed: int,
        stage: int = 1,
        aug_domain: str = "target",
    ):
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        if aug_domain not in DOMAINS:
            raise ValueError(f"aug_domain must be one of {DOMAINS}")
        self.config = config
        self.seed = seed
        self.stage = stage
        self.aug_domain = aug_domain
        self.schemas = {"source": source_schema, "target": target_schema}
        rng = np.random.default_rng(np.random.SeedSequence([_TAG_INIT, seed, stage]))
        reg = ParamRegistry(rng)
        self.embedding = EmbeddingLayer(reg, source_schema, target_schema, config.emb_dim)
        in_widths = {dom: self.embedding.width(dom) for dom in DOMAINS}
        self.extractor = _Extractor(reg, config, in_widths)
        d = config.d
        self.translators = {dom: reg.add(f"trans.{dom}.W", np.eye(d)) for dom in DOMAINS}
        hidden = config.tower_hidden or d
        if stage == 1:
            self.towers = {dom: MLP(reg, f"tower.{dom}", (d, hidden, 1)) for dom in DOMAINS}
            self.aug_tower = None
        else:
            self.towers = {}
            self.aug_tower = MLP(reg, f"tower.{aug_domain}_aug", (2 * d, hidden, 1))
        self.params = reg.params

    # forward paths -------------------------------------------------------

    def latent(self, domain: str, batch: Batch) -> Tensor:
        return self.extractor(domain, self.embedding(domain, batch))

    def translated(self, domain: str, z: Tensor) -> Tensor:
        """Apply the domain's square translator (row-vector convention)."""
        return ad.matmul(z, ad.transpose(self.translators[domain].tensor))

    def score(self, domain: str, z: Tensor) -> Tensor:
        if not self.towers:
            raise ValueError(f"stage-{self.stage} assembly has no per-domain towers")
        return self.towers[domain](z)

    def score_aug(self, z_aug: Tensor) -> Tensor:
        if self.aug_tower is None:
            raise ValueError("stage-1 assembly has no augmented tower")
        return self.aug_tower(z_aug)

    # parameter plumbing ----------------------------------------------------

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def active_parameters(self) -> list[Parameter]:
        """Parameters the current stage's objective actually reaches.

        Stage 1 touches everything; stage 2 optimizes only the augmentation
        domain's path (shared and own-domain embeddings and extractor parts,
        its translator, and the fresh tower) while the other domain's private
        parameters ride along untouched in the assembly.
        """
        if self.stage == 1:
            return self.trainable_parameters()
        dom = self.aug_domain
        prefixes = (
            "emb.shared.",
            f"emb.{dom}.",
            "ext.shared.",
            f"ext.{dom}.",
            f"trans.{dom}.",
            f"tower.{dom}_aug",
        )
        return [p for name, p in self.params.items() if p.trainable and name.startswith(prefixes)]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in state:
                if strict:
                    raise ValueError(f"checkpoint is missing parameter '{name}'")
                continue
            arr = state[name]
            if tuple(arr.shape) != p.values.shape:
                raise ValueError(
                    f"parameter '{name}': checkpoint shape {tuple(arr.shape)} != model shape {p.values.shape}"
                )
            p.values[...] = arr
        if strict:
            extra = [k for k in state if k not in self.params]
            if extra:
                raise ValueError(f"checkpoint has unknown parameter '{extra[0]}'")

    def fingerprint(self) -> str:
        ex = self.config.extractor
        schema_sig = ";".join(
            f"{dom}:" + ",".join(f"{f.name}/{f.kind}/{f.width}/{int(f.overlapped)}" for f in sch.fields)
            for dom, sch in sorted(self.schemas.items())
        )
        sig = (
            f"d={self.config.d};emb={self.config.emb_dim};kind={ex.kind};"
            f"widths={self.config.trunk_widths()};ne={ex.n_experts};ns={ex.n_shared_experts};"
            f"hidden={self.config.tower_hidden};stage={self.stage};aug={self.aug_domain};{schema_sig}"
        )
        return hashlib.sha256(sig.encode()).hexdigest()[:16]


class SingleDomainModel:
    """Plain one-domain CTR model (embedding, private MLP extractor, tower)."""

    def __init__(self, schema: Schema, config: ModelConfig, seed: int):
        self.config = config
        self.schema = schema
        rng = np.random.default_rng(np.random.SeedSequence([_TAG_INIT, seed, 0]))
        reg = ParamRegistry(rng)
        self.fields = {
            f.name: FieldEmbedding(reg, f"emb.single.{f.name}", f, config.emb_dim) for f in schema.fields
        }
        d = config.d
        self.adapter = Linear(reg, "ext.single.adapter", len(schema.fields) * config.emb_dim, d)
        self.trunk = MLP(reg, "ext.single.trunk", (d,) + config.trunk_widths())
        hidden = config.tower_hidden or d
        self.tower = MLP(reg, "tower.single", (d, hidden, 1))
        self.params = reg.params

    def logits(self, batch: Batch) -> Tensor:
        parts = [self.fields[f.name](batch.columns[f.name]) for f in self.schema.fields]
        e = reduce(ad.concat, parts)
        z = self.trunk(self.adapter(e))
        return self.tower(z)

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ValueError(f"checkpoint is missing parameter '{name}'")
            if tuple(state[name].shape) != p.values.shape:
                raise ValueError(f"parameter '{name}': shape mismatch")
            p.values[...] = state[name]


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar components of one optimization step, plus their weighted total."""

    total: float
    vani_s: float | None = None
    vani_t: float | None = None
    cross_s: float | None = None
    cross_t: float | None = None
    orth: float | None = None
    aug: float | None = None
    alpha: float | None = None
    beta: float | None = None

    def as_dict(self) -> dict[str, float]:
        out = {"loss_total": self.total}
        for key in ("vani_s", "vani_t", "cross_s", "cross_t", "orth", "aug"):
            v = getattr(self, key)
            if v is not None:
                out[f"loss_{key}"] = v
        return out


def combine_translation_losses(
    vani_s: float, vani_t: float, cross_s: float, cross_t: float, orth: float, alpha: float, beta: float
) -> float:
    """Weighted total: vanilla terms plus alpha*cross terms plus beta*orth."""
    return vani_s + vani_t + alpha * (cross_s + cross_t) + beta * orth


def _other(domain: str) -> str:
    return "target" if domain == "source" else "source"


def loss_vanilla(model: ModelAssembly, domain: str, z: Tensor, labels: Tensor) -> Tensor:
    """Own-domain tower scored against own labels."""
    return ad.bce_with_logits(model.score(domain, z), labels)


def loss_cross(model: ModelAssembly, domain: str, z: Tensor, labels: Tensor) -> Tensor:
    """Translate ``domain``'s latents, score with the *opposite* tower against
    the native labels; this is what trains the translators."""
    z_translated = model.translated(domain, z)
    return ad.bce_with_logits(model.score(_other(domain), z_translated), labels)


def _orth_term(w: Parameter, z: Tensor) -> Tensor:
    wt = ad.transpose(w.tensor)
    residual = ad.sub(ad.matmul(ad.matmul(z, wt), w.tensor), z)
    return ad.scale(ad.frobenius_sq(residual), 1.0 / z.shape[0])


def loss_orth(
    w_source: Parameter | None,
    w_target: Parameter | None,
    z_source: Tensor | None,
    z_target: Tensor | None,
) -> Tensor:
    """Penalty ||W^T(Wz) - z||_F^2 per domain, each divided by its batch size.

    The penalty is zero exactly when the translator acts orthogonally on the
    batch, which preserves norms and angles between translated latents.
    Domains whose (W, z) pair is None are skipped.
    """
    terms = []
    if w_source is not None and z_source is not None:
        terms.append(_orth_term(w_source, z_source))
    if w_target is not None and z_target is not None:
        terms.append(_orth_term(w_target, z_target))
    if not terms:
        raise ValueError("loss_orth needs at least one (translator, latent) pair")
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def loss_translation_total(
    model: ModelAssembly, batch_s: Batch, batch_t: Batch, alpha: float, beta: float
) -> tuple[Tensor, LossBreakdown]:
    """Full first-stage objective over one minibatch per domain."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    z_s = model.latent("source", batch_s)
    z_t = model.latent("target", batch_t)
    y_s = Tensor(batch_s.labels)
    y_t = Tensor(batch_t.labels)
    vani_s = loss_vanilla(model, "source", z_s, y_s)
    vani_t = loss_vanilla(model, "target", z_t, y_t)
    cross_s = loss_cross(model, "source", z_s, y_s)
    cross_t = loss_cross(model, "target", z_t, y_t)
    orth = loss_orth(model.translators["source"], model.translators["target"], z_s, z_t)
    total = ad.add(
        ad.add(vani_s, vani_t),
        ad.add(ad.scale(ad.add(cross_s, cross_t), alpha), ad.scale(orth, beta)),
    )
    breakdown = LossBreakdown(
        total=total.item(),
        vani_s=vani_s.item(),
        vani_t=vani_t.item(),
        cross_s=cross_s.item(),
        cross_t=cross_t.item(),
        orth=orth.item(),
        alpha=alpha,
        beta=beta,
    )
    recombined = combine_translation_losses(
        breakdown.vani_s, breakdown.vani_t, breakdown.cross_s, breakdown.cross_t, breakdown.orth, alpha, beta
    )
    if abs(recombined - breakdown.total) > 1e-10:
        raise RuntimeError(
            f"loss decomposition drifted: total={breakdown.total!r} vs components={recombined!r}"
        )
    return total, breakdown


def augment(z: Tensor, z_translated: Tensor) -> Tensor:
    """Concatenate the original latent with its translated view, original first."""
    if z.shape != z_translated.shape:
        raise ad.ShapeError(f"augment: shapes {z.shape} and {z_translated.shape} differ")
    return ad.concat(z, z_translated)


def loss_augmentation(
    model: ModelAssembly, batch: Batch, beta: float, zero_translated: bool = False
) -> tuple[Tensor, LossBreakdown]:
    """Second-stage objective: BCE of the augmented tower on ``aug_domain``
    plus the retained orthogonality penalty on that domain's translator.

    ``zero_translated`` blanks the translated half, reducing the run to plain
    single-tower fine-tuning (ablation hook).
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    domain = model.aug_domain
    z = model.latent(domain, batch)
    z_translated = model.translated(domain, z)
    if zero_translated:
        z_translated = ad.scale(z_translated, 0.0)
    logits = model.score_aug(augment(z, z_translated))
    aug = ad.bce_with_logits(logits, Tensor(batch.labels))
    if domain == "source":
        orth = loss_orth(model.translators["source"], None, z, None)
    else:
        orth = loss_orth(None, model.translators["target"], None, z)
    total = ad.add(aug, ad.scale(orth, beta))
    breakdown = LossBreakdown(
        total=total.item(), aug=aug.item(), orth=orth.item(), beta=beta
    )
    if abs((breakdown.aug + beta * breakdown.orth) - breakdown.total) > 1e-10:
        raise RuntimeError("loss decomposition drifted in augmentation objective")
    return total, breakdown


def loss_single(model: SingleDomainModel, batch: Batch) -> tuple[Tensor, LossBreakdown]:
    loss = ad.bce_with_logits(model.logits(batch), Tensor(batch.labels))
    return loss, LossBreakdown(total=loss.item(), aug=loss.item())

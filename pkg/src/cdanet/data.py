"""Feature schemas, CSV ingestion, a two-domain synthetic generator with known
item correspondence, chronological splitting, and deterministic batching.

All randomness is driven by ``numpy.random.SeedSequence`` keyed on explicit
integers, so every operation is a pure function of (inputs, seed) regardless
of platform.  Datasets are immutable after construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterator, Sequence

import numpy as np

FIELD_KINDS = ("id", "one_hot", "multi_hot", "dense")

# SeedSequence tags separating independent random streams
_TAG_GENERATOR = 0x5EED01
_TAG_SHUFFLE = 0x5EED02
_TAG_SUBSAMPLE = 0x5EED03

# synthetic feature layout: bucketized projection coordinates per side, plus
# one dense field carrying the raw (noisy) projections
_N_USER_COORDS = 3
_N_ITEM_COORDS = 3


class DataError(ValueError):
    """Malformed schema, CSV content, or split request."""


# ---------------------------------------------------------------------------
# schema and examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSpec:
    """One feature field: categorical kinds carry a vocabulary, dense a width."""

    name: str
    kind: str
    vocab_size: int | None = None
    dense_dim: int | None = None
    overlapped: bool = False

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise DataError(f"field '{self.name}': unknown kind '{self.kind}'")
        if self.kind == "dense":
            if not self.dense_dim or self.dense_dim < 1:
                raise DataError(f"field '{self.name}': dense_dim must be >= 1")
        else:
            if not self.vocab_size or self.vocab_size < 1:
                raise DataError(f"field '{self.name}': vocab_size must be >= 1")

    @property
    def width(self) -> int:
        """Encoded input width: vocabulary size for categorical, dense_dim for dense."""
        return self.dense_dim if self.kind == "dense" else self.vocab_size


@dataclass(frozen=True)
class Schema:
    domain_name: str
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DataError(f"schema '{self.domain_name}': duplicate field names")

    @property
    def encoded_width(self) -> int:
        """Total one-hot/dense input dimensionality of the domain."""
        return sum(f.width for f in self.fields)

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise DataError(f"schema '{self.domain_name}': no field named '{name}'")


@dataclass(frozen=True)
class Example:
    """One labeled, timestamped sample; field_values keys follow the schema."""

    field_values: dict
    label: int
    timestamp: int


@dataclass(frozen=True)
class Dataset:
    schema: Schema
    examples: tuple[Example, ...]

    def __len__(self) -> int:
        return len(self.examples)


def validate_example(schema: Schema, ex: Example, where: str = "") -> None:
    if ex.label not in (0, 1):
        raise DataError(f"{where}label must be 0 or 1, got {ex.label!r}")
    for f in schema.fields:
        if f.name not in ex.field_values:
            raise DataError(f"{where}missing value for field '{f.name}'")
        v = ex.field_values[f.name]
        if f.kind in ("id", "one_hot"):
            if not (0 <= int(v) < f.vocab_size):
                raise DataError(f"{where}index {v} out of range for field '{f.name}' (vocab {f.vocab_size})")
        elif f.kind == "multi_hot":
            if len(v) == 0:
                raise DataError(f"{where}field '{f.name}': multi_hot set may not be empty")
            for i in v:
                if not (0 <= int(i) < f.vocab_size):
                    raise DataError(f"{where}index {i} out of range for field '{f.name}' (vocab {f.vocab_size})")
        else:
            if len(v) != f.dense_dim:
                raise DataError(f"{where}field '{f.name}': expected {f.dense_dim} dense values, got {len(v)}")


# ---------------------------------------------------------------------------
# synthetic two-domain generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    latent_dim: int = 8
    n_users: int = 4000
    n_items_per_domain: int = 2000
    overlap_user_fraction: float = 0.5
    feature_noise_sigma: float = 0.5
    bucket_count: int = 8
    label_bias: float = 0.0
    n_examples: int = 25000
    seed: int = 0

    def __post_init__(self):
        if min(self.latent_dim, self.n_users, self.n_items_per_domain, self.bucket_count, self.n_examples) < 1:
            raise DataError("synthetic config: all counts must be >= 1")
        if not (0.0 <= self.overlap_user_fraction <= 1.0):
            raise DataError("synthetic config: overlap_user_fraction must be in [0, 1]")
        if self.feature_noise_sigma < 0:
            raise DataError("synthetic config: feature_noise_sigma must be >= 0")


@dataclass(frozen=True)
class Correspondence:
    """Ground-truth pairing: target item id -> source item id (injective)."""

    target_to_source: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.target_to_source)) != len(self.target_to_source):
            raise DataError("correspondence must be injective")

    def source_item(self, target_item: int) -> int:
        return self.target_to_source[target_item]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.target_to_source, dtype=np.int64)


@dataclass(frozen=True)
class SyntheticTruth:
    """Latents and projections behind a generated pair of domains (test hooks)."""

    user_latents: np.ndarray
    source_item_latents: np.ndarray
    target_item_latents: np.ndarray
    user_projection: np.ndarray
    source_item_projection: np.ndarray
    target_item_projection: np.ndarray
    source_users: np.ndarray
    source_items: np.ndarray
    source_probs: np.ndarray
    target_users: np.ndarray
    target_items: np.ndarray
    target_probs: np.ndarray


def _domain_schema(domain: str, cfg: SyntheticConfig) -> Schema:
    # user fields and item ATTRIBUTE fields are overlapped (same semantics in
    # both domains, shared embedding tables); item identifiers stay local to
    # each domain's catalog
    fields = [FieldSpec("user_id", "id", vocab_size=cfg.n_users, overlapped=True)]
    fields += [
        FieldSpec(f"user_cat{i}", "one_hot", vocab_size=cfg.bucket_count, overlapped=True)
        for i in range(_N_USER_COORDS)
    ]
    fields.append(FieldSpec("user_dense", "dense", dense_dim=_N_USER_COORDS, overlapped=True))
    fields.append(FieldSpec("item_id", "id", vocab_size=cfg.n_items_per_domain))
    fields += [
        FieldSpec(f"item_cat{i}", "one_hot", vocab_size=cfg.bucket_count, overlapped=True)
        for i in range(_N_ITEM_COORDS)
    ]
    fields.append(FieldSpec("item_dense", "dense", dense_dim=_N_ITEM_COORDS, overlapped=True))
    return Schema(domain, tuple(fields))


def _unit_rows(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    m = rng.standard_normal((n, k))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _bucketize(coords: np.ndarray, sigma: float, buckets: int) -> np.ndarray:
    # equal-mass bucket edges for N(0, 1 + sigma^2) coordinates
    std = float(np.sqrt(1.0 + sigma * sigma))
    edges = np.array([NormalDist().inv_cdf(q / buckets) * std for q in range(1, buckets)])
    return np.searchsorted(edges, coords).astype(np.int64)


def _domain_examples(
    rng: np.random.Generator,
    cfg: SyntheticConfig,
    user_pool: np.ndarray,
    user_latents: np.ndarray,
    item_latents: np.ndarray,
    user_projection: np.ndarray,
    item_projection: np.ndarray,
):
    n = cfg.n_examples
    users = user_pool[rng.integers(0, len(user_pool), size=n)]
    items = rng.integers(0, cfg.n_items_per_domain, size=n)
    affinity = np.einsum("ij,ij->i", user_latents[users], item_latents[items]) + cfg.label_bias
    probs = 1.0 / (1.0 + np.exp(-affinity))
    labels = (rng.random(n) < probs).astype(np.int64)

    sigma = cfg.feature_noise_sigma
    user_coords = user_latents[users] @ user_projection.T + sigma * rng.standard_normal((n, _N_USER_COORDS))
    item_coords = item_latents[items] @ item_projection.T + sigma * rng.standard_normal((n, _N_ITEM_COORDS))
    user_buckets = _bucketize(user_coords, sigma, cfg.bucket_count)
    item_buckets = _bucketize(item_coords, sigma, cfg.bucket_count)

    examples = []
    for i in range(n):
        values = {"user_id": int(users[i]), "item_id": int(items[i])}
        for j in range(_N_USER_COORDS):
            values[f"user_cat{j}"] = int(user_buckets[i, j])
        for j in range(_N_ITEM_COORDS):
            values[f"item_cat{j}"] = int(item_buckets[i, j])
        values["user_dense"] = tuple(float(v) for v in user_coords[i])
        values["item_dense"] = tuple(float(v) for v in item_coords[i])
        examples.append(Example(values, int(labels[i]), i))
    return examples, users, items, probs


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Dataset, Correspondence]:
    source, target, corr, _ = generate_synthetic_full(cfg)
    return source, target, corr


def generate_synthetic_full(
    cfg: SyntheticConfig,
) -> tuple[Dataset, Dataset, Correspondence, SyntheticTruth]:
    """Draw shared-latent users/items and render both domains' observables.

    A user's preference for an item is the same Bernoulli parameter in both
    domains: labels are sigmoid(u . v + bias) draws, and paired items share
    the latent v.  Observable features are fixed linear projections of the
    latents plus per-example Gaussian noise, both bucketized into one-hot
    coordinates and copied raw into a dense field.  Deterministic per seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_GENERATOR, cfg.seed]))
    k = cfg.latent_dim

    user_latents = rng.standard_normal((cfg.n_users, k))
    target_item_latents = rng.standard_normal((cfg.n_items_per_domain, k))
    pairing = rng.permutation(cfg.n_items_per_domain)
    source_item_latents = np.empty_like(target_item_latents)
    source_item_latents[pairing] = target_item_latents

    # user pools: an overlapped block usable by both domains, the rest split
    n_overlap = int(round(cfg.overlap_user_fraction * cfg.n_users))
    shuffled_users = rng.permutation(cfg.n_users)
    overlap = shuffled_users[:n_overlap]
    rest = shuffled_users[n_overlap:]
    half = len(rest) // 2
    source_pool = np.concatenate([overlap, rest[:half]])
    target_pool = np.concatenate([overlap, rest[half:]])
    if len(source_pool) == 0 or len(target_pool) == 0:
        raise DataError("synthetic config: user pool for a domain is empty; increase n_users")

    # both projections are shared across domains: overlapped fields must mean
    # the same thing wherever they appear, only the item catalogs differ
    user_projection = _unit_rows(rng, _N_USER_COORDS, k)
    item_projection = _unit_rows(rng, _N_ITEM_COORDS, k)
    source_item_projection = item_projection
    target_item_projection = item_projection

    src_examples, src_users, src_items, src_probs = _domain_examples(
        rng, cfg, source_pool, user_latents, source_item_latents, user_projection, source_item_projection
    )
    tgt_examples, tgt_users, tgt_items, tgt_probs = _domain_examples(
        rng, cfg, target_pool, user_latents, target_item_latents, user_projection, target_item_projection
    )

    source = Dataset(_domain_schema("source", cfg), tuple(src_examples))
    target = Dataset(_domain_schema("target", cfg), tuple(tgt_examples))
    corr = Correspondence(tuple(int(p) for p in pairing))
    truth = SyntheticTruth(
        user_latents=user_latents,
        source_item_latents=source_item_latents,
        target_item_latents=target_item_latents,
        user_projection=user_projection,
        source_item_projection=source_item_projection,
        target_item_projection=target_item_projection,
        source_users=src_users,
        source_items=src_items,
        source_probs=src_probs,
        target_users=tgt_users,
        target_items=tgt_items,
        target_probs=tgt_probs,
    )
    return source, target, corr, truth


# ---------------------------------------------------------------------------
# CSV and schema files
# ---------------------------------------------------------------------------


def write_schema(schema: Schema, path) -> None:
    """One field per line: name,kind,vocab_size|dense_dim,overlapped(0/1)."""
    lines = [f"{f.name},{f.kind},{f.width},{int(f.overlapped)}" for f in schema.fields]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_schema(path, domain_name: str | None = None) -> Schema:
    path = Path(path)
    name = domain_name if domain_name is not None else path.stem
    fields = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'name,kind,size,overlapped'")
        fname, kind, size, overlapped = parts
        try:
            size_i = int(size)
            overlapped_b = bool(int(overlapped))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        if kind == "dense":
            fields.append(FieldSpec(fname, kind, dense_dim=size_i, overlapped=overlapped_b))
        else:
            fields.append(FieldSpec(fname, kind, vocab_size=size_i, overlapped=overlapped_b))
    return Schema(name, tuple(fields))


def _format_value(spec: FieldSpec, v) -> str:
    if spec.kind in ("id", "one_hot"):
        return str(int(v))
    if spec.kind == "multi_hot":
        return "|".join(str(int(i)) for i in v)
    return "|".join(repr(float(x)) for x in v)


def write_csv(dataset: Dataset, path) -> None:
    """UTF-8 CSV with header; multi-hot and dense cells are '|'-joined."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        names = [f.name for f in dataset.schema.fields]
        w.writerow(names + ["label", "ts"])
        for ex in dataset.examples:
            row = [_format_value(f, ex.field_values[f.name]) for f in dataset.schema.fields]
            w.writerow(row + [ex.label, ex.timestamp])


def load_csv(schema: Schema, path, label_threshold: float | None = None) -> Dataset:
    """Parse a CSV into Examples, rejecting malformed rows with line numbers.

    With ``label_threshold`` set, raw label values strictly greater than the
    threshold become 1 and the rest 0; otherwise labels must be exactly 0/1.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = [f.name for f in schema.fields] + ["label", "ts"]
        unknown = [c for c in header if c not in expected]
        if unknown:
            raise DataError(f"{path}:1: unknown field '{unknown[0]}' not in schema '{schema.domain_name}'")
        missing = [c for c in expected if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing column '{missing[0]}'")
        col = {name: header.index(name) for name in expected}

        examples = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            where = f"{path}:{lineno}: "
            values = {}
            for f in schema.fields:
                tok = row[col[f.name]]
                try:
                    if f.kind in ("id", "one_hot"):
                        values[f.name] = int(tok)
                    elif f.kind == "multi_hot":
                        values[f.name] = tuple(int(t) for t in tok.split("|") if t != "")
                    else:
                        values[f.name] = tuple(float(t) for t in tok.split("|"))
                except ValueError:
                    raise DataError(f"{where}cannot parse '{tok}' for field '{f.name}'") from None
            try:
                raw_label = float(row[col["label"]])
                ts = int(row[col["ts"]])
            except ValueError as e:
                raise DataError(f"{where}{e}") from None
            if label_threshold is not None:
                label = 1 if raw_label > label_threshold else 0
            else:
                if raw_label not in (0.0, 1.0):
                    raise DataError(f"{where}label must be 0 or 1, got {raw_label} (set a threshold to binarize)")
                label = int(raw_label)
            ex = Example(values, label, ts)
            try:
                validate_example(schema, ex, where)
            except DataError:
                raise
            examples.append(ex)
    return Dataset(schema, tuple(examples))


def write_correspondence(corr: Correspondence, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_item", "source_item"])
        for t, s in enumerate(corr.target_to_source):
            w.writerow([t, s])


def read_correspondence(path) -> Correspondence:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["target_item", "source_item"]:
            raise DataError(f"{path}: expected header 'target_item,source_item'")
        pairs = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                pairs[int(row[0])] = int(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed correspondence row") from None
    mapping = [pairs.get(t) for t in range(len(pairs))]
    if any(m is None for m in mapping):
        raise DataError(f"{path}: correspondence must cover every target item 0..n-1")
    return Correspondence(tuple(mapping))


# ---------------------------------------------------------------------------
# splitting, batching, subsampling
# ---------------------------------------------------------------------------


def chronological_split(
    dataset: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[Dataset, Dataset, Dataset]:
    """Sort by timestamp (stable) and cut at cumulative floor boundaries."""
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")
    ordered = tuple(sorted(dataset.examples, key=lambda e: e.timestamp))
    n = len(ordered)
    b1 = int(np.floor(n * ratios[0]))
    b2 = int(np.floor(n * (ratios[0] + ratios[1])))
    mk = lambda exs: Dataset(dataset.schema, exs)
    return mk(ordered[:b1]), mk(ordered[b1:b2]), mk(ordered[b2:])


def batches(
    data, batch_size: int, shuffle_seed: int, epoch: int = 0, round_: int = 0
) -> Iterator[np.ndarray]:
    """Yield index batches from a fresh seeded permutation; short tail kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = data if isinstance(data, int) else len(data)
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_SHUFFLE, shuffle_seed, epoch, round_]))
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def subsample_train(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Seeded uniform subsample of floor(ratio*n) examples, order preserved."""
    if not (0.0 < ratio <= 1.0):
        raise DataError(f"subsample ratio must be in (0, 1], got {ratio}")
    n = len(dataset)
    m = int(np.floor(ratio * n))
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_SUBSAMPLE, seed]))
    keep = np.sort(rng.choice(n, size=m, replace=False))
    return Dataset(dataset.schema, tuple(dataset.examples[i] for i in keep))


# ---------------------------------------------------------------------------
# columnar encoding for training
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Materialized minibatch: per-field arrays plus a [n,1] label column."""

    n: int
    labels: np.ndarray
    columns: dict


class EncodedDataset:
    """Columnar view of a Dataset; ``batch()`` calls bump ``access_count``."""

    def __init__(self, dataset: Dataset):
        self.schema = dataset.schema
        self.examples = dataset.examples
        self.n = len(dataset)
        self.access_count = 0
        self.labels = np.array([e.label for e in dataset.examples], dtype=np.float64).reshape(-1, 1)
        self.timestamps = np.array([e.timestamp for e in dataset.examples], dtype=np.int64)
        self.columns = {}
        for f in dataset.schema.fields:
            vals = [e.field_values[f.name] for e in dataset.examples]
            if f.kind in ("id", "one_hot"):
                self.columns[f.name] = np.array(vals, dtype=np.int64)
            elif f.kind == "multi_hot":
                flat = np.array([i for v in vals for i in v], dtype=np.int64)
                offsets = np.zeros(self.n + 1, dtype=np.int64)
                np.cumsum([len(v) for v in vals], out=offsets[1:])
                self.columns[f.name] = (flat, offsets)
            else:
                self.columns[f.name] = np.array(vals, dtype=np.float64).reshape(self.n, f.dense_dim)

    def __len__(self) -> int:
        return self.n

    def batch(self, indices: np.ndarray) -> Batch:
        self.access_count += 1
        idx = np.asarray(indices, dtype=np.int64)
        cols = {}
        for f in self.schema.fields:
            col = self.columns[f.name]
            if f.kind == "multi_hot":
                flat, offsets = col
                counts = np.diff(offsets)[idx]
                new_offsets = np.zeros(len(idx) + 1, dtype=np.int64)
                np.cumsum(counts, out=new_offsets[1:])
                new_flat = np.concatenate(
                    [flat[offsets[i] : offsets[i + 1]] for i in idx]
                ) if len(idx) else np.empty(0, dtype=np.int64)
                cols[f.name] = (new_flat, new_offsets)
            else:
                cols[f.name] = col[idx]
        return Batch(len(idx), self.labels[idx], cols)

    def full_batch(self) -> Batch:
        return self.batch(np.arange(self.n))


@dataclass
class DomainSplits:
    """Train/val/test views of one domain, encoded for the model."""

    schema: Schema
    train: EncodedDataset
    val: EncodedDataset
    test: EncodedDataset


def split_and_encode(dataset: Dataset, ratios=(0.8, 0.1, 0.1)) -> DomainSplits:
    train, val, test = chronological_split(dataset, ratios)
    return DomainSplits(dataset.schema, EncodedDataset(train), EncodedDataset(val), EncodedDataset(test))

"""Multi-domain datasets: synthetic shift generators, CSV files, splits.

Generation and splitting are pure functions of their configuration and
seed. Datasets are immutable after construction (backing arrays are
write-protected) and safe to share across threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CsvParseError, SchemaError, ValidationError

GENERATORS = ("two_blobs_spurious", "rotated_moons", "nuisance_dims")


class DomainDataset:
    """Feature/label/domain triples with dense class and domain indices."""

    def __init__(self, features, labels, domains, class_count=None, domain_count=None,
                 label_names=None, domain_names=None, require_all_domains=True):
        features = np.array(features, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        domains = np.array(domains, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValidationError(f"features must be a nonempty 2-d array, got {features.shape}")
        n = features.shape[0]
        if labels.shape != (n,) or domains.shape != (n,):
            raise ValidationError(
                f"labels {labels.shape} / domains {domains.shape} do not match {n} samples")
        self.class_count = int(class_count) if class_count is not None else int(labels.max()) + 1
        self.domain_count = int(domain_count) if domain_count is not None else int(domains.max()) + 1
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValidationError(f"labels must lie in [0, {self.class_count})")
        if domains.min() < 0 or domains.max() >= self.domain_count:
            raise ValidationError(f"domains must lie in [0, {self.domain_count})")
        if require_all_domains and self.domain_count >= 2:
            present = np.unique(domains)
            if len(present) != self.domain_count:
                missing = sorted(set(range(self.domain_count)) - set(present.tolist()))
                raise ValidationError(f"domains {missing} have no samples")
        for arr in (features, labels, domains):
            arr.setflags(write=False)
        self.features = features
        self.labels = labels
        self.domains = domains
        self.label_names = list(label_names) if label_names is not None else None
        self.domain_names = list(domain_names) if domain_names is not None else None

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        """Row selection keeping class/domain metadata; domains may go empty."""
        idx = np.asarray(indices, dtype=np.intp)
        return DomainDataset(self.features[idx], self.labels[idx], self.domains[idx],
                             class_count=self.class_count, domain_count=self.domain_count,
                             label_names=self.label_names, domain_names=self.domain_names,
                             require_all_domains=False)

    def replace_features(self, features):
        return DomainDataset(features, self.labels, self.domains,
                             class_count=self.class_count, domain_count=self.domain_count,
                             label_names=self.label_names, domain_names=self.domain_names,
                             require_all_domains=False)


@dataclass(frozen=True)
class SplitPlan:
    held_out_domain: int
    seed: int = 0
    train_fraction: float = 0.8

    def validate(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass
class SyntheticShiftConfig:
    generator: str = "two_blobs_spurious"
    strengths: tuple = (0.9, 0.9, 0.9, 0.1)
    samples_per_domain: int = 500
    class_count: int = 2
    noise_scale: float = 0.8
    spurious_noise_scale: float = 0.2
    spurious_gain_spread: float = 0.0
    spurious_magnitude_sigma: float = 0.0
    spurious_encoding: str = "one_hot"
    core_strength: float = 1.0
    core_visibility: float = 1.0
    core_dim_level: float = 0.0
    nuisance_dims: int = 4
    seed: int = 0

    def validate(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}, expected one of {GENERATORS}")
        if len(self.strengths) < 2:
            raise ConfigError("need at least 2 domains (one strength per domain)")
        if any(not 0.0 <= s <= 1.0 for s in self.strengths):
            raise ConfigError(f"strengths must lie in [0, 1], got {self.strengths}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.samples_per_domain < self.class_count:
            raise ConfigError("samples_per_domain must be >= class_count")
        if self.noise_scale < 0 or self.spurious_noise_scale < 0:
            raise ConfigError("noise scales must be nonnegative")
        if self.spurious_gain_spread < 0:
            raise ConfigError("spurious_gain_spread must be nonnegative")
        if self.spurious_magnitude_sigma < 0:
            raise ConfigError("spurious_magnitude_sigma must be nonnegative")
        if not 0.0 < self.core_visibility <= 1.0:
            raise ConfigError("core_visibility must lie in (0, 1]")
        if not 0.0 <= self.core_dim_level < 1.0:
            raise ConfigError("core_dim_level must lie in [0, 1)")
        if self.spurious_encoding not in ("one_hot", "xor"):
            raise ConfigError(f"unknown spurious_encoding {self.spurious_encoding!r}")
        if self.spurious_encoding == "xor" and self.class_count != 2:
            raise ConfigError("xor spurious encoding supports exactly 2 classes")
        if not 0.0 < self.core_strength <= 1.0:
            raise ConfigError("core_strength must lie in (0, 1]")
        if self.generator == "rotated_moons" and self.class_count != 2:
            raise ConfigError("rotated_moons supports exactly 2 classes")
        if self.generator == "nuisance_dims" and self.nuisance_dims < 1:
            raise ConfigError("nuisance_dims must be >= 1")


def _balanced_labels(per_domain, k, rng):
    # Exact per-class balance whenever per_domain is divisible by k.
    y = np.arange(per_domain) % k
    return y[rng.permutation(per_domain)]


def _gen_two_blobs(cfg, rng):
    """One-hot core block that carries the label with a fixed signal in all
    domains; one-hot spurious block that agrees with the label with the
    domain's strength.

    Optional hardness knobs, all inert at their defaults: core_strength < 1
    flips the core pattern to a wrong class on a sample subset;
    core_visibility < 1 dims the core signal to core_dim_level on a random
    subset (same rate in every domain), capping how far the core alone can
    go. With spurious_encoding="xor" the spurious block is two uniform
    sign coordinates whose product carries the spurious bit, so plain risk
    minimization can only pick it up through a nonlinear feature it learns
    late. A positive gain spread scales the spurious block by a per-domain
    amplitude (log-spaced across domains), making its evidence
    domain-specific in size while the core stays domain-invariant."""
    k = cfg.class_count
    m = len(cfg.strengths)
    eye = np.eye(k)
    gains = np.exp(cfg.spurious_gain_spread * np.linspace(-1.0, 1.0, m))
    feats, labels, doms = [], [], []
    for d, strength in enumerate(cfg.strengths):
        per = cfg.samples_per_domain
        y = _balanced_labels(per, k, rng)
        core_ok = rng.random(per) < cfg.core_strength
        core_shift = rng.integers(1, k, size=per)
        c = np.where(core_ok, y, (y + core_shift) % k)
        bright = rng.random(per) < cfg.core_visibility
        level = np.where(bright, 1.0, cfg.core_dim_level)
        core = eye[c] * level[:, None] + rng.normal(0.0, cfg.noise_scale, (per, k))
        agree = rng.random(per) < strength
        shift = rng.integers(1, k, size=per)
        s = np.where(agree, y, (y + shift) % k)
        magnitude = np.exp(cfg.spurious_magnitude_sigma * rng.normal(size=per))
        if cfg.spurious_encoding == "xor":
            first = 2.0 * rng.integers(0, 2, size=per) - 1.0
            second = (2.0 * s - 1.0) * first
            spur = np.stack([first, second], axis=1) \
                + rng.normal(0.0, cfg.spurious_noise_scale, (per, 2))
        else:
            spur = eye[s] + rng.normal(0.0, cfg.spurious_noise_scale, (per, k))
        spur = magnitude[:, None] * spur
        feats.append(np.concatenate([core, gains[d] * spur], axis=1))
        labels.append(y)
        doms.append(np.full(per, d))
    return np.concatenate(feats), np.concatenate(labels), np.concatenate(doms)


def _gen_moons(cfg, rng):
    """Two interleaved half-circles, rotated per domain by strength * 90 degrees."""
    feats, labels, doms = [], [], []
    for d, strength in enumerate(cfg.strengths):
        per = cfg.samples_per_domain
        y = _balanced_labels(per, 2, rng)
        t = rng.uniform(0.0, np.pi, per)
        x = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
        z = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
        pts = np.stack([x, z], axis=1) + rng.normal(0.0, cfg.noise_scale, (per, 2))
        angle = np.deg2rad(strength * 90.0)
        rot = np.array([[np.cos(angle), -np.sin(angle)],
                        [np.sin(angle), np.cos(angle)]])
        feats.append(pts @ rot.T)
        labels.append(y)
        doms.append(np.full(per, d))
    return np.concatenate(feats), np.concatenate(labels), np.concatenate(doms)


def _gen_nuisance(cfg, rng):
    """Label-carrying core block plus label-free nuisance coordinates whose
    mean shifts per domain, scaled by the domain's strength."""
    k = cfg.class_count
    eye = np.eye(k)
    m = len(cfg.strengths)
    directions = rng.normal(size=(m, cfg.nuisance_dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    feats, labels, doms = [], [], []
    for d, strength in enumerate(cfg.strengths):
        per = cfg.samples_per_domain
        y = _balanced_labels(per, k, rng)
        core = eye[y] + rng.normal(0.0, cfg.noise_scale, (per, k))
        nuis = 2.0 * strength * directions[d] + rng.normal(0.0, cfg.noise_scale,
                                                           (per, cfg.nuisance_dims))
        feats.append(np.concatenate([core, nuis], axis=1))
        labels.append(y)
        doms.append(np.full(per, d))
    return np.concatenate(feats), np.concatenate(labels), np.concatenate(doms)


_GENERATOR_FNS = {
    "two_blobs_spurious": _gen_two_blobs,
    "rotated_moons": _gen_moons,
    "nuisance_dims": _gen_nuisance,
}


def generate(config: SyntheticShiftConfig) -> DomainDataset:
    """Deterministic synthetic multi-domain dataset for the given config."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    features, labels, domains = _GENERATOR_FNS[config.generator](config, rng)
    return DomainDataset(features, labels, domains,
                         class_count=config.class_count,
                         domain_count=len(config.strengths))


def leave_one_out_splits(ds: DomainDataset, plan: SplitPlan):
    """(train, validation, target): the held-out domain becomes the target,
    the remaining samples are shuffled per seed and split by fraction."""
    plan.validate()
    if not 0 <= plan.held_out_domain < ds.domain_count:
        raise ValidationError(
            f"held_out_domain {plan.held_out_domain} outside [0, {ds.domain_count})")
    target_idx = np.flatnonzero(ds.domains == plan.held_out_domain)
    source_idx = np.flatnonzero(ds.domains != plan.held_out_domain)
    if target_idx.size == 0 or source_idx.size == 0:
        raise ValidationError("both target and source domains need samples")
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    perm = source_idx[rng.permutation(source_idx.size)]
    n_train = int(perm.size * plan.train_fraction)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:]), ds.subset(target_idx)


def standardize_splits(train, val, target):
    """Per-feature zero mean and unit variance, statistics from the source
    samples only; the target is transformed with those same statistics."""
    src = np.concatenate([train.features, val.features])
    mean = src.mean(axis=0)
    std = src.std(axis=0)
    std = np.where(std == 0, 1.0, std)

    def tx(ds):
        return ds.replace_features((ds.features - mean) / std)

    return tx(train), tx(val), tx(target), {"mean": mean, "std": std}


def write_csv(ds: DomainDataset, path):
    """Header f0..f{d-1},label,domain; full-precision decimal floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.feature_dim)] + ["label", "domain"])
        for row, label, domain in zip(ds.features, ds.labels, ds.domains):
            name = ds.label_names[label] if ds.label_names else int(label)
            dname = ds.domain_names[domain] if ds.domain_names else int(domain)
            writer.writerow([repr(float(x)) for x in row] + [name, dname])


def _dense_index(raw):
    """Map raw string values to dense indices, numerically when possible."""
    unique = sorted(set(raw))
    try:
        unique = sorted(unique, key=int)
    except ValueError:
        pass
    index = {name: i for i, name in enumerate(unique)}
    return np.array([index[v] for v in raw]), unique


def load_csv(path, label_column="label", domain_column="domain"):
    """Parse a dataset CSV; labels and domains are reindexed densely from 0
    and the original values are kept as names."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for column in (label_column, domain_column):
            if column not in header:
                raise SchemaError(f"{path}: missing column {column!r}")
        label_at = header.index(label_column)
        domain_at = header.index(domain_column)
        feature_at = [i for i in range(len(header)) if i not in (label_at, domain_at)]
        rows, labels, domains = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(f"{path}: line {line_no}: expected {len(header)} cells, "
                                    f"got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feature_at])
            except ValueError:
                raise CsvParseError(
                    f"{path}: line {line_no}: non-numeric feature cell") from None
            labels.append(row[label_at])
            domains.append(row[domain_at])
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    label_idx, label_names = _dense_index(labels)
    domain_idx, domain_names = _dense_index(domains)
    return DomainDataset(np.asarray(rows), label_idx, domain_idx,
                         label_names=label_names, domain_names=domain_names)

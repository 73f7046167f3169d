"""Decision contributions, per-class momentum means, and invariance losses.

A bias-free linear head's logit for class k is the sum over feature
positions j of ``weight[j, k] * z[j]``. Collecting those products for one
sample gives a (feature_dim x class_count) contribution matrix whose
column sums reproduce the logits exactly. Batches are laid out
class-major, shape (class_count, batch, feature_dim), project-wide.

The invariance losses pull each sample's contribution matrix (or raw
feature vector, or logit vector) toward a momentum-tracked class mean.
The class means are plain arrays, never on a gradient tape, so gradient
flows only through the batch side.
"""

from __future__ import annotations

import csv

import numpy as np

from . import autodiff
from .autodiff import Tensor, add, mean_squared, scale, take_batch
from .errors import ConfigError, ContractError, DimensionError, ValidationError

VARIANTS = ("rationale", "feature", "logit", "feature_plus_logit",
            "rationale_zero_target", "none")
KINDS = ("rationale", "feature", "logit")

_VARIANT_KINDS = {
    "rationale": ("rationale",),
    "rationale_zero_target": ("rationale",),
    "feature": ("feature",),
    "logit": ("logit",),
    "feature_plus_logit": ("feature", "logit"),
}


def build_rationale(z, weight):
    """Per-sample contribution tensor: ``out[k, n, j] = weight[j, k] * z[n, j]``.

    Gradient flows to both the features and the classifier weight.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    w = weight if isinstance(weight, Tensor) else Tensor(weight)
    if z.ndim != 2 or w.ndim != 2 or z.shape[1] != w.shape[0]:
        raise DimensionError(
            f"build_rationale: features {z.shape} incompatible with weight {w.shape}")

    def bwd(g):
        gz = np.einsum("knj,jk->nj", g, w.data) if z.requires_grad else None
        gw = np.einsum("knj,nj->jk", g, z.data) if w.requires_grad else None
        return gz, gw

    return autodiff._from_op(np.einsum("nj,jk->knj", z.data, w.data), (z, w), bwd)


def rationale_np(z, weight):
    """Tape-free contribution tensor, for measurement paths."""
    return np.einsum("nj,jk->knj", np.asarray(z), np.asarray(weight))


def class_means(values, labels):
    """Detached per-class means of a batch quantity (batch axis second-to-last)."""
    v = np.asarray(values)
    y = np.asarray(labels)
    if v.ndim < 2:
        raise DimensionError(f"class_means: needs a batch axis, got shape {v.shape}")
    axis = v.ndim - 2
    return {int(c): np.take(v, np.flatnonzero(y == c), axis=axis).mean(axis=axis)
            for c in np.unique(y)}


class ClassMeanBank:
    """Per-class running means with momentum, detached from any tape.

    ``init="first_batch"`` snaps an unseen class to its first observed
    batch mean before momentum takes over; ``init="zeros"`` starts every
    class at zero and momentum-updates from there. With momentum 0 an
    initialized mean never moves; with momentum 1 it always equals the
    latest batch mean.
    """

    def __init__(self, kind, class_count, entry_shape, momentum, init="first_batch"):
        if kind not in KINDS:
            raise ContractError(f"unknown bank kind {kind!r}, expected one of {KINDS}")
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        if init not in ("first_batch", "zeros"):
            raise ConfigError(f"unknown mean init {init!r}")
        self.kind = kind
        self.class_count = int(class_count)
        self.entry_shape = tuple(entry_shape)
        self.momentum = float(momentum)
        self.init = init
        self.means = np.zeros((self.class_count, *self.entry_shape),
                              dtype=autodiff.default_dtype())
        filled = init == "zeros"
        self.initialized = np.full(self.class_count, filled, dtype=bool)
        self.t = 0

    @classmethod
    def for_kind(cls, kind, class_count, feature_dim, momentum, init="first_batch"):
        shape = {
            "rationale": (class_count, feature_dim),
            "feature": (feature_dim,),
            "logit": (class_count,),
        }[kind]
        return cls(kind, class_count, shape, momentum, init)

    def _check_class(self, c):
        if not 0 <= c < self.class_count:
            raise ValidationError(f"class index {c} outside [0, {self.class_count})")

    def initialize_class(self, c, value):
        """Seed one class mean directly, marking it initialized."""
        self._check_class(c)
        value = np.asarray(value, dtype=self.means.dtype)
        if value.shape != self.entry_shape:
            raise DimensionError(
                f"{self.kind} bank expects entries of shape {self.entry_shape}, got {value.shape}")
        self.means[c] = value
        self.initialized[c] = True

    def target(self, c):
        """Copy of one class mean, safe to hand to a loss."""
        self._check_class(c)
        return self.means[c].copy()

    def update(self, batch_means):
        """One momentum step from detached per-class batch means.

        Classes absent from ``batch_means`` are untouched; the step
        counter advances once per call.
        """
        m = self.momentum
        for c, value in batch_means.items():
            c = int(c)
            self._check_class(c)
            value = np.asarray(value, dtype=self.means.dtype)
            if value.shape != self.entry_shape:
                raise DimensionError(
                    f"{self.kind} bank expects entries of shape {self.entry_shape}, "
                    f"got {value.shape}")
            if not self.initialized[c]:
                self.means[c] = value
                self.initialized[c] = True
            else:
                self.means[c] = (1.0 - m) * self.means[c] + m * value
        self.t += 1


def invariance_loss(variant, labels, *, rationales=None, features=None, logits=None,
                    rationale_bank=None, feature_bank=None, logit_bank=None,
                    normalization="element_mean"):
    """Within-class squared deviation from the class targets.

    Gradient reaches only the batch-side tensors; targets come from the
    banks (or are all-zero for the zero-target variant) and stay constant.
    With ``element_mean`` each present class contributes the mean squared
    deviation over its group's elements; with ``sample_sum_over_batch``
    the result is every sample's squared norm summed and divided by the
    batch size. Classes whose bank entry is uninitialized are seeded from
    this batch first, never an error.
    """
    if variant == "none" or variant not in VARIANTS:
        raise ContractError(f"no invariance loss for variant {variant!r}")
    if normalization not in autodiff.NORMALIZATIONS:
        raise ContractError(f"unknown normalization {normalization!r}")
    y = np.asarray(labels)
    batches = {"rationale": rationales, "feature": features, "logit": logits}
    banks = {"rationale": rationale_bank, "feature": feature_bank, "logit": logit_bank}

    total = None
    for kind in _VARIANT_KINDS[variant]:
        batch = batches[kind]
        if batch is None:
            raise ContractError(f"variant {variant!r} needs the {kind} batch quantity")
        batch = batch if isinstance(batch, Tensor) else Tensor(batch)
        zero_target = variant == "rationale_zero_target"
        bank = banks[kind]
        if not zero_target:
            if bank is None:
                raise ContractError(f"variant {variant!r} needs a {kind} bank")
            if bank.kind != kind:
                raise ContractError(
                    f"bank of kind {bank.kind!r} passed where {kind!r} is required")
        term = _deviation_loss(batch, bank, y, normalization, zero_target)
        total = term if total is None else add(total, term)
    return total


def _deviation_loss(batch, bank, y, normalization, zero_target):
    n_b = batch.shape[-2]
    if y.shape != (n_b,):
        raise DimensionError(
            f"labels of shape {y.shape} do not match batch of {n_b} samples")
    present = np.unique(y)
    if not zero_target:
        missing = [int(c) for c in present if not bank.initialized[int(c)]]
        if missing:
            stats = class_means(batch.data, y)
            for c in missing:
                bank.initialize_class(c, stats[c])
    entry_shape = batch.shape[:-2] + batch.shape[-1:]
    total = None
    for c in present:
        idx = np.flatnonzero(y == c)
        group = take_batch(batch, idx)
        if zero_target:
            target = Tensor(np.zeros(entry_shape, dtype=batch.data.dtype))
        else:
            target = Tensor(bank.target(int(c)), dtype=batch.data.dtype)
        if normalization == "element_mean":
            term = mean_squared(group, target, "element_mean")
        else:
            term = scale(mean_squared(group, target, "sample_sum_over_batch"),
                         len(idx) / n_b)
        total = term if total is None else add(total, term)
    return total


def total_loss(ce, inv, alpha):
    """Classification loss plus ``alpha`` times the invariance term.

    With ``alpha == 0`` (or no invariance term) the classification loss is
    returned unchanged, so a disabled regularizer cannot perturb training.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    if inv is None or alpha == 0:
        return ce
    return add(ce, scale(inv, alpha))


def scd_trace(values, bank, labels):
    """Mean distance between each sample's quantity and its class center.

    Pure measurement on detached arrays: no gradient, no bank mutation.
    The norm is not squared.
    """
    v = np.asarray(values)
    y = np.asarray(labels, dtype=np.intp)
    if v.ndim < 2:
        raise DimensionError(f"scd_trace: needs a batch axis, got shape {v.shape}")
    axis = v.ndim - 2
    if y.shape != (v.shape[axis],):
        raise DimensionError(
            f"labels of shape {y.shape} do not match batch of {v.shape[axis]} samples")
    for c in np.unique(y):
        bank._check_class(int(c))
        if not bank.initialized[int(c)]:
            raise ContractError(f"class {int(c)} has no initialized center")
    centers = np.moveaxis(bank.means[y], 0, axis)
    sq = (v - centers) ** 2
    other_axes = tuple(i for i in range(v.ndim) if i != axis)
    return float(np.sqrt(sq.sum(axis=other_axes)).mean())


def export_rationales(path, values, labels, domains):
    """CSV of vectorized contribution matrices, one row per sample.

    Columns r0..r{D*K-1} flatten each sample's (feature_dim x class_count)
    matrix row-major (feature index outer, class index inner), followed by
    the label and domain columns.
    """
    v = np.asarray(values)
    if v.ndim != 3:
        raise DimensionError(f"expected a (classes, batch, features) tensor, got {v.shape}")
    k, n, d = v.shape
    y = np.asarray(labels)
    dom = np.asarray(domains)
    if y.shape != (n,) or dom.shape != (n,):
        raise DimensionError(
            f"labels {y.shape} / domains {dom.shape} do not match {n} samples")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"r{i}" for i in range(d * k)] + ["label", "domain"])
        for i in range(n):
            flat = v[:, i, :].T.reshape(-1)
            writer.writerow([repr(float(x)) for x in flat] + [int(y[i]), int(dom[i])])

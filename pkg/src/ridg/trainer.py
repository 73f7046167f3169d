"""Training loop, optimizer, and multi-trial experiment drivers.

One training step: draw a minibatch, run the extractor and head, build
the contribution tensor when the active variant needs it, momentum-update
the class-mean banks from detached batch means, evaluate the invariance
term against the freshly updated means, and take one optimizer step on
the combined loss.

RNG discipline: model init, data shuffling, and hyperparameter sampling
each get their own named stream, so enabling or disabling the regularizer
can never perturb data order. Independent trials share nothing but the
immutable dataset and may run in parallel.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor, backward, softmax_cross_entropy, zero_grads
from .data import DomainDataset, SplitPlan, leave_one_out_splits, standardize_splits
from .errors import ConfigError, DivergenceError
from .model import ModelConfig, forward_features, forward_logits, init_model, parameters
from .rationale import (KINDS, VARIANTS, ClassMeanBank, build_rationale, class_means,
                        invariance_loss, rationale_np, scd_trace, total_loss)

MEAN_INITS = ("first_batch", "zeros", "frozen_init")
NORMALIZATION_ALIASES = {"eq3": "sample_sum_over_batch"}


@dataclass
class TrainConfig:
    variant: str = "none"
    alpha: float = 0.01
    momentum: float = 0.01
    batch_size: int = 32
    steps: int = 2000
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalization: str = "element_mean"
    mean_init: str = "first_batch"
    eval_interval: int = 100
    optimizer: str = "adam"
    stratified: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.normalization not in ("element_mean", "sample_sum_over_batch"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.mean_init not in MEAN_INITS:
            raise ConfigError(f"unknown mean_init {self.mean_init!r}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrialResult:
    config: dict
    eval_steps: list
    train_accuracy: list
    val_accuracy: list
    target_accuracy: list
    best_step: int
    best_val_accuracy: float
    selected_target_accuracy: float
    loss_cla: np.ndarray
    loss_inv: np.ndarray | None
    loss_all: np.ndarray
    scd: dict
    singleton_counts: np.ndarray
    wall_time_s: float
    best_weights: dict
    split: dict | None = None


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected adaptive-moment update, applied in place."""
    state.t += 1
    b1, b2 = betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in optimizer step")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** state.t)
        v_hat = state.v[i] / (1.0 - b2 ** state.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in optimizer step")
        p.data = p.data - lr * g


def select_best(values):
    """Index of the maximum; earlier index wins ties."""
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


class _PooledBatcher:
    """Uniform shuffling over the pooled samples, consecutive chunks."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self):
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


class _StratifiedBatcher:
    """Round-robin over per-domain shuffled queues, near-equal counts."""

    def __init__(self, domains, batch_size, rng):
        self.rng = rng
        self.queues = []
        self.positions = []
        for d in np.unique(domains):
            idx = np.flatnonzero(domains == d)
            self.queues.append(idx[rng.permutation(idx.size)])
            self.positions.append(0)
        counts = np.full(len(self.queues), batch_size // len(self.queues))
        counts[:batch_size % len(self.queues)] += 1
        self.counts = counts

    def _draw(self, qi, k):
        queue = self.queues[qi]
        pos = self.positions[qi]
        if pos + k > queue.size:
            queue = queue[self.rng.permutation(queue.size)]
            self.queues[qi] = queue
            pos = 0
        self.positions[qi] = pos + k
        return queue[pos:pos + k]

    def next(self):
        parts = [self._draw(qi, min(int(k), self.queues[qi].size))
                 for qi, k in enumerate(self.counts)]
        return np.concatenate(parts)


def _accuracy(extractor, head, ds):
    z = extractor.forward_np(ds.features)
    pred = head.logits_np(z).argmax(axis=1)
    return float((pred == ds.labels).mean() * 100.0)


def _snapshot_weights(extractor, head):
    return {
        "layers": [(w.data.copy(), b.data.copy())
                   for w, b in zip(extractor.weights, extractor.biases)],
        "head": head.weight.data.copy(),
    }


def _prefill_banks(extractor, head, train, banks):
    """Seed all class means from the model at initialization over one full
    pass of the training data."""
    z = extractor.forward_np(train.features)
    o = head.logits_np(z)
    r = rationale_np(z, head.weight.data)
    y = train.labels
    banks["rationale"].update(class_means(r, y))
    banks["feature"].update(class_means(z, y))
    banks["logit"].update(class_means(o, y))


def train_one(config: TrainConfig, splits, model_config: ModelConfig | None = None):
    """Run one optimization trial on (train, val, target) splits.

    The selected target accuracy is read at the evaluation point with the
    best validation accuracy (ties broken by the earliest checkpoint).
    """
    config.validate()
    train, val, target = splits
    t0 = time.perf_counter()

    seed_seq = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss = seed_seq.spawn(2)
    init_seed = int(init_ss.generate_state(1)[0])
    if model_config is None:
        model_config = ModelConfig(input_dim=train.feature_dim,
                                   class_count=train.class_count)
    if model_config.input_dim != train.feature_dim:
        raise ConfigError(f"model input_dim {model_config.input_dim} does not match "
                          f"dataset feature_dim {train.feature_dim}")
    if model_config.class_count != train.class_count:
        raise ConfigError(f"model class_count {model_config.class_count} does not match "
                          f"dataset class_count {train.class_count}")
    extractor, head = init_model(replace(model_config, seed=init_seed))
    params = parameters(extractor, head)

    k = train.class_count
    d = model_config.feature_dim
    bank_init = "zeros" if config.mean_init == "zeros" else "first_batch"
    banks = {kind: ClassMeanBank.for_kind(kind, k, d, config.momentum, init=bank_init)
             for kind in KINDS}
    if config.mean_init == "frozen_init":
        _prefill_banks(extractor, head, train, banks)

    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    if config.stratified:
        batcher = _StratifiedBatcher(train.domains, config.batch_size, shuffle_rng)
    else:
        batcher = _PooledBatcher(len(train), config.batch_size, shuffle_rng)

    opt_state = AdamState.for_params(params) if config.optimizer == "adam" else None
    track_inv = config.variant != "none"
    needs_r_grad = config.variant in ("rationale", "rationale_zero_target")

    loss_cla, loss_inv, loss_all, singletons = [], [], [], []
    scd = {kind: [] for kind in KINDS}
    eval_steps, train_acc, val_acc, target_acc = [], [], [], []
    best_step, best_val, best_target = 0, -1.0, 0.0
    best_weights = _snapshot_weights(extractor, head)

    for step in range(1, config.steps + 1):
        idx = batcher.next()
        xb = Tensor(train.features[idx])
        yb = train.labels[idx]

        z = forward_features(extractor, xb)
        o = forward_logits(head, z)
        r = build_rationale(z, head.weight) if needs_r_grad else None
        r_det = r.data if r is not None else rationale_np(z.data, head.weight.data)

        banks["rationale"].update(class_means(r_det, yb))
        banks["feature"].update(class_means(z.data, yb))
        banks["logit"].update(class_means(o.data, yb))

        ce = softmax_cross_entropy(o, yb)
        inv = None
        if track_inv:
            inv = invariance_loss(config.variant, yb, rationales=r, features=z, logits=o,
                                  rationale_bank=banks["rationale"],
                                  feature_bank=banks["feature"],
                                  logit_bank=banks["logit"],
                                  normalization=config.normalization)
        loss = total_loss(ce, inv, config.alpha)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)

        zero_grads(params)
        backward(loss)
        grads = [p.grad for p in params]
        try:
            if config.optimizer == "adam":
                adam_step(params, grads, opt_state, config.lr,
                          betas=(config.beta1, config.beta2), eps=config.eps)
            else:
                sgd_step(params, grads, config.lr)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at step {step}", step=step) from None

        loss_cla.append(float(ce.data))
        loss_inv.append(float(inv.data) if inv is not None else None)
        loss_all.append(float(loss.data))
        scd["rationale"].append(scd_trace(r_det, banks["rationale"], yb))
        scd["feature"].append(scd_trace(z.data, banks["feature"], yb))
        scd["logit"].append(scd_trace(o.data, banks["logit"], yb))
        _, counts = np.unique(yb, return_counts=True)
        singletons.append(int((counts == 1).sum()))

        if step % config.eval_interval == 0 or step == config.steps:
            eval_steps.append(step)
            train_acc.append(_accuracy(extractor, head, train))
            val_acc.append(_accuracy(extractor, head, val))
            target_acc.append(_accuracy(extractor, head, target))
            if val_acc[-1] > best_val:
                best_val = val_acc[-1]
                best_step = step
                best_target = target_acc[-1]
                best_weights = _snapshot_weights(extractor, head)

    return TrialResult(
        config=asdict(config),
        eval_steps=eval_steps,
        train_accuracy=train_acc,
        val_accuracy=val_acc,
        target_accuracy=target_acc,
        best_step=best_step,
        best_val_accuracy=best_val,
        selected_target_accuracy=best_target,
        loss_cla=np.asarray(loss_cla),
        loss_inv=None if not track_inv else np.asarray(loss_inv, dtype=np.float64),
        loss_all=np.asarray(loss_all),
        scd={kind: np.asarray(vals) for kind, vals in scd.items()},
        singleton_counts=np.asarray(singletons),
        wall_time_s=time.perf_counter() - t0,
        best_weights=best_weights,
    )


def write_traces(result: TrialResult, path):
    """Per-step trace CSV; accuracy cells are filled at evaluation steps."""
    at_eval = {s: i for i, s in enumerate(result.eval_steps)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "L_cla", "L_inv", "L_all", "scd_rationale",
                         "scd_feature", "scd_logit", "val_acc", "target_acc",
                         "singletons"])
        for i in range(len(result.loss_cla)):
            step = i + 1
            e = at_eval.get(step)
            writer.writerow([
                step,
                repr(float(result.loss_cla[i])),
                "" if result.loss_inv is None else repr(float(result.loss_inv[i])),
                repr(float(result.loss_all[i])),
                repr(float(result.scd["rationale"][i])),
                repr(float(result.scd["feature"][i])),
                repr(float(result.scd["logit"][i])),
                "" if e is None else repr(float(result.val_accuracy[e])),
                "" if e is None else repr(float(result.target_accuracy[e])),
                int(result.singleton_counts[i]),
            ])


@dataclass
class HpRanges:
    """Sampling ranges for per-trial hyperparameters; log-uniform for the
    continuous ones, uniform choice for batch size. A (x, x) range pins
    the value exactly."""

    alpha: tuple = (1e-3, 1e-1)
    momentum: tuple = (1e-4, 1e-1)
    lr: tuple = (1e-3, 1e-2)
    batch_sizes: tuple = (32,)

    def validate(self):
        for name in ("alpha", "momentum", "lr"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"empty {name} range ({lo}, {hi})")
            if lo < hi and lo <= 0:
                raise ConfigError(f"{name} range must have a positive lower bound "
                                  f"for log sampling, got ({lo}, {hi})")
        if not self.batch_sizes:
            raise ConfigError("empty batch_sizes range")
        if any(b < 2 for b in self.batch_sizes):
            raise ConfigError(f"batch sizes must be >= 2, got {self.batch_sizes}")


def _sample_log(rng, lo, hi):
    # Always consume one draw so pinned ranges keep streams aligned.
    u = rng.uniform()
    if lo == hi:
        return float(lo)
    return float(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo))))


def run_trials(base_config: TrainConfig, dataset: DomainDataset, n_trials,
               hp_ranges: HpRanges | None = None, model_config: ModelConfig | None = None,
               holdout=0, train_fraction=0.8, master_seed=0, jobs=1):
    """Independent trials: fresh seed, fresh split, hyperparameters sampled
    per trial. Output order follows the trial index regardless of ``jobs``."""
    if n_trials < 1:
        raise ConfigError(f"n_trials must be >= 1, got {n_trials}")
    hp = hp_ranges if hp_ranges is not None else HpRanges()
    hp.validate()
    root = (master_seed if isinstance(master_seed, np.random.SeedSequence)
            else np.random.SeedSequence(master_seed))
    children = root.spawn(n_trials)

    def one(i):
        hp_ss, split_ss, train_ss = children[i].spawn(3)
        rng = np.random.Generator(np.random.PCG64(hp_ss))
        cfg = replace(
            base_config,
            alpha=_sample_log(rng, *hp.alpha),
            momentum=_sample_log(rng, *hp.momentum),
            lr=_sample_log(rng, *hp.lr),
            batch_size=int(hp.batch_sizes[rng.integers(len(hp.batch_sizes))]),
            seed=int(train_ss.generate_state(1)[0]),
        )
        plan = SplitPlan(holdout, seed=int(split_ss.generate_state(1)[0]),
                         train_fraction=train_fraction)
        tr, va, te = leave_one_out_splits(dataset, plan)
        tr, va, te, _ = standardize_splits(tr, va, te)
        result = train_one(cfg, (tr, va, te), model_config)
        result.split = {"held_out_domain": plan.held_out_domain, "seed": plan.seed,
                        "train_fraction": plan.train_fraction}
        return result

    if jobs <= 1:
        return [one(i) for i in range(n_trials)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(n_trials)))


@dataclass(frozen=True)
class MethodSpec:
    """One row of the comparison matrix: a variant plus any pinned knobs."""

    label: str
    variant: str
    momentum: float | None = None
    mean_init: str | None = None


ABLATION_METHODS = (
    MethodSpec("ERM", "none"),
    MethodSpec("W/ fea.", "feature"),
    MethodSpec("W/ log.", "logit"),
    MethodSpec("W/ fea.&log.", "feature_plus_logit"),
    MethodSpec("W/ m=0", "rationale", momentum=0.0, mean_init="frozen_init"),
    MethodSpec("W/ m=1", "rationale", momentum=1.0),
    MethodSpec("W/ Rbar=0", "rationale_zero_target"),
    MethodSpec("Ours", "rationale"),
)


def apply_method(base_config: TrainConfig, hp_ranges: HpRanges, spec: MethodSpec):
    cfg = replace(base_config, variant=spec.variant)
    if spec.mean_init is not None:
        cfg = replace(cfg, mean_init=spec.mean_init)
    ranges = hp_ranges
    if spec.momentum is not None:
        ranges = replace(hp_ranges, momentum=(spec.momentum, spec.momentum))
    return cfg, ranges


@dataclass
class AblationRecord:
    method: str
    holdout: int
    trial: int
    result: TrialResult


def run_ablation(dataset_for_holdout, holdouts, methods, n_trials,
                 base_config: TrainConfig | None = None, hp_ranges: HpRanges | None = None,
                 model_config: ModelConfig | None = None, master_seed=0, jobs=1):
    """Run every method over every holdout. Trial seeds depend only on
    (holdout, trial index), so all methods see identical splits and
    hyperparameter draws and results pair up seed-for-seed."""
    base = base_config if base_config is not None else TrainConfig()
    hp = hp_ranges if hp_ranges is not None else HpRanges()
    records = []
    for holdout in holdouts:
        dataset = dataset_for_holdout(holdout)
        for spec in methods:
            cfg, ranges = apply_method(base, hp, spec)
            root = np.random.SeedSequence([int(master_seed), int(holdout)])
            results = run_trials(cfg, dataset, n_trials, ranges, model_config,
                                 holdout=holdout, master_seed=root, jobs=jobs)
            records.extend(
                AblationRecord(spec.label, int(holdout), i, res)
                for i, res in enumerate(results))
    return records


METHOD_LABELS = {
    "none": "ERM",
    "feature": "W/ fea.",
    "logit": "W/ log.",
    "feature_plus_logit": "W/ fea.&log.",
    "rationale_zero_target": "W/ Rbar=0",
    "rationale": "Ours",
}


def method_label(config: TrainConfig):
    if config.variant == "rationale":
        if config.momentum == 0.0 and config.mean_init == "frozen_init":
            return "W/ m=0"
        if config.momentum == 1.0:
            return "W/ m=1"
    return METHOD_LABELS[config.variant]

"""Command-line entry point: generate data, train, sweep, ablate, report.

Configuration is one flat JSON document. Effective values compose in
order: built-in defaults, then the ``--config`` file, then named flags,
then ``--set key=value`` overrides; the last writer wins and the
composition is echoed into every run manifest. Exit codes: 0 success,
1 runtime failure (single-line ``error:`` message on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__, autodiff
from .data import (DomainDataset, SplitPlan, SyntheticShiftConfig, generate,
                   leave_one_out_splits, load_csv, standardize_splits, write_csv)
from .errors import ConfigError, RidgError
from .model import ModelConfig, load_checkpoint, save_checkpoint, FeatureExtractor, LinearHead
from .rationale import export_rationales, rationale_np
from .report import export_tables, manifest_hash, summarize
from .trainer import (ABLATION_METHODS, HpRanges, TrainConfig, method_label,
                      run_ablation, run_trials, train_one, write_traces,
                      NORMALIZATION_ALIASES)

PRESETS = ("two_blobs", "two_blobs_k7", "rotated_moons", "nuisance_dims")

DEFAULTS = {
    # data generation
    "preset": "two_blobs",
    "samples_per_domain": 500,
    "class_count": 2,
    "domain_count": 4,
    "noise_scale": 0.8,
    "spurious_noise_scale": 0.2,
    "nuisance_dims": 4,
    "source_strength": 0.9,
    "target_strength": 0.1,
    # model
    "hidden": [64, 64],
    "feature_dim": 16,
    # training
    "variant": "none",
    "alpha": 0.01,
    "momentum": 0.01,
    "batch_size": 32,
    "steps": 2000,
    "lr": 3e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "normalization": "element_mean",
    "mean_init": "first_batch",
    "eval_interval": 100,
    "optimizer": "adam",
    "stratified": False,
    # experiment drivers
    "trials": 5,
    "train_fraction": 0.8,
    "alpha_range": [1e-3, 1e-1],
    "momentum_range": [1e-4, 1e-1],
    "lr_range": [1e-3, 1e-2],
    "batch_sizes": [32],
    "save_traces": False,
    # run control
    "seed": 0,
    "jobs": 1,
}

_FLAG_KEYS = ("variant", "alpha", "momentum", "normalization", "mean_init", "trials",
              "seed", "jobs")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _effective_config(args):
    """Compose defaults, config file, named flags, and --set overrides."""
    cfg = dict(DEFAULTS)
    sources = [{"layer": "defaults", "keys": sorted(DEFAULTS)}]
    path = getattr(args, "config", None)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        cfg.update(doc)
        sources.append({"layer": f"file:{path}", "keys": sorted(doc)})
    flag_keys = []
    for key in _FLAG_KEYS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            cfg[key] = value
            flag_keys.append(key)
            if key in ("alpha", "momentum"):
                cfg[f"{key}_range"] = [value, value]
    if getattr(args, "preset", None):
        cfg["preset"] = args.preset
        flag_keys.append("preset")
    if flag_keys:
        sources.append({"layer": "flags", "keys": sorted(flag_keys)})
    set_keys = []
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, raw = pair.partition("=")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(raw)
        set_keys.append(key)
    if set_keys:
        sources.append({"layer": "set", "keys": set_keys})
    cfg["normalization"] = NORMALIZATION_ALIASES.get(cfg["normalization"],
                                                     cfg["normalization"])
    return cfg, sources


def _shift_config(cfg, holdout, seed):
    """Synthetic dataset config for one held-out domain: the target domain's
    spurious-correlation strength comes from target_strength."""
    preset = cfg["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    m = int(cfg["domain_count"])
    if preset in ("two_blobs", "two_blobs_k7"):
        generator = "two_blobs_spurious"
        strengths = [float(cfg["source_strength"])] * m
        strengths[holdout] = float(cfg["target_strength"])
        k = 7 if preset == "two_blobs_k7" else int(cfg["class_count"])
    else:
        generator = preset
        strengths = [d / max(m - 1, 1) for d in range(m)]
        k = 2 if preset == "rotated_moons" else int(cfg["class_count"])
    return SyntheticShiftConfig(
        generator=generator,
        strengths=tuple(strengths),
        samples_per_domain=int(cfg["samples_per_domain"]),
        class_count=k,
        noise_scale=float(cfg["noise_scale"]),
        spurious_noise_scale=float(cfg["spurious_noise_scale"]),
        nuisance_dims=int(cfg["nuisance_dims"]),
        seed=seed,
    )


def _train_config(cfg):
    return TrainConfig(
        variant=cfg["variant"],
        alpha=float(cfg["alpha"]),
        momentum=float(cfg["momentum"]),
        batch_size=int(cfg["batch_size"]),
        steps=int(cfg["steps"]),
        lr=float(cfg["lr"]),
        beta1=float(cfg["beta1"]),
        beta2=float(cfg["beta2"]),
        eps=float(cfg["eps"]),
        normalization=cfg["normalization"],
        mean_init=cfg["mean_init"],
        eval_interval=int(cfg["eval_interval"]),
        optimizer=cfg["optimizer"],
        stratified=bool(cfg["stratified"]),
    )


def _model_config(cfg, dataset):
    return ModelConfig(input_dim=dataset.feature_dim,
                       hidden=tuple(int(w) for w in cfg["hidden"]),
                       feature_dim=int(cfg["feature_dim"]),
                       class_count=dataset.class_count)


def _hp_ranges(cfg):
    return HpRanges(alpha=tuple(cfg["alpha_range"]),
                    momentum=tuple(cfg["momentum_range"]),
                    lr=tuple(cfg["lr_range"]),
                    batch_sizes=tuple(int(b) for b in cfg["batch_sizes"]))


def _dataset_label(args, cfg):
    data = getattr(args, "data", None)
    if data:
        return os.path.splitext(os.path.basename(data))[0]
    return cfg["preset"]


def _load_or_generate(args, cfg, holdout, seed):
    data = getattr(args, "data", None)
    if data:
        return load_csv(data)
    return generate(_shift_config(cfg, holdout, seed))


def _holdouts(args, cfg, dataset_domains):
    h = getattr(args, "holdout_domain", None)
    if h is None:
        return list(range(dataset_domains))
    if not 0 <= h < dataset_domains:
        raise ConfigError(f"holdout domain {h} outside [0, {dataset_domains})")
    return [h]


def _write_manifest(path, command, cfg, sources, dataset, method, seeds, metrics,
                    split=None):
    doc = {
        "version": __version__,
        "command": command,
        "precision": autodiff.precision_name(),
        "dataset": dataset,
        "method": method,
        "config": cfg,
        "config_sources": sources,
        "seeds": seeds,
        "split": split,
        "metrics": metrics,
    }
    doc["hash"] = manifest_hash({k: v for k, v in doc.items() if k != "hash"})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    return doc


def cmd_generate(args):
    cfg, _ = _effective_config(args)
    m = int(cfg["domain_count"])
    holdout = args.holdout_domain if args.holdout_domain is not None else m - 1
    if not 0 <= holdout < m:
        raise ConfigError(f"holdout domain {holdout} outside [0, {m})")
    ds = generate(_shift_config(cfg, holdout, int(cfg["seed"])))
    write_csv(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.domain_count} domains, "
          f"{ds.class_count} classes) to {args.out}")
    return 0


def cmd_train(args):
    cfg, sources = _effective_config(args)
    os.makedirs(args.out, exist_ok=True)
    root = np.random.SeedSequence(int(cfg["seed"]))
    gen_ss, split_ss, train_ss = root.spawn(3)
    gen_seed = int(gen_ss.generate_state(1)[0])
    ds = _load_or_generate(args, cfg, holdout=_first_holdout(args, cfg), seed=gen_seed)
    holdout = args.holdout_domain if args.holdout_domain is not None else ds.domain_count - 1
    plan = SplitPlan(holdout, seed=int(split_ss.generate_state(1)[0]),
                     train_fraction=float(cfg["train_fraction"]))
    tr, va, te = leave_one_out_splits(ds, plan)
    tr, va, te, stats = standardize_splits(tr, va, te)
    train_cfg = replace(_train_config(cfg), seed=int(train_ss.generate_state(1)[0]))
    result = train_one(train_cfg, (tr, va, te), _model_config(cfg, ds))
    result.split = {"held_out_domain": plan.held_out_domain, "seed": plan.seed,
                    "train_fraction": plan.train_fraction}

    label = method_label(train_cfg)
    metrics = {
        "selected_target_accuracy": result.selected_target_accuracy,
        "best_val_accuracy": result.best_val_accuracy,
        "best_step": result.best_step,
        "wall_time_s": result.wall_time_s,
    }
    seeds = {"master": int(cfg["seed"]), "generate": gen_seed,
             "split": plan.seed, "train": train_cfg.seed}
    _write_manifest(os.path.join(args.out, "manifest.json"), "train", cfg, sources,
                    _dataset_label(args, cfg), label, seeds, metrics, result.split)
    write_traces(result, os.path.join(args.out, "traces.csv"))
    extractor, head = _model_from_weights(result.best_weights)
    save_checkpoint(extractor, head, os.path.join(args.out, "checkpoint.json"),
                    seed=train_cfg.seed,
                    extra={"feature_mean": stats["mean"].tolist(),
                           "feature_std": stats["std"].tolist()})
    print(f"{label}: target accuracy {result.selected_target_accuracy:.1f} "
          f"(val {result.best_val_accuracy:.1f} at step {result.best_step})")
    return 0


def _first_holdout(args, cfg):
    h = getattr(args, "holdout_domain", None)
    return h if h is not None else int(cfg["domain_count"]) - 1


def _model_from_weights(weights):
    from .autodiff import Tensor
    extractor = FeatureExtractor(
        [Tensor(w, requires_grad=True) for w, _ in weights["layers"]],
        [Tensor(b, requires_grad=True) for _, b in weights["layers"]])
    return extractor, LinearHead(Tensor(weights["head"], requires_grad=True))


def _record(method, dataset, holdout, result):
    return {"method": method, "dataset": dataset, "domain": holdout,
            "accuracy": result.selected_target_accuracy}


def _persist_trials(out_dir, command, cfg, sources, dataset_label, entries,
                    save_traces=False):
    os.makedirs(os.path.join(out_dir, "manifests"), exist_ok=True)
    for method, holdout, trial, result in entries:
        slug = method.lower().replace(" ", "").replace("/", "").replace(".", "") \
            .replace("&", "_").replace("=", "")
        name = f"trial_{slug}_h{holdout}_t{trial:03d}"
        metrics = {
            "selected_target_accuracy": result.selected_target_accuracy,
            "best_val_accuracy": result.best_val_accuracy,
            "best_step": result.best_step,
            "wall_time_s": result.wall_time_s,
        }
        seeds = {"master": int(cfg["seed"]), "train": result.config["seed"],
                 "split": result.split["seed"] if result.split else None}
        _write_manifest(os.path.join(out_dir, "manifests", name + ".json"), command,
                        {**cfg, **result.config}, sources, dataset_label, method,
                        seeds, metrics, result.split)
        if save_traces:
            write_traces(result, os.path.join(out_dir, "manifests", name + "_traces.csv"))


def cmd_sweep(args):
    cfg, sources = _effective_config(args)
    os.makedirs(args.out, exist_ok=True)
    label = _dataset_label(args, cfg)
    base = _train_config(cfg)
    hp = _hp_ranges(cfg)
    records, entries = [], []
    probe = _load_or_generate(args, cfg, holdout=0, seed=int(cfg["seed"]))
    for holdout in _holdouts(args, cfg, probe.domain_count):
        ds = (probe if getattr(args, "data", None)
              else generate(_shift_config(cfg, holdout, int(cfg["seed"]))))
        results = run_trials(base, ds, int(cfg["trials"]), hp, _model_config(cfg, ds),
                             holdout=holdout,
                             train_fraction=float(cfg["train_fraction"]),
                             master_seed=np.random.SeedSequence(
                                 [int(cfg["seed"]), holdout]),
                             jobs=int(cfg["jobs"]))
        method = method_label(replace(base, variant=cfg["variant"]))
        for i, result in enumerate(results):
            records.append(_record(method, label, holdout, result))
            entries.append((method, holdout, i, result))
    _persist_trials(args.out, "sweep", cfg, sources, label, entries,
                    save_traces=bool(cfg["save_traces"]))
    _write_records_csv(os.path.join(args.out, "trials.csv"), records)
    mean = float(np.mean([r["accuracy"] for r in records]))
    print(f"{len(records)} trials, mean target accuracy {mean:.1f}; results in {args.out}")
    return 0


def _write_records_csv(path, records):
    import csv as _csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["method", "dataset", "domain", "accuracy"])
        for rec in records:
            writer.writerow([rec["method"], rec["dataset"], rec["domain"],
                             repr(float(rec["accuracy"]))])


def cmd_ablate(args):
    cfg, sources = _effective_config(args)
    os.makedirs(args.out, exist_ok=True)
    label = _dataset_label(args, cfg)
    base = _train_config(cfg)
    hp = _hp_ranges(cfg)
    if getattr(args, "data", None):
        fixed = load_csv(args.data)
        dataset_for_holdout = lambda h: fixed
        domain_count = fixed.domain_count
    else:
        dataset_for_holdout = lambda h: generate(_shift_config(cfg, h, int(cfg["seed"])))
        domain_count = int(cfg["domain_count"])
    holdouts = _holdouts(args, cfg, domain_count)
    records = run_ablation(dataset_for_holdout, holdouts, ABLATION_METHODS,
                           int(cfg["trials"]), base, hp,
                           master_seed=int(cfg["seed"]), jobs=int(cfg["jobs"]))
    entries = [(r.method, r.holdout, r.trial, r.result) for r in records]
    _persist_trials(args.out, "ablate", cfg, sources, label, entries,
                    save_traces=bool(cfg["save_traces"]))
    flat = [_record(r.method, label, r.holdout, r.result) for r in records]
    _write_records_csv(os.path.join(args.out, "trials.csv"), flat)
    table_path = os.path.join(args.out, "ablation.csv")
    _write_ablation_table(table_path, flat, holdouts)
    summaries = summarize(flat)
    export_tables(summaries, args.out, run_hash=manifest_hash(cfg))
    print(f"ablation over {len(ABLATION_METHODS)} methods x {len(holdouts)} holdouts "
          f"x {cfg['trials']} trials; table in {table_path}")
    return 0


def _write_ablation_table(path, records, holdouts):
    """One row per method: per-holdout mean and std, overall mean and std,
    and the interval score against ERM."""
    import csv as _csv
    methods = [m.label for m in ABLATION_METHODS]
    by_method = {m: [r for r in records if r["method"] == m] for m in methods}
    erm = np.asarray([r["accuracy"] for r in by_method["ERM"]])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        header = ["method"]
        for h in holdouts:
            header += [f"holdout{h}_mean", f"holdout{h}_std"]
        header += ["mean", "std", "score_vs_erm"]
        writer.writerow(header)
        from .report import interval_score
        for m in methods:
            accs = np.asarray([r["accuracy"] for r in by_method[m]])
            row = [m]
            for h in holdouts:
                sub = np.asarray([r["accuracy"] for r in by_method[m]
                                  if r["domain"] == h])
                row += [f"{sub.mean():.1f}", f"{sub.std():.1f}"]
            row += [f"{accs.mean():.1f}", f"{accs.std():.1f}"]
            row.append("" if m == "ERM" else
                       interval_score(accs.mean(), accs.std(), erm.mean(), erm.std()))
            writer.writerow(row)


def cmd_report(args):
    cfg, _ = _effective_config(args)
    manifest_dir = args.runs
    records = []
    for name in sorted(os.listdir(manifest_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(manifest_dir, name), "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if "metrics" not in doc or "method" not in doc:
            continue
        records.append({
            "method": doc["method"],
            "dataset": doc.get("dataset", "unknown"),
            "domain": (doc.get("split") or {}).get("held_out_domain"),
            "accuracy": doc["metrics"]["selected_target_accuracy"],
        })
    summaries = summarize(records)
    os.makedirs(args.out, exist_ok=True)
    csv_path, json_path = export_tables(summaries, args.out)
    for s in summaries:
        score = "-" if s.score is None else f"{s.score:+d}"
        print(f"{s.method:<14} {s.dataset:<16} {s.mean:5.1f} +/- {s.std:.1f}  {score}")
    print(f"tables: {csv_path} {json_path}")
    return 0


def cmd_export_rationales(args):
    ds = load_csv(args.data)
    extractor, head, meta = load_checkpoint(args.checkpoint)
    features = ds.features
    extra = meta.get("extra") or {}
    if "feature_mean" in extra and "feature_std" in extra:
        features = (features - np.asarray(extra["feature_mean"])) \
            / np.asarray(extra["feature_std"])
    z = extractor.forward_np(features)
    values = rationale_np(z, head.weight.data)
    export_rationales(args.out, values, ds.labels, ds.domains)
    print(f"wrote {len(ds)} vectorized contribution rows to {args.out}")
    return 0


def _add_common(sub, data_flag=True):
    sub.add_argument("--config", help="flat JSON config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="master seed for every stream")
    sub.add_argument("--preset", choices=PRESETS, help="synthetic dataset preset")
    if data_flag:
        sub.add_argument("--data", help="input dataset CSV (overrides --preset)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ridg", description="rationale-invariance training toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate", help="write a synthetic dataset CSV")
    _add_common(p, data_flag=False)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-domain", type=int,
                   help="domain whose spurious correlation is flipped")
    p.set_defaults(func=cmd_generate)

    p = commands.add_parser("train", help="run one training trial")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("none", "rationale", "feature", "logit",
                                         "feature_plus_logit", "rationale_zero_target"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--normalization", choices=("element_mean", "eq3"))
    p.add_argument("--mean-init", dest="mean_init",
                   choices=("first_batch", "zeros", "frozen_init"))
    p.add_argument("--holdout-domain", type=int)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("sweep", help="multi-trial hyperparameter sweep")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("none", "rationale", "feature", "logit",
                                         "feature_plus_logit", "rationale_zero_target"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--normalization", choices=("element_mean", "eq3"))
    p.add_argument("--mean-init", dest="mean_init",
                   choices=("first_batch", "zeros", "frozen_init"))
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--holdout-domain", type=int,
                   help="restrict to one held-out domain (default: all)")
    p.set_defaults(func=cmd_sweep)

    p = commands.add_parser("ablate", help="run the full method comparison matrix")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--holdout-domain", type=int)
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser("report", help="aggregate run manifests into tables")
    p.add_argument("--runs", required=True, help="directory of trial manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_report)

    p = commands.add_parser("export-rationales",
                            help="vectorized contribution matrices for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_rationales)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    precision = os.environ.get("RIDG_PRECISION", "f64")
    try:
        if precision not in ("f32", "f64"):
            raise ConfigError(f"RIDG_PRECISION must be f32 or f64, got {precision!r}")
        autodiff.set_default_dtype(precision)
        return args.func(args)
    except (RidgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

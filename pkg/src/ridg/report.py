"""Aggregate trial accuracies into per-method summary tables.

Records are plain mappings with keys ``method``, ``dataset``,
``accuracy`` (percent) and optionally ``domain`` and ``group``. When
every record of a method/dataset group carries a ``group`` id, the
reported std is taken over group means; otherwise over raw trials, and
the mode used is recorded on the summary.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError


@dataclass
class MethodSummary:
    method: str
    dataset: str
    mean: float
    std: float
    n: int
    score: int | None
    std_mode: str
    per_domain: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "method": self.method,
            "dataset": self.dataset,
            "mean": self.mean,
            "std": self.std,
            "n": self.n,
            "score": self.score,
            "std_mode": self.std_mode,
            "per_domain": {str(k): list(v) for k, v in self.per_domain.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            method=doc["method"],
            dataset=doc["dataset"],
            mean=doc["mean"],
            std=doc["std"],
            n=doc["n"],
            score=doc["score"],
            std_mode=doc["std_mode"],
            per_domain={int(k): tuple(v) for k, v in doc.get("per_domain", {}).items()},
        )


def interval_score(mean, std, ref_mean, ref_std):
    """+1 when mean - std clears the reference's mean + std, -1 in the
    mirrored case, 0 when the two intervals overlap."""
    if mean - std > ref_mean + ref_std:
        return 1
    if mean + std < ref_mean - ref_std:
        return -1
    return 0


def _stats(values):
    # canonical order makes the aggregation invariant to trial order
    arr = np.sort(np.asarray(values, dtype=np.float64))
    return float(arr.mean()), float(arr.std()), int(arr.size)


def _group_stats(records):
    if all(rec.get("group") is not None for rec in records):
        by_group = {}
        for rec in records:
            by_group.setdefault(rec["group"], []).append(rec["accuracy"])
        means = [float(np.mean(vals)) for _, vals in sorted(by_group.items())]
        mean, std, _ = _stats(means)
        return mean, std, len(records), "groups"
    mean, std, n = _stats([rec["accuracy"] for rec in records])
    return mean, std, n, "trials"


def summarize(records, baseline="ERM"):
    """Per method-and-dataset means, stds, and interval scores against the
    baseline. Deterministic and invariant to record order."""
    if not records:
        return []
    groups = {}
    for rec in records:
        try:
            key = (rec["method"], rec["dataset"])
            acc = rec["accuracy"]
        except KeyError as exc:
            raise AggregationError(f"record missing key {exc}") from None
        if acc is None or not np.isfinite(acc):
            raise AggregationError(f"non-finite accuracy in group {key}")
        groups.setdefault(key, []).append(rec)

    stats = {key: _group_stats(recs) for key, recs in groups.items()}
    datasets = sorted({key[1] for key in groups})
    baseline_stats = {}
    for ds in datasets:
        if (baseline, ds) not in stats:
            raise AggregationError(f"no {baseline!r} results for dataset {ds!r}")
        baseline_stats[ds] = stats[(baseline, ds)]

    summaries = []
    for (method, ds), (mean, std, n, mode) in stats.items():
        if method == baseline:
            score = None
        else:
            ref_mean, ref_std, _, _ = baseline_stats[ds]
            score = interval_score(mean, std, ref_mean, ref_std)
        per_domain = {}
        domains = sorted({rec["domain"] for rec in groups[(method, ds)]
                          if rec.get("domain") is not None})
        for dom in domains:
            vals = [rec["accuracy"] for rec in groups[(method, ds)]
                    if rec.get("domain") == dom]
            dmean, dstd, dn = _stats(vals)
            per_domain[int(dom)] = (dmean, dstd, dn)
        summaries.append(MethodSummary(method=method, dataset=ds, mean=mean, std=std,
                                       n=n, score=score, std_mode=mode,
                                       per_domain=per_domain))
    summaries.sort(key=lambda s: (s.dataset, s.mean, s.method))
    return summaries


def manifest_hash(obj):
    """Short stable hash of any JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def export_tables(summaries, out_dir, run_hash=None):
    """Write the summary CSV (one-decimal means, mirroring the usual table
    style) and a full-precision JSON document; returns both paths. File
    names embed the run hash for traceability."""
    docs = [s.to_dict() for s in summaries]
    h = run_hash if run_hash is not None else manifest_hash(docs)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"summary_{h}.csv")
    json_path = os.path.join(out_dir, f"summary_{h}.json")
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "dataset", "mean", "std", "score"])
            for s in summaries:
                writer.writerow([s.method, s.dataset, f"{s.mean:.1f}", f"{s.std:.1f}",
                                 "" if s.score is None else s.score])
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"summaries": docs}, fh, indent=1)
    except OSError as exc:
        raise AggregationError(f"cannot write tables under {out_dir}: {exc}") from exc
    return csv_path, json_path


def load_summaries(json_path):
    with open(json_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [MethodSummary.from_dict(entry) for entry in doc["summaries"]]

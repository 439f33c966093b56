"""Per-label ranking metrics, frequency bins and bootstrap intervals.

AUROC is the Mann-Whitney probability that a positive outranks a
negative, ties counting one half. Average precision sums
``delta recall * precision`` over score thresholds; instances with equal
scores cross a threshold together, so the value does not depend on the
order of ties.

Both metrics are computed column-wise on a presorted matrix with
optional integer instance weights. A bootstrap resample is the same
matrix with weights equal to how often each instance was drawn, so the
sort is done once per evaluation rather than once per resample.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UnstableStatisticError, ValidationError
from .seeding import stream

__all__ = [
    "BINS",
    "ScoreMatrix",
    "BinStats",
    "EvalReport",
    "auroc",
    "average_precision",
    "per_label_metrics",
    "micro_metrics",
    "bin_of",
    "bin_report",
    "bootstrap_ci",
    "evaluate",
    "emit_report",
    "read_report",
]

# Inclusive ranges of training-split positive counts.
BINS = ((5, 10), (11, 25), (26, 50), (51, 100), (101, 250), (251, 500), (501, 1000))
METRICS = ("auroc", "ap")
NULL = "NA"


@dataclass
class ScoreMatrix:
    instance_ids: list
    label_ids: list
    scores: np.ndarray
    truths: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truths = np.asarray(self.truths).astype(bool)
        if self.scores.shape != self.truths.shape:
            raise ValidationError("scores and truths must have the same shape")
        if self.scores.shape != (len(self.instance_ids), len(self.label_ids)):
            raise ValidationError("matrix shape does not match instance and label ids")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("scores must be finite")

    def take(self, rows):
        rows = np.asarray(rows)
        return ScoreMatrix([self.instance_ids[i] for i in rows], self.label_ids,
                           self.scores[rows], self.truths[rows])

    def columns(self, labels):
        idx = {l: j for j, l in enumerate(self.label_ids)}
        cols = [idx[l] for l in labels]
        return ScoreMatrix(self.instance_ids, list(labels), self.scores[:, cols], self.truths[:, cols])


class _Ranked:
    """Columns sorted by descending score, with tie groups of the positives.

    Only the prefix sum of instance weights is computed densely; every
    other quantity is evaluated at positive entries only.
    """

    def __init__(self, scores, truths):
        scores = np.asarray(scores, dtype=np.float64)
        truths = np.asarray(truths, dtype=bool)
        if scores.ndim == 1:
            scores, truths = scores[:, None], truths[:, None]
        n, c = scores.shape
        self.shape = (n, c)
        self.order = np.argsort(-scores, axis=0, kind="stable")
        s = np.take_along_axis(scores, self.order, axis=0)
        truth = np.take_along_axis(truths, self.order, axis=0)
        idx = np.arange(n)[:, None]
        end = np.ones_like(s, dtype=bool)
        end[:-1] = s[:-1] != s[1:]
        start = np.ones_like(s, dtype=bool)
        start[1:] = s[1:] != s[:-1]
        group_end = np.minimum.accumulate(np.where(end, idx, n)[::-1], axis=0)[::-1]
        group_start = np.maximum.accumulate(np.where(start, idx, -1), axis=0)

        # positives in column-major order
        col, row = np.nonzero(truth.T)
        self.col = col
        self.pos_flat = row * c + col
        ge = group_end[row, col]
        gs = group_start[row, col]
        self.ge_flat = ge * c + col
        self.gs_flat = gs * c + col
        k = len(col)
        # last positive sharing each positive's tie group, and the one just
        # before the group (index -1 reads as zero weight below)
        new_group = np.ones(k, dtype=bool)
        new_group[1:] = (col[1:] != col[:-1]) | (ge[1:] != ge[:-1])
        group_id = np.cumsum(new_group) - 1
        group_last = np.flatnonzero(np.append(new_group[1:], True))
        self.last_in_group = group_last[group_id]
        first = np.flatnonzero(new_group)[group_id]
        col_first = np.ones(k, dtype=bool)
        col_first[1:] = col[1:] != col[:-1]
        # cumulative positive weight is global; subtract the total of earlier columns
        self.col_offset_idx = np.flatnonzero(col_first)[np.cumsum(col_first) - 1] - 1
        self.prev = np.flatnonzero(new_group)[group_id] - 1

    def metrics(self, weights=None):
        """``(auroc, ap)`` arrays per column; NaN where undefined."""
        n, c = self.shape
        if weights is None:
            ws = np.ones((n, c))
        else:
            w = np.asarray(weights, dtype=np.float64)
            ws = w[self.order] if w.ndim == 1 else np.take_along_axis(w, self.order, axis=0)
        cw = np.cumsum(ws, axis=0)
        n_total = cw[-1]
        cw = cw.ravel()
        ws = ws.ravel()
        posw = ws[self.pos_flat]
        cpos = np.cumsum(posw)
        cpos0 = np.append(cpos, 0.0)  # index -1 reads 0
        offset = cpos0[self.col_offset_idx]
        cp_end = cpos[self.last_in_group] - offset
        cp_before = cpos0[self.prev] - offset
        cn_end = cw[self.ge_flat] - cp_end
        cn_before = cw[self.gs_flat] - ws[self.gs_flat] - cp_before
        n_pos = np.bincount(self.col, posw, minlength=c)
        n_neg = n_total - n_pos
        # negatives strictly below plus half the tied negatives, per positive
        below = (n_neg[self.col] - cn_end) + 0.5 * (cn_end - cn_before)
        num = np.bincount(self.col, posw * below, minlength=c)
        with np.errstate(invalid="ignore", divide="ignore"):
            prec = np.where(posw > 0, cp_end / np.maximum(cp_end + cn_end, 1e-300), 0.0)
            roc = num / (n_pos * n_neg)
            ap = np.bincount(self.col, posw * prec, minlength=c) / n_pos
        roc[(n_pos == 0) | (n_neg == 0)] = np.nan
        ap[n_pos == 0] = np.nan
        return roc, ap


def _check_binary(scores, truths):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truths = np.asarray(truths).ravel()
    if scores.shape != truths.shape:
        raise ValidationError("scores and truths must have the same length")
    if not np.all(np.isin(truths, (0, 1))):
        raise ValidationError("truths must be binary")
    return scores, truths.astype(bool)


def auroc(scores, truths) -> float:
    """Area under the ROC curve; raises ``ValueError`` for a single-class input."""
    scores, truths = _check_binary(scores, truths)
    if truths.all() or not truths.any():
        raise ValueError("AUROC is undefined without both positives and negatives")
    return float(_Ranked(scores, truths).metrics()[0][0])


def average_precision(scores, truths) -> float:
    """Step-wise area under the precision-recall curve."""
    scores, truths = _check_binary(scores, truths)
    if not truths.any():
        raise ValueError("average precision is undefined without positives")
    return float(_Ranked(scores, truths).metrics()[1][0])


def per_label_metrics(sm: ScoreMatrix):
    """``({label: {"auroc", "ap", "n_pos"}}, degenerate_labels)``.

    Labels with no positives or no negatives in ``sm`` are degenerate and
    left out of the mapping.
    """
    roc, ap = _Ranked(sm.scores, sm.truths).metrics()
    n_pos = sm.truths.sum(axis=0)
    out, degenerate = {}, []
    for j, label in enumerate(sm.label_ids):
        if np.isnan(roc[j]):
            degenerate.append(label)
        else:
            out[label] = {"auroc": float(roc[j]), "ap": float(ap[j]), "n_pos": int(n_pos[j])}
    return out, degenerate


def micro_metrics_arrays(scores, truths):
    roc, ap = _Ranked(np.ravel(scores), np.ravel(truths)).metrics()
    return float(roc[0]), float(ap[0])


def micro_metrics(sm: ScoreMatrix) -> dict:
    """AUROC and AP over all (instance, label) pairs pooled together."""
    roc, ap = micro_metrics_arrays(sm.scores, sm.truths)
    if math.isnan(roc):
        raise ValueError("micro metrics are undefined on a single-class matrix")
    return {"auroc": roc, "ap": ap}


def bin_of(count, bins=BINS):
    for lo, hi in bins:
        if lo <= count <= hi:
            return (lo, hi)
    return None


@dataclass
class BinStats:
    range: tuple
    n_labels: int
    mean_auroc: float = None
    mean_ap: float = None
    auroc_ci: tuple = None
    ap_ci: tuple = None
    n_degenerate: int = 0

    @property
    def name(self):
        return f"{self.range[0]}-{self.range[1]}"


def bin_report(per_label, train_counts, bins=BINS) -> list:
    """Unweighted per-bin means of per-label AUROC and AP.

    Bin membership uses ``train_counts``; labels outside every bin are
    left out. Empty bins get ``None`` means.
    """
    out = []
    for lo, hi in bins:
        members = [l for l in per_label if lo <= train_counts.get(l, 0) <= hi]
        stats = BinStats((lo, hi), len(members))
        if members:
            stats.mean_auroc = float(np.mean([per_label[l]["auroc"] for l in members]))
            stats.mean_ap = float(np.mean([per_label[l]["ap"] for l in members]))
        out.append(stats)
    return out


# -- bootstrap ---------------------------------------------------------------

class BinnedStatistic:
    """Per-bin mean AUROC and AP, as a vector ``[auroc_bin0, ap_bin0, ...]``.

    Undefined labels within a resample are dropped from that resample's
    mean; a bin with no defined label is NaN.
    """

    def __init__(self, train_counts, bins=BINS):
        self.train_counts = train_counts
        self.bins = bins

    def _bin_index(self, labels):
        return np.array([next((k for k, (lo, hi) in enumerate(self.bins)
                               if lo <= self.train_counts.get(l, 0) <= hi), -1) for l in labels])

    def _reduce(self, roc, ap, which):
        out = np.full(2 * len(self.bins), np.nan)
        for k in range(len(self.bins)):
            sel = which == k
            for m, vals in enumerate((roc, ap)):
                v = vals[sel]
                v = v[~np.isnan(v)]
                if v.size:
                    out[2 * k + m] = v.mean()
        return out

    def __call__(self, sm: ScoreMatrix):
        roc, ap = _Ranked(sm.scores, sm.truths).metrics()
        return self._reduce(roc, ap, self._bin_index(sm.label_ids))

    def prepare(self, sm: ScoreMatrix):
        which = self._bin_index(sm.label_ids)
        cols = np.flatnonzero(which >= 0)
        ranked = _Ranked(sm.scores[:, cols], sm.truths[:, cols])
        which = which[cols]
        return lambda counts: self._reduce(*ranked.metrics(counts), which)


class MicroStatistic:
    """Vector ``[micro_auroc, micro_ap]``."""

    def __call__(self, sm: ScoreMatrix):
        return np.array(micro_metrics_arrays(sm.scores, sm.truths))

    def prepare(self, sm: ScoreMatrix):
        ranked = _Ranked(sm.scores.ravel(), sm.truths.ravel())
        n_labels = sm.scores.shape[1]
        return lambda counts: np.array([x[0] for x in ranked.metrics(np.repeat(counts, n_labels))])


def bootstrap_values(sm: ScoreMatrix, statistic, n_resamples=500, seed=0):
    """Statistic on each of ``n_resamples`` row resamples, shape ``(n_resamples, ...)``.

    Statistics with a ``prepare`` method are evaluated through instance
    weights; others are called on an explicitly resampled matrix. Both
    routes see the same draws.
    """
    rng = stream(seed, "bootstrap")
    n = len(sm.instance_ids)
    fast = statistic.prepare(sm) if hasattr(statistic, "prepare") else None
    values = []
    for _ in range(n_resamples):
        rows = rng.integers(0, n, size=n)
        if fast is not None:
            values.append(fast(np.bincount(rows, minlength=n).astype(np.float64)))
        else:
            values.append(statistic(sm.take(rows)))
    return np.asarray(values, dtype=np.float64)


def percentile_interval(values, level=0.95, max_undefined=0.10):
    """Percentile interval per component; ``None`` where too often undefined."""
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(len(values), -1)
    alpha = (1 - level) / 2
    out = []
    for col in flat.T:
        ok = col[~np.isnan(col)]
        if len(col) - len(ok) > max_undefined * len(col) or not ok.size:
            out.append(None)
        else:
            lo, hi = np.percentile(ok, [100 * alpha, 100 * (1 - alpha)])
            out.append((float(lo), float(hi)))
    return out


def bootstrap_ci(sm: ScoreMatrix, statistic, n_resamples=500, level=0.95, seed=0):
    """Percentile bootstrap interval, resampling instances with replacement.

    Returns ``(low, high)`` for a scalar statistic, or a list of them for a
    vector statistic. Raises ``UnstableStatisticError`` when the statistic
    is undefined (NaN) on more than 10% of resamples.
    """
    values = bootstrap_values(sm, statistic, n_resamples, seed)
    intervals = percentile_interval(values, level)
    if any(iv is None for iv in intervals):
        raise UnstableStatisticError("statistic undefined on more than 10% of resamples")
    return intervals[0] if values.ndim == 1 else intervals


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    per_label: dict
    bins: list
    micro: dict
    degenerate: list = field(default_factory=list)
    n_resamples: int = 500
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        for b in d["bins"]:
            b["range"] = list(b["range"])
            for k in ("auroc_ci", "ap_ci"):
                b[k] = None if b[k] is None else list(b[k])
        for k in ("auroc_ci", "ap_ci"):
            if self.micro.get(k) is not None:
                d["micro"][k] = list(self.micro[k])
        return d

    @classmethod
    def from_dict(cls, d):
        bins = []
        for b in d["bins"]:
            b = dict(b)
            b["range"] = tuple(b["range"])
            for k in ("auroc_ci", "ap_ci"):
                b[k] = None if b[k] is None else tuple(b[k])
            bins.append(BinStats(**b))
        micro = dict(d["micro"])
        for k in ("auroc_ci", "ap_ci"):
            if micro.get(k) is not None:
                micro[k] = tuple(micro[k])
        return cls(d["model"], d["per_label"], bins, micro, list(d["degenerate"]),
                   d["n_resamples"], d["seed"])


def evaluate(sm: ScoreMatrix, train_counts, model="model", n_resamples=500, level=0.95,
             seed=0, bins=BINS) -> EvalReport:
    """Per-label metrics, binned means with bootstrap CIs, and micro metrics."""
    per_label, degenerate = per_label_metrics(sm)
    bin_stats = bin_report(per_label, train_counts, bins)
    for b in bin_stats:
        b.n_degenerate = sum(1 for l in degenerate if b.range[0] <= train_counts.get(l, 0) <= b.range[1])
    micro = micro_metrics(sm)
    if n_resamples:
        binned = BinnedStatistic(train_counts, bins)
        cis = percentile_interval(bootstrap_values(sm, binned, n_resamples, seed), level)
        for k, b in enumerate(bin_stats):
            if b.n_labels:
                b.auroc_ci, b.ap_ci = cis[2 * k], cis[2 * k + 1]
        mcis = percentile_interval(bootstrap_values(sm, MicroStatistic(), n_resamples, seed), level)
        micro["auroc_ci"], micro["ap_ci"] = mcis
    return EvalReport(model, per_label, bin_stats, micro, degenerate, n_resamples, seed)


def emit_report(reports, path):
    """Write ``reports`` (one or several) to JSON at ``path`` and CSV beside it.

    The CSV has one row per (bin, model, metric) with columns
    ``bin,model,metric,mean,ci_low,ci_high,n_labels``. Missing values are
    ``NA`` in the CSV and ``null`` in the JSON. Returns both paths.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    path = str(path)
    csv_path = (path[:-5] if path.endswith(".json") else path) + ".csv"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"reports": [r.to_dict() for r in reports]}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", "model", "metric", "mean", "ci_low", "ci_high", "n_labels"])
        for b_idx in range(max(len(r.bins) for r in reports)):
            for r in reports:
                b = r.bins[b_idx]
                for metric in METRICS:
                    mean = getattr(b, f"mean_{metric}")
                    ci = getattr(b, f"{metric}_ci")
                    writer.writerow([b.name, r.model, metric, _fmt(mean),
                                     _fmt(ci and ci[0]), _fmt(ci and ci[1]), b.n_labels])
    return path, csv_path


def _fmt(x):
    return NULL if x is None else repr(float(x))


def read_report(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)["reports"]]

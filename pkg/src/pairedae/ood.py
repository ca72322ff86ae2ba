"""Likelihood-free reconstruction-quality metrics and OOD scoring.

For observation y with direct estimate x_hat = d_x(M_dagger(e_y(y))):

    m1 = ||d_y(e_y(y)) - y|| / ||y||
    m2 = ||d_x(e_x(x_hat)) - x_hat|| / ||x_hat||
    m3 = ||d_y(M(e_x(x_hat))) - y|| / ||y||
    m4 = ||M_dagger(e_y(y)) - e_x(x_hat)|| / ||e_x(x_hat)||
    m5 = ||M(e_x(x_hat)) - e_y(y)|| / ||e_y(y)||

A denominator below 1e-12 leaves the bare numerator and sets ``degenerate``.
Degenerate records are always flagged: the guard only fires on inputs
(such as fully erased observations) that no reference sample resembles.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

METRICS = ("m1", "m2", "m3", "m4", "m5")
DENOM_FLOOR = 1e-12


@dataclass
class MetricRecord:
    m1: float
    m2: float
    m3: float
    m4: float
    m5: float
    ssim: float | None = None
    rel_err: float | None = None
    degenerate: bool = False

    def vector(self):
        return np.array([self.m1, self.m2, self.m3, self.m4, self.m5])


def _quotient(num, den):
    nn = np.linalg.norm(num, axis=-1)
    dd = np.linalg.norm(den, axis=-1)
    deg = dd < DENOM_FLOOR
    return np.where(deg, nn, nn / np.where(deg, 1.0, dd)), deg


def metric_matrix(model, Y):
    """(N, 5) metric values and an (N,) degenerate flag for a batch of observations."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    zy = model.e_y(Y)
    x_hat = model.d_x(model.M_dagger(zy))
    zx = model.e_x(x_hat)
    pairs = [
        (model.d_y(zy) - Y, Y),
        (model.d_x(zx) - x_hat, x_hat),
        (model.d_y(model.M(zx)) - Y, Y),
        (model.M_dagger(zy) - zx, zx),
        (model.M(zx) - zy, zy),
    ]
    vals, degs = zip(*(_quotient(n, d) for n, d in pairs))
    return np.stack(vals, axis=1), np.any(np.stack(degs, axis=1), axis=1)


def recon_metrics(model, y, x=None, image_shape=None) -> MetricRecord:
    """Metrics for one observation; ``x`` (ground truth) adds rel_err and, with ``image_shape``, ssim."""
    if not np.any(np.asarray(y, float)):
        raise ValueError("observation with zero norm")
    vals, deg = metric_matrix(model, np.asarray(y, float).reshape(1, -1))
    rec = MetricRecord(*vals[0].tolist(), degenerate=bool(deg[0]))
    if x is not None:
        x_hat = model.d_x(model.M_dagger(model.e_y(np.asarray(y, float).reshape(1, -1))))[0]
        rec.rel_err = rel_err(x_hat, x)
        if image_shape is not None:
            rec.ssim = ssim(x_hat.reshape(image_shape), np.asarray(x).reshape(image_shape))
    return rec


def recon_metrics_batch(model, Y):
    vals, deg = metric_matrix(model, Y)
    return [MetricRecord(*v.tolist(), degenerate=bool(d)) for v, d in zip(vals, deg)]


@dataclass
class Baseline:
    sorted_values: np.ndarray  # (5, N), each row ascending

    @property
    def count(self):
        return self.sorted_values.shape[1]

    def quantile(self, metric: int, q: float):
        return float(np.quantile(self.sorted_values[metric], q))


def fit_baseline(model, Y, min_samples=30) -> Baseline:
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if Y.shape[0] < min_samples:
        raise ValueError(f"baseline needs at least {min_samples} samples, got {Y.shape[0]}")
    vals, _ = metric_matrix(model, Y)
    return baseline_from_values(vals)


def baseline_from_values(vals) -> Baseline:
    return Baseline(np.sort(np.asarray(vals, dtype=np.float64).T, axis=1))


def percentiles(baseline: Baseline, vals):
    """Midpoint rank of each value in its baseline row: (#less + 0.5 #equal) / N."""
    vals = np.atleast_2d(np.asarray(vals, dtype=np.float64))
    out = np.empty_like(vals)
    for k in range(vals.shape[1]):
        row = baseline.sorted_values[k]
        lo = np.searchsorted(row, vals[:, k], side="left")
        hi = np.searchsorted(row, vals[:, k], side="right")
        out[:, k] = (lo + 0.5 * (hi - lo)) / row.size
    return out


def ood_score(baseline: Baseline, rec, threshold=0.99):
    """Per-metric percentiles and the flag: a degenerate record or any percentile above ``threshold``."""
    v = rec.vector() if isinstance(rec, MetricRecord) else np.asarray(rec, float)
    p = percentiles(baseline, v.reshape(1, -1))[0]
    deg = isinstance(rec, MetricRecord) and rec.degenerate
    return p, bool(deg or np.any(p > threshold))


def flags(baseline: Baseline, vals, degenerate=None, threshold=0.99):
    f = np.any(percentiles(baseline, vals) > threshold, axis=1)
    return f if degenerate is None else f | np.asarray(degenerate, bool)


def flag_rate(baseline: Baseline, vals, degenerate=None, threshold=0.99):
    return float(np.mean(flags(baseline, vals, degenerate, threshold)))


def anomaly_scores(vals, degenerate):
    """Metric values with degenerate rows raised to +inf, matching the flag rule."""
    vals = np.atleast_2d(np.asarray(vals, dtype=np.float64))
    return np.where(np.asarray(degenerate, bool)[:, None], np.inf, vals)


def auc(scores_neg, scores_pos):
    """Probability that a positive outscores a negative (ties count half)."""
    neg = np.asarray(scores_neg, float)
    pos = np.asarray(scores_pos, float)
    allv = np.concatenate([neg, pos])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sv = allv[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rp = ranks[neg.size :].sum()
    return float((rp - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def rel_err(x_hat, x):
    x = np.asarray(x, dtype=np.float64)
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("relative error undefined for zero ground truth")
    return float(np.linalg.norm(np.asarray(x_hat, float) - x) / nx)


def ssim(x_hat, x, win=7, k1=0.01, k2=0.03):
    """Mean single-scale SSIM over all valid win x win uniform windows.

    Data range is max - min of the ground truth (1.0 if that is zero); local
    variances use the unbiased (N - 1) normalization.
    """
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(x, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim expects two images of the same 2-D shape")
    if min(a.shape) < win:
        raise ValueError(f"images smaller than the {win}x{win} window")
    L = float(b.max() - b.min()) or 1.0
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    npx = win * win
    ua, ub = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    cov = npx / (npx - 1.0)
    va = cov * ((wa**2).mean(axis=(-1, -2)) - ua**2)
    vb = cov * ((wb**2).mean(axis=(-1, -2)) - ub**2)
    vab = cov * ((wa * wb).mean(axis=(-1, -2)) - ua * ub)
    s = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua**2 + ub**2 + c1) * (va + vb + c2))
    return float(s.mean())


def _fmt(v):
    return format(float(v), ".17g")


def histogram_rows(values_by_group, bins=64):
    """Shared-edge histograms; returns (edges, {group: counts})."""
    pooled = np.concatenate([np.asarray(v, float) for v in values_by_group.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return edges, {g: np.histogram(np.asarray(v, float), bins=edges)[0] for g, v in values_by_group.items()}


def export_report(records, baseline: Baseline | None, path, *, scatter_pair=("m1", "m3"), bins=64, threshold=0.99):
    """Write histogram, scatter and percentile CSVs into directory ``path``.

    ``records`` is a list of MetricRecord or a dict mapping group label to
    such lists. Histograms cover 64 bins over the pooled range of every
    group plus the baseline. Returns the list of written file paths.
    """
    groups = records if isinstance(records, dict) else {"probe": records}
    os.makedirs(path, exist_ok=True)
    names = list(groups)
    vals = {g: np.array([r.vector() for r in recs]).reshape(-1, 5) for g, recs in groups.items()}
    nonempty = any(v.shape[0] for v in vals.values())
    written = []

    def writer(fname):
        fp = os.path.join(path, fname)
        written.append(fp)
        fh = open(fp, "w", newline="")
        return fh, csv.writer(fh, lineterminator="\n")

    for k, m in enumerate(METRICS):
        cols = names + (["baseline"] if baseline is not None else [])
        fh, w = writer(f"hist_{m}.csv")
        w.writerow(["bin_lo", "bin_hi", *cols])
        if nonempty:
            data = {g: vals[g][:, k] for g in names}
            if baseline is not None:
                data["baseline"] = baseline.sorted_values[k]
            edges, counts = histogram_rows(data, bins)
            for b in range(bins):
                w.writerow([_fmt(edges[b]), _fmt(edges[b + 1]), *(int(counts[c][b]) for c in cols)])
        fh.close()

    i, j = METRICS.index(scatter_pair[0]), METRICS.index(scatter_pair[1])
    fh, w = writer(f"scatter_{scatter_pair[0]}_{scatter_pair[1]}.csv")
    w.writerow(["group", scatter_pair[0], scatter_pair[1]])
    for g in names:
        for row in vals[g]:
            w.writerow([g, _fmt(row[i]), _fmt(row[j])])
    fh.close()

    fh, w = writer("metrics.csv")
    head = ["group", "index", *METRICS, "degenerate"]
    if baseline is not None:
        head += [f"p_{m}" for m in METRICS] + ["flag"]
    w.writerow(head)
    for g in names:
        pct = percentiles(baseline, vals[g]) if baseline is not None and vals[g].shape[0] else None
        for idx, row in enumerate(vals[g]):
            deg = bool(groups[g][idx].degenerate)
            line = [g, idx, *(_fmt(v) for v in row), int(deg)]
            if pct is not None:
                line += [_fmt(p) for p in pct[idx]] + [int(deg or np.any(pct[idx] > threshold))]
            w.writerow(line)
    fh.close()
    return written

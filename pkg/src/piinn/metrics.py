"""Error metrics and posterior summary statistics."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def relative_l2(pred, ref):
    """||ref - pred|| / ||ref||."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    den = np.linalg.norm(ref)
    if den == 0:
        raise MetricError("reference has zero norm")
    return float(np.linalg.norm(ref - pred) / den)


def relative_l2_rows(pred, ref):
    """Row-wise relative error of each prediction against one reference (or matching rows)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    ref = np.asarray(ref, dtype=np.float64)
    den = np.linalg.norm(ref, axis=-1)
    if np.any(den == 0):
        raise MetricError("reference has zero norm")
    return np.linalg.norm(pred - ref, axis=-1) / den


def mean_pointwise_error(field, ref, grid=None, ref_grid=None):
    """(1/K) sum_k |f(x_k) - f*(x_k)|; both fields live on the same K points."""
    field = np.asarray(field, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if grid is not None and ref_grid is not None:
        a, b = np.asarray(grid, dtype=np.float64), np.asarray(ref_grid, dtype=np.float64)
        if a.shape != b.shape or not np.allclose(a, b, rtol=0, atol=1e-12):
            raise MetricError("fields are defined on different grids")
    if field.shape != ref.shape:
        raise MetricError("field shapes differ: %s vs %s" % (field.shape, ref.shape))
    return float(np.mean(np.abs(field - ref)))


def posterior_field_stats(fields, weights=None):
    """Weighted mean and std (population convention) of field realizations.

    ``fields`` is (n, K): one row per posterior sample.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim == 1:
        fields = fields[:, None]
    n = len(fields)
    if n < 2:
        raise MetricError("need at least 2 samples for a standard deviation, got %d" % n)
    if weights is None:
        mean = fields.mean(0)
        var = ((fields - mean) ** 2).mean(0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
            raise MetricError("weights must be nonnegative with positive sum, one per sample")
        w = w / w.sum()
        mean = w @ fields
        var = w @ (fields - mean) ** 2
    return mean, np.sqrt(var)


def boxplot_quantiles(values):
    """(min, q1, median, q3, max) with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise MetricError("no values")
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def z_diagnostics(c, z):
    """Correlations between coefficient and latent blocks plus latent moments."""
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    cc = (c - c.mean(0)) / c.std(0)
    zz = (z - z.mean(0)) / z.std(0)
    corr = cc.T @ zz / len(c)
    return {
        "max_abs_corr": float(np.max(np.abs(corr))),
        "max_abs_mean_z": float(np.max(np.abs(z.mean(0)))),
        "max_abs_std_dev_z": float(np.max(np.abs(z.std(0) - 1.0))),
    }


def hist2d_table(x, y, bins=20, weights=None):
    """Rows of (x_lo, x_hi, y_lo, y_hi, density) for a pairwise sample histogram."""
    H, xe, ye = np.histogram2d(x, y, bins=bins, weights=weights, density=True)
    rows = []
    for i in range(len(xe) - 1):
        for j in range(len(ye) - 1):
            rows.append((xe[i], xe[i + 1], ye[j], ye[j + 1], H[i, j]))
    return rows

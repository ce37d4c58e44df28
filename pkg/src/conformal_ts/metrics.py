"""Coverage and width metrics over calibrator traces.

All functions accept either a :class:`~conformal_ts.calibrator.Trace` or a raw
``(T, p, d1)`` indicator array where -1 marks unresolved cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, ParameterError


def _indicators(trace):
    cov = getattr(trace, "covered", trace)
    cov = np.asarray(cov)
    if cov.ndim == 2:
        cov = cov[None]
    return cov


def _masked_means(cov, axes):
    resolved = cov >= 0
    hits = np.where(resolved, cov, 0).sum(axis=axes)
    counts = resolved.sum(axis=axes)
    return hits, counts


def global_coverage(trace):
    """Fraction of resolved cells whose realisation fell inside the interval."""
    hits, count = _masked_means(_indicators(trace), None)
    if count == 0:
        raise InsufficientDataError("no resolved cells")
    return float(hits / count)


def mean_width(trace):
    """Mean width over all issued cells, empty intervals counting as 0."""
    width = getattr(trace, "width", trace)
    return float(np.mean(width))


def per_dim_coverage(trace):
    hits, counts = _masked_means(_indicators(trace), (0, 2))
    return hits / np.maximum(counts, 1)


def per_horizon_coverage(trace):
    hits, counts = _masked_means(_indicators(trace), (0, 1))
    return hits / np.maximum(counts, 1)


def min_dim_coverage(trace):
    return float(np.min(per_dim_coverage(trace)))


def min_horizon_coverage(trace):
    return float(np.min(per_horizon_coverage(trace)))


def local_coverage(trace, window=100, sliding=False):
    """Coverage in consecutive windows of resolved steps, per (i, j).

    Disjoint blocks by default (a trailing partial block is dropped); with
    ``sliding=True`` every window start is used.

    Returns
    -------
    dict
        ``{(i, j): ndarray}`` of window coverages.
    """
    if window < 1:
        raise ParameterError("window must be >= 1")
    cov = _indicators(trace)
    _, p, d1 = cov.shape
    out = {}
    for i in range(p):
        for j in range(d1):
            cell = cov[:, i, j]
            x = cell[cell >= 0].astype(np.float64)
            n = x.size // window if not sliding else max(x.size - window + 1, 0)
            if n == 0:
                out[(i, j)] = np.zeros(0)
            elif sliding:
                csum = np.concatenate([[0.0], np.cumsum(x)])
                out[(i, j)] = (csum[window:] - csum[:-window]) / window
            else:
                out[(i, j)] = x[: n * window].reshape(n, window).mean(axis=1)
    return out


def approx_mace(local_cov_series, alpha):
    """Mean absolute gap between window coverages and ``1 - alpha``.

    Examples
    --------
    >>> round(approx_mace([0.88, 0.92], 0.1), 12)
    0.02
    """
    x = np.asarray(local_cov_series, dtype=np.float64)
    if x.size == 0:
        return float("nan")
    return float(np.mean(np.abs(x - (1.0 - alpha))))


def sigma_fit(qstar, qhat):
    """Root mean square of ``qstar - qhat`` over time (per cell if arrays are 3-d)."""
    diff = np.asarray(qstar, dtype=np.float64) - np.asarray(qhat, dtype=np.float64)
    out = np.sqrt(np.mean(diff * diff, axis=0))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class MetricsReport:
    cov: float
    mean_width: float
    min_d: float
    min_t: float
    per_dim_cov: np.ndarray
    per_horizon_cov: np.ndarray
    local_cov: dict = field(repr=False)
    approx_mace_cells: dict = field(repr=False)
    approx_mace: float
    resolved_count: int

    def rows(self):
        """``(metric, value)`` pairs in a fixed order for CSV output."""
        out = [
            ("cov", self.cov),
            ("mean_width", self.mean_width),
            ("min_d", self.min_d),
            ("min_t", self.min_t),
            ("approx_mace", self.approx_mace),
            ("resolved_count", self.resolved_count),
        ]
        out += [(f"cov_dim_{i}", float(v)) for i, v in enumerate(self.per_dim_cov)]
        out += [(f"cov_horizon_{j}", float(v)) for j, v in enumerate(self.per_horizon_cov)]
        return out


def evaluate(trace, alpha, window=100, sliding=False):
    """Compute the full :class:`MetricsReport` for one trace."""
    local = local_coverage(trace, window, sliding)
    cells = {key: approx_mace(series, alpha) for key, series in local.items()}
    finite = [v for v in cells.values() if np.isfinite(v)]
    return MetricsReport(
        cov=global_coverage(trace),
        mean_width=mean_width(trace),
        min_d=min_dim_coverage(trace),
        min_t=min_horizon_coverage(trace),
        per_dim_cov=per_dim_coverage(trace),
        per_horizon_cov=per_horizon_coverage(trace),
        local_cov=local,
        approx_mace_cells=cells,
        approx_mace=float(np.mean(finite)) if finite else float("nan"),
        resolved_count=int(np.sum(_indicators(trace) >= 0)),
    )


def cell_coverage(trace):
    """Per-(i, j) coverage and resolved counts, each ``(p, d1)``."""
    hits, counts = _masked_means(_indicators(trace), 0)
    return hits / np.maximum(counts, 1), counts

"""Online interval calibrators driven one issuance step at a time.

Every calibrator keeps independent state per (variate, horizon) cell and
learns from coverage feedback with the lag imposed by the horizon: the
interval issued at step ``t`` for horizon slot ``j`` (``j + 1`` steps ahead)
is resolved at step ``t + j + 1``, before that step's intervals are issued.

Methods
-------
FFDCI
    ``[yhat - qhat - a, yhat + qhat + a]`` with
    ``a <- a + gamma * (1 - covered - alpha)``.
FFDCI_SFOGD
    Same interval, step size ``gamma / sqrt(sum of squared past gradients)``.
FFDCI_NO_UPDATE
    ``a`` frozen at zero.
FFDCI_NO_FEATURE
    FFDCI with ``qhat`` replaced by the per-cell calibration quantile.
CP
    Fixed half-width: the per-cell calibration quantile.
ACI
    Half-width is the ``1 - level`` empirical quantile of the scores,
    ``level <- clip(level + gamma * (alpha - miss), 0, 1)``.
ECI
    Tracks the half-width ``q`` directly with a sigmoid-smoothed quantile step.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionError, InsufficientDataError, ParameterError, ParseError, ProtocolError
from .quantile_net import _order_index, higher_quantile


class Method(str, Enum):
    FFDCI = "FFDCI"
    FFDCI_SFOGD = "FFDCI_SFOGD"
    ACI = "ACI"
    ECI = "ECI"
    CP = "CP"
    FFDCI_NO_UPDATE = "FFDCI_NO_UPDATE"
    FFDCI_NO_FEATURE = "FFDCI_NO_FEATURE"

    @property
    def uses_qhat(self):
        return self in (Method.FFDCI, Method.FFDCI_SFOGD, Method.FFDCI_NO_UPDATE)

    @property
    def needs_calibration(self):
        return self in (Method.CP, Method.ACI, Method.ECI, Method.FFDCI_NO_FEATURE)

    @property
    def additive(self):
        """True for the methods whose state is an additive width adjustment ``a``."""
        return self in (Method.FFDCI, Method.FFDCI_SFOGD, Method.FFDCI_NO_UPDATE, Method.FFDCI_NO_FEATURE)


# ---------------------------------------------------------------------------
# scalar kernels (all broadcast over numpy arrays)


def build_interval(yhat, qhat, a):
    """Return ``(lo, hi, empty)``; the interval is empty when ``qhat + a <= 0``."""
    half = np.asarray(qhat, dtype=np.float64) + a
    empty = half <= 0.0
    half = np.where(empty, 0.0, half)
    lo = np.where(empty, np.nan, yhat - half)
    hi = np.where(empty, np.nan, yhat + half)
    if lo.ndim == 0:
        return float(lo), float(hi), bool(empty)
    return lo, hi, empty


def ffdci_update(a, covered, gamma, alpha):
    return a + gamma * (1.0 - np.asarray(covered, dtype=np.float64) - alpha)


def sfogd_update(a, covered, gamma, alpha, G):
    """One adaptive-rate step; returns ``(a', G')``."""
    g = 1.0 - np.asarray(covered, dtype=np.float64) - alpha
    G = G + g * g
    return a + gamma / np.sqrt(G) * g, G


def eci_smooth_grad(x, c):
    """Derivative of ``1 / (1 + c exp(-x))``, evaluated without overflow."""
    u = np.asarray(x, dtype=np.float64) - math.log(c)
    # f'(x) = sigma(u) * sigma(-u)
    e = np.exp(-np.abs(u))
    return e / (1.0 + e) ** 2


def eci_update(q, s, gamma, alpha, c):
    x = np.asarray(s, dtype=np.float64) - q
    err = (x > 0).astype(np.float64)
    return q + gamma * (err - alpha - x * eci_smooth_grad(x, c))


def aci_update(level, covered, gamma, alpha):
    miss = 1.0 - np.asarray(covered, dtype=np.float64)
    return np.clip(level + gamma * (alpha - miss), 0.0, 1.0)


def cp_halfwidth(calibration_errors, alpha):
    """Per-cell ``1 - alpha`` calibration quantile (same kernel as the constant model)."""
    return higher_quantile(calibration_errors, 1.0 - alpha, axis=0)


def aci_halfwidth(sorted_scores, level):
    """Empirical ``1 - level`` quantile of presorted ``(n, ...)`` scores, per cell.

    ``level >= 1`` gives 0 (empty interval); ``level <= 0`` gives the largest score.
    """
    n = sorted_scores.shape[0]
    level = np.asarray(level, dtype=np.float64)
    k = np.ceil((1.0 - level) * n - 1e-9).astype(np.int64)
    idx = np.clip(k, 1, n) - 1
    half = np.take_along_axis(sorted_scores, idx[None, ...], axis=0)[0]
    return np.where(level >= 1.0, 0.0, half)


def theorem1_bound(M, gamma, T, j):
    """Coverage deviation bound ``2((M + gamma)/(T gamma) + (j + 1)/T)``."""
    return 2.0 * ((M + gamma) / (T * gamma) + (j + 1) / T)


def mace_bound_rhs(sigma_fit, M, j, T, c_scale=1.0):
    """``c_scale * sqrt(sigma_fit + M (j + 1) / T)``; only its shape is meaningful."""
    if T <= 0:
        raise ParameterError("T must be positive")
    return c_scale * math.sqrt(sigma_fit + M * (j + 1) / T)


# ---------------------------------------------------------------------------
# state machine


@dataclass
class CalibratorConfig:
    method: Method
    p: int
    d1: int
    alpha: float = 0.1
    gamma: float = 0.002
    eci_c: float = 0.2
    qhat_cap: float | None = None
    aci_history: str = "calibration"
    aci_window: int | None = None

    def __post_init__(self):
        self.method = Method(self.method)
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0 or (self.gamma == 0 and self.method is not Method.ACI):
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if self.eci_c <= 0:
            raise ParameterError("eci_c must be positive")
        if self.aci_history not in ("calibration", "online"):
            raise ParameterError("aci_history must be 'calibration' or 'online'")
        if self.p < 1 or self.d1 < 1:
            raise DimensionError("p and d1 must be positive")


@dataclass
class IntervalRecord:
    """Intervals issued at step ``t``; ``covered`` is -1 until resolved."""

    t: int
    yhat: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    empty: np.ndarray
    state: np.ndarray
    covered: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.covered is None:
            self.covered = np.full(self.lo.shape, -1, dtype=np.int8)

    @property
    def width(self):
        return np.where(self.empty, 0.0, self.hi - self.lo)


class Calibrator:
    """Per-(i, j) online calibrator.

    Parameters
    ----------
    config : CalibratorConfig
    calibration_errors : ndarray, shape (n, p, d1), optional
        Absolute errors on the calibration split. Required by CP, ACI, ECI
        and FFDCI_NO_FEATURE.
    """

    def __init__(self, config, calibration_errors=None):
        self.config = config
        p, d1 = config.p, config.d1
        method = config.method
        self.step_index = 0
        self.pending = deque(maxlen=d1)
        self.a = np.zeros((p, d1))
        self.G = np.zeros((p, d1))
        self.level = np.full((p, d1), config.alpha)
        self.q = np.zeros((p, d1))
        self.const_q = None
        self._sorted = None
        self._history = None
        if method.needs_calibration:
            if calibration_errors is None:
                raise InsufficientDataError(f"{method.value} needs calibration errors")
            cal = np.asarray(calibration_errors, dtype=np.float64)
            if cal.ndim != 3 or cal.shape[1:] != (p, d1):
                raise DimensionError(f"calibration errors shape {cal.shape}, expected (n, {p}, {d1})")
            if cal.shape[0] < 1:
                raise InsufficientDataError("empty calibration set")
            self.const_q = cp_halfwidth(cal, config.alpha)
            self.q = self.const_q.copy()
            if method is Method.ACI:
                self._sorted = np.sort(cal, axis=0)
                if config.aci_history == "online":
                    self._history = [
                        [deque(cal[:, i, j], maxlen=config.aci_window) for j in range(d1)]
                        for i in range(p)
                    ]

    @property
    def state(self):
        """Current per-cell state: ``a`` (FFDCI family), ``level`` (ACI), ``q`` (ECI), 0 (CP)."""
        m = self.config.method
        if m.additive:
            return self.a
        if m is Method.ACI:
            return self.level
        if m is Method.ECI:
            return self.q
        return np.zeros_like(self.a)

    def _halfwidth(self, qhat_t):
        cfg = self.config
        m = cfg.method
        if m.uses_qhat:
            if qhat_t is None:
                raise ProtocolError(f"{m.value} needs qhat at every step")
            qhat = np.asarray(qhat_t, dtype=np.float64)
            if qhat.shape != (cfg.p, cfg.d1):
                raise DimensionError(f"qhat has shape {qhat.shape}, expected {(cfg.p, cfg.d1)}")
            if cfg.qhat_cap is not None:
                qhat = np.minimum(qhat, cfg.qhat_cap)
            return qhat, self.a
        if m is Method.FFDCI_NO_FEATURE:
            return self.const_q, self.a
        if m is Method.CP:
            return self.const_q, 0.0
        if m is Method.ECI:
            return np.zeros_like(self.q), self.q
        # ACI
        if self._history is not None:
            half = np.empty_like(self.level)
            for i in range(cfg.p):
                for j in range(cfg.d1):
                    scores = np.fromiter(self._history[i][j], dtype=np.float64)
                    if self.level[i, j] >= 1.0:
                        half[i, j] = 0.0
                    else:
                        half[i, j] = np.sort(scores)[_order_index(1.0 - self.level[i, j], scores.size)]
            return half, 0.0
        return aci_halfwidth(self._sorted, self.level), 0.0

    def _resolve(self, y_now):
        cfg = self.config
        t = self.step_index
        due = [j for j in range(cfg.d1) if t - j - 1 >= 0]
        if not due:
            return
        if y_now is None:
            raise ProtocolError(f"step {t} must resolve {len(due)} horizon(s) but no observation was given")
        y = np.asarray(y_now, dtype=np.float64)
        if y.shape == (cfg.p,):
            y = np.repeat(y[:, None], cfg.d1, axis=1)
        if y.shape != (cfg.p, cfg.d1):
            raise DimensionError(f"y_now has shape {y.shape}, expected ({cfg.p},) or ({cfg.p}, {cfg.d1})")
        m = cfg.method
        for j in due:
            rec = self.pending[-(j + 1)]
            if rec.t != t - j - 1:
                raise ProtocolError(f"pending ring out of sync: expected issuance {t - j - 1}, found {rec.t}")
            yj = y[:, j]
            if not np.all(np.isfinite(yj)):
                raise ProtocolError(f"missing observation for horizon slot {j} at step {t}")
            cov = (~rec.empty[:, j]) & (rec.lo[:, j] <= yj) & (yj <= rec.hi[:, j])
            rec.covered[:, j] = cov
            if m in (Method.FFDCI, Method.FFDCI_NO_FEATURE):
                self.a[:, j] = ffdci_update(self.a[:, j], cov, cfg.gamma, cfg.alpha)
            elif m is Method.FFDCI_SFOGD:
                self.a[:, j], self.G[:, j] = sfogd_update(self.a[:, j], cov, cfg.gamma, cfg.alpha, self.G[:, j])
            elif m is Method.ACI:
                self.level[:, j] = aci_update(self.level[:, j], cov, cfg.gamma, cfg.alpha)
                if self._history is not None:
                    s = np.abs(yj - rec.yhat[:, j])
                    for i in range(cfg.p):
                        self._history[i][j].append(s[i])
            elif m is Method.ECI:
                s = np.abs(yj - rec.yhat[:, j])
                self.q[:, j] = eci_update(self.q[:, j], s, cfg.gamma, cfg.alpha, cfg.eci_c)

    def step(self, yhat_t, qhat_t=None, y_now=None, t=None):
        """Resolve due intervals with ``y_now`` and issue the intervals for this step.

        Parameters
        ----------
        yhat_t : ndarray, shape (p, d1)
        qhat_t : ndarray, shape (p, d1), optional
            Predicted error quantiles; required by FFDCI, FFDCI_SFOGD and
            FFDCI_NO_UPDATE, ignored otherwise.
        y_now : ndarray, shape (p,) or (p, d1), optional
            Realised values arriving at this step. A ``(p,)`` vector is the
            wall-clock observation and resolves every due horizon; a
            ``(p, d1)`` matrix gives, in column ``j``, the realised value for
            the interval issued at ``t - j - 1`` (entries not due are ignored).
        t : int, optional
            Expected step index; a mismatch raises :class:`ProtocolError`.

        Returns
        -------
        IntervalRecord
        """
        cfg = self.config
        if t is not None and t != self.step_index:
            raise ProtocolError(f"step called with t={t}, calibrator is at step {self.step_index}")
        yhat = np.asarray(yhat_t, dtype=np.float64)
        if yhat.shape != (cfg.p, cfg.d1):
            raise DimensionError(f"yhat has shape {yhat.shape}, expected {(cfg.p, cfg.d1)}")
        self._resolve(y_now)
        qhat, a = self._halfwidth(qhat_t)
        lo, hi, empty = build_interval(yhat, qhat, a)
        rec = IntervalRecord(self.step_index, yhat, lo, hi, np.asarray(empty), self.state.copy())
        self.pending.append(rec)
        self.step_index += 1
        return rec


# ---------------------------------------------------------------------------
# whole-stream runs and traces


@dataclass
class Trace:
    """Stacked interval records of one run, each array shaped ``(T, p, d1)``."""

    lo: np.ndarray
    hi: np.ndarray
    empty: np.ndarray
    covered: np.ndarray
    state: np.ndarray
    final_state: np.ndarray | None = None
    method: str = ""

    @property
    def width(self):
        return np.where(self.empty, 0.0, self.hi - self.lo)

    @property
    def shape(self):
        return self.lo.shape

    @property
    def resolved(self):
        return self.covered >= 0

    def to_csv(self, path):
        """One row per (t, i, j) in lexicographic order; unresolved ``covered`` is -1."""
        T, p, d1 = self.shape
        cols = [self.lo.tolist(), self.hi.tolist(), self.width.tolist(),
                self.empty.astype(int).tolist(), self.covered.astype(int).tolist(), self.state.tolist()]
        with open(path, "w", newline="") as fh:
            fh.write("t,i,j,lo,hi,width,empty,covered,a\n")
            for t in range(T):
                for i in range(p):
                    for j in range(d1):
                        lo, hi, w, e, c, a = (col[t][i][j] for col in cols)
                        fh.write(f"{t},{i},{j},{lo!r},{hi!r},{w!r},{e},{c},{a!r}\n")

    @classmethod
    def from_csv(cls, path, method=""):
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "i", "j", "lo", "hi", "width", "empty", "covered", "a"]:
                raise ParseError(f"unexpected trace header {header}", row=1)
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 9:
                    raise ParseError("trace row must have 9 cells", row=lineno)
                try:
                    rows.append([int(row[0]), int(row[1]), int(row[2]), float(row[3]), float(row[4]),
                                 int(row[6]), int(row[7]), float(row[8])])
                except ValueError:
                    raise ParseError("malformed trace cell", row=lineno) from None
        if not rows:
            raise ParseError("trace is empty", row=2)
        arr = np.array(rows, dtype=np.float64)
        T, p, d1 = (int(arr[:, k].max()) + 1 for k in range(3))
        if arr.shape[0] != T * p * d1:
            raise ParseError(f"trace has {arr.shape[0]} rows, expected {T * p * d1}")
        cols = arr.reshape(T, p, d1, 8)
        return cls(
            lo=cols[..., 3].copy(),
            hi=cols[..., 4].copy(),
            empty=cols[..., 5].astype(bool),
            covered=cols[..., 6].astype(np.int8),
            state=cols[..., 7].copy(),
            method=method,
        )


def realized_for_step(targets, t):
    """``(p, d1)`` matrix of values resolved at step ``t``: column ``j`` is ``targets[t - j - 1, :, j]``."""
    _, p, d1 = targets.shape
    out = np.full((p, d1), np.nan)
    for j in range(d1):
        if t - j - 1 >= 0:
            out[:, j] = targets[t - j - 1, :, j]
    return out


def run(calibrator, predictions, targets, qhat=None):
    """Stream a whole panel through ``calibrator`` and collect a :class:`Trace`.

    Cells whose realisation falls after the last step stay unresolved.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise DimensionError(f"predictions {predictions.shape} vs targets {targets.shape}")
    if qhat is not None:
        qhat = np.asarray(qhat, dtype=np.float64)
        if qhat.shape != predictions.shape:
            raise DimensionError(f"qhat {qhat.shape} vs predictions {predictions.shape}")
    T = predictions.shape[0]
    records = []
    for t in range(T):
        records.append(
            calibrator.step(
                predictions[t],
                None if qhat is None else qhat[t],
                realized_for_step(targets, t) if t > 0 else None,
                t=t,
            )
        )
    return Trace(
        lo=np.stack([r.lo for r in records]),
        hi=np.stack([r.hi for r in records]),
        empty=np.stack([r.empty for r in records]),
        covered=np.stack([r.covered for r in records]),
        state=np.stack([r.state for r in records]),
        final_state=calibrator.state.copy(),
        method=calibrator.config.method.value,
    )

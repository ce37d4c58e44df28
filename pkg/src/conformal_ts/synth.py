"""Synthetic forecast panels with analytically known error quantiles.

Errors are half-normal with a feature-driven scale::

    sigma[t, i, j] = base * exp(clip(w . z[t, i], -2, 2))   (* kappa for t >= shift_step)
    s = min(sigma * |N(0, 1)|, M)
    qstar = min(sigma * z_q, M),   z_q = Phi^{-1}(1 - alpha / 2)

so ``qstar`` is the exact ``1 - alpha`` quantile of ``s`` in every cell.
Features follow a stationary Gaussian AR(1) per (i, k) with unit marginal
variance; ``rho = 0`` gives i.i.d. standard normals.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .errors import ParameterError
from .panel import PanelDataset, PanelDims, save_dataset, write_tensor


class Regime(str, Enum):
    STATIONARY = "STATIONARY"
    HETEROSCEDASTIC = "HETEROSCEDASTIC"
    SHIFT = "SHIFT"


def default_weights(d2, norm=0.8):
    """Equal weights with ``|w| = norm``."""
    return np.full(d2, norm / np.sqrt(d2))


@dataclass
class OracleConfig:
    """Generator settings.

    ``w=None`` means zeros under STATIONARY and :func:`default_weights`
    otherwise. ``shift_step=None`` places the SHIFT change point at ``T // 2``.
    """

    dims: PanelDims
    regime: Regime = Regime.STATIONARY
    M: float = 10.0
    w: np.ndarray | None = None
    shift_step: int | None = None
    kappa: float = 2.0
    base: float = 0.1
    rho: float = 0.98
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.regime = Regime(self.regime)
        if self.M <= 0 or self.kappa <= 0 or self.base <= 0:
            raise ParameterError("M, kappa and base must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError("rho must lie in [0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError("alpha must lie in (0, 1)")
        if self.w is None:
            d2 = self.dims.d2
            self.w = np.zeros(d2) if self.regime is Regime.STATIONARY else default_weights(d2)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (self.dims.d2,):
            raise ParameterError(f"w must have length d2={self.dims.d2}")
        if self.shift_step is None:
            self.shift_step = self.dims.T // 2
        if not 0 <= self.shift_step < self.dims.T:
            raise ParameterError("shift_step must lie in [0, T)")

    def manifest(self):
        lines = [
            f"T={self.dims.T}",
            f"p={self.dims.p}",
            f"d1={self.dims.d1}",
            f"d2={self.dims.d2}",
            f"regime={self.regime.value}",
            f"M={self.M!r}",
            "w=" + ",".join(repr(float(v)) for v in self.w),
            f"shift_step={self.shift_step}",
            f"kappa={self.kappa!r}",
            f"base={self.base!r}",
            f"rho={self.rho!r}",
            f"alpha={self.alpha!r}",
            f"seed={self.seed}",
        ]
        return "\n".join(lines) + "\n"


@dataclass
class OraclePanel:
    dataset: PanelDataset
    qstar: np.ndarray
    sigma: np.ndarray
    config: OracleConfig


def half_normal_quantile(level):
    """Quantile of ``|Z|`` at ``level``: ``Phi^{-1}((1 + level) / 2)``."""
    return float(ndtri((1.0 + level) / 2.0))


def _ar1_features(rng, T, p, d2, rho):
    eps = rng.standard_normal((T, p, d2))
    if rho == 0.0:
        return eps
    z = np.empty_like(eps)
    z[0] = eps[0]
    innov = np.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        z[t] = rho * z[t - 1] + innov * eps[t]
    return z


def generate(config):
    """Draw an :class:`OraclePanel`; deterministic in ``config.seed``."""
    T, p, d1, d2 = config.dims.as_tuple()
    rng = np.random.default_rng(config.seed)
    z = _ar1_features(rng, T, p, d2, config.rho)
    scale = config.base * np.exp(np.clip(z @ config.w, -2.0, 2.0))  # (T, p)
    if config.regime is Regime.SHIFT:
        scale[config.shift_step:] *= config.kappa
    sigma = np.repeat(scale[:, :, None], d1, axis=2)
    s = np.minimum(sigma * np.abs(rng.standard_normal((T, p, d1))), config.M)
    sign = np.where(rng.random((T, p, d1)) < 0.5, -1.0, 1.0)
    tt = np.arange(T)[:, None, None] + np.arange(1, d1 + 1)[None, None, :]
    phase = np.linspace(0.0, np.pi, p, endpoint=False)[None, :, None]
    predictions = np.sin(2.0 * np.pi * tt / 48.0 + phase)
    targets = predictions + sign * s
    qstar = np.minimum(sigma * half_normal_quantile(1.0 - config.alpha), config.M)
    return OraclePanel(PanelDataset(predictions, targets, z), qstar, sigma, config)


def oracle_coverage_check(panel, alpha=None, qstar=None):
    """Fraction of cells with ``|yhat - y| <= qstar``.

    ``alpha`` is accepted for symmetry with the calibrators; the check only
    depends on the stored (or supplied) ``qstar``.
    """
    ds = panel.dataset
    q = panel.qstar if qstar is None else qstar
    s = np.abs(ds.predictions - ds.targets)
    return float(np.mean(s <= q))


def write_panel(panel, directory):
    """Write the dataset triple, ``qstar.ctsb`` and ``manifest.txt``; return the manifest path."""
    directory = Path(directory)
    save_dataset(panel.dataset, directory)
    write_tensor(directory / "qstar.ctsb", panel.qstar)
    manifest = directory / "manifest.txt"
    manifest.write_text(panel.config.manifest())
    return manifest


def manifest_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

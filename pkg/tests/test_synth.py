import math

import numpy as np
import pytest

from conformal_ts.errors import ParameterError
from conformal_ts.panel import PanelDims
from conformal_ts.quantile_net import constant_quantile_model
from conformal_ts.synth import (
    OracleConfig,
    Regime,
    generate,
    half_normal_quantile,
    oracle_coverage_check,
)


def _phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _bisect(prob):
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if _phi(mid) < prob else (lo, mid)
    return 0.5 * (lo + hi)


Z90 = _bisect(0.95)


def test_half_normal_quantile_matches_bisection():
    assert half_normal_quantile(0.9) == pytest.approx(Z90, abs=1e-12)
    assert Z90 == pytest.approx(1.6449, abs=1e-4)


def test_unit_scale_qstar():
    cfg = OracleConfig(PanelDims(10, 1, 1, 2), regime="STATIONARY", base=1.0, rho=0.0)
    panel = generate(cfg)
    np.testing.assert_allclose(panel.qstar, Z90, atol=1e-12)


def test_stationary_qstar_is_constant():
    panel = generate(OracleConfig(PanelDims(300, 2, 3, 4), regime="STATIONARY"))
    assert np.ptp(panel.qstar) == 0.0


def test_fixed_sigma_monte_carlo_coverage():
    panel = generate(OracleConfig(PanelDims(12_500, 2, 2, 1), regime="STATIONARY", base=1.0, seed=3))
    assert panel.qstar.size == 50_000
    assert abs(oracle_coverage_check(panel) - 0.9) <= 0.005


def test_oracle_check_band():
    panel = generate(OracleConfig(PanelDims(5000, 3, 4, 4), regime="HETEROSCEDASTIC", seed=1))
    assert abs(oracle_coverage_check(panel, 0.1) - 0.9) <= 0.004


def test_halved_qstar_falls_below_80pct():
    panel = generate(OracleConfig(PanelDims(5000, 3, 4, 4), regime="HETEROSCEDASTIC", seed=2))
    expected = 2 * _phi(Z90 / 2) - 1
    assert expected < 0.6
    assert oracle_coverage_check(panel, qstar=panel.qstar / 2) < 0.8


def test_huge_clip_saturates():
    panel = generate(OracleConfig(PanelDims(100, 2, 2, 2), M=1e6, seed=3))
    assert oracle_coverage_check(panel, qstar=np.full(panel.qstar.shape, 1e6)) == 1.0


def test_errors_are_clipped_at_M():
    panel = generate(OracleConfig(PanelDims(2000, 2, 2, 2), regime="HETEROSCEDASTIC", M=0.2, seed=4))
    s = np.abs(panel.dataset.predictions - panel.dataset.targets)
    assert s.max() <= 0.2 + 1e-12
    assert panel.qstar.max() <= 0.2


def test_generator_is_deterministic():
    cfg = OracleConfig(PanelDims(200, 2, 3, 4), regime="SHIFT", seed=9)
    a, b = generate(cfg), generate(cfg)
    for name in ("predictions", "targets", "features"):
        assert getattr(a.dataset, name).tobytes() == getattr(b.dataset, name).tobytes()
    assert a.qstar.tobytes() == b.qstar.tobytes()


def test_features_have_unit_marginal_variance():
    panel = generate(OracleConfig(PanelDims(40_000, 1, 1, 2), rho=0.9, seed=5))
    z = panel.dataset.features
    assert abs(z.std() - 1.0) < 0.03
    lag1 = np.corrcoef(z[1:, 0, 0], z[:-1, 0, 0])[0, 1]
    assert abs(lag1 - 0.9) < 0.02


def test_shift_drops_constant_interval_coverage():
    T = 8000
    cfg = OracleConfig(PanelDims(T, 2, 2, 4), regime="SHIFT", kappa=2.0, w=np.zeros(4), seed=6)
    panel = generate(cfg)
    ds = panel.dataset
    s = np.abs(ds.predictions - ds.targets)
    qbar = constant_quantile_model(s[: T // 2], 0.1)
    post = (s[T // 2:] <= qbar).mean()
    expected = 2 * _phi(Z90 / 2) - 1
    assert expected == pytest.approx(0.59, abs=0.01)
    assert abs(post - expected) < 0.03


def test_config_validation():
    with pytest.raises(ParameterError):
        OracleConfig(PanelDims(10, 1, 1, 1), M=-1)
    with pytest.raises(ParameterError):
        OracleConfig(PanelDims(10, 1, 1, 1), shift_step=10)
    with pytest.raises(ValueError):
        OracleConfig(PanelDims(10, 1, 1, 1), regime="WEIRD")
    assert OracleConfig(PanelDims(10, 1, 1, 3), regime=Regime.HETEROSCEDASTIC).w.any()

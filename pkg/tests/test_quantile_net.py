import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformal_ts.errors import CheckpointError, DimensionError, InsufficientDataError, ParameterError
from conformal_ts.panel import PanelDataset
from conformal_ts.quantile_net import (
    AlphaMismatchWarning,
    NetConfig,
    QuantileNet,
    backward,
    constant_quantile_model,
    forward,
    load,
    loss,
    pinball_loss,
    save,
    train,
)


def test_pinball_examples():
    assert pinball_loss(2.0, 1.0, 0.1) == pytest.approx(0.9)
    assert pinball_loss(1.0, 1.0, 0.1) == 0.0
    assert pinball_loss(0.0, 2.0, 0.1) == pytest.approx(0.2)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
def test_pinball_rejects_alpha(alpha):
    with pytest.raises(ParameterError):
        pinball_loss(1.0, 1.0, alpha)


finite = st.floats(-100, 100, allow_nan=False)
alphas = st.floats(0.01, 0.99)


@given(finite, finite, alphas)
def test_pinball_nonnegative_zero_iff_equal(s, q, alpha):
    val = pinball_loss(s, q, alpha)
    assert val >= 0
    assert (val == 0) == (s == q)


@given(finite, finite, finite, alphas)
def test_pinball_convex_in_q(s, q1, q2, alpha):
    mid = pinball_loss(s, 0.5 * (q1 + q2), alpha)
    assert mid <= 0.5 * (pinball_loss(s, q1, alpha) + pinball_loss(s, q2, alpha)) + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_pinball_grid_minimizer_near_empirical_quantile(seed):
    rng = np.random.default_rng(seed)
    alpha = 0.1
    s = rng.exponential(size=41)
    grid = np.linspace(0, s.max(), 2001)
    step = grid[1] - grid[0]
    risks = [np.mean(pinball_loss(s, q, alpha)) for q in grid]
    best = grid[int(np.argmin(risks))]
    emp = np.sort(s)[math.ceil(0.9 * 41) - 1]
    assert abs(best - emp) <= step + 1e-12


def _net(sizes, seed=0, alpha=0.1):
    cfg = NetConfig(sizes[0], sizes[-1], hidden_dims=list(sizes[1:-1]), alpha=alpha, seed=seed)
    return QuantileNet.initialize(cfg)


def test_forward_zero_weights_gives_clamped_bias():
    net = _net([3, 4, 2])
    for W in net.weights:
        W[:] = 0
    net.biases[0][:] = 0
    net.biases[-1][:] = [0.7, -0.4]
    assert forward(net, np.array([1.0, -2.0, 3.0])).tolist() == [0.7, 0.0]


def test_forward_hand_computed():
    cfg = NetConfig(2, 2, hidden_dims=[2])
    net = QuantileNet(
        cfg,
        [np.eye(2), np.array([[1.0, 0.0], [1.0, 2.0]])],
        [np.array([0.0, -1.0]), np.array([0.5, 0.0])],
        norm_mean=np.array([1.0, 1.0]),
        norm_std=np.array([2.0, 1.0]),
    )
    # normalised x = [1, 2]; hidden = relu([1, 1]) = [1, 1]; out = [1+1+0.5, 0+2] = [2.5, 2]
    assert forward(net, np.array([3.0, 3.0])).tolist() == [2.5, 2.0]


def _reference_forward(net, z):
    x = [(zi - m) / s for zi, m, s in zip(z, net.norm_mean, net.norm_std)]
    n_layers = len(net.weights)
    for k in range(n_layers):
        W, b = net.weights[k], net.biases[k]
        out = []
        for c in range(W.shape[1]):
            acc = b[c]
            for r in range(W.shape[0]):
                acc += x[r] * W[r, c]
            out.append(max(acc, 0.0) if k < n_layers - 1 else acc)
        x = out
    return np.array([max(v, 0.0) for v in x])


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_reference(seed):
    rng = np.random.default_rng(seed)
    net = _net([5, 7, 6, 3], seed=seed)
    net.norm_mean = rng.normal(size=5)
    net.norm_std = rng.uniform(0.5, 2, size=5)
    for _ in range(5):
        z = rng.normal(size=5)
        np.testing.assert_allclose(forward(net, z), _reference_forward(net, z), atol=1e-12, rtol=0)


def test_forward_batch_shapes_and_errors():
    net = _net([4, 3, 2])
    z = np.random.default_rng(0).normal(size=(6, 5, 4))
    out = forward(net, z)
    assert out.shape == (6, 5, 2)
    assert (out >= 0).all()
    np.testing.assert_allclose(out[2, 3], forward(net, z[2, 3]), rtol=1e-13, atol=1e-15)
    with pytest.raises(DimensionError):
        forward(net, np.zeros(3))


def test_backward_zero_weight_bias_gradient():
    alpha = 0.1
    net = _net([3, 4, 2], alpha=alpha)
    for W in net.weights:
        W[:] = 0
    net.biases[0][:] = 0
    net.biases[-1][:] = [0.5, 2.0]
    grads = backward(net, np.ones((1, 3)), np.array([[1.0, 1.0]]))
    # coordinate 0: s=1 > 0.5 -> -(1-alpha); coordinate 1: s=1 < 2 -> +alpha
    np.testing.assert_allclose(grads[-1], [-(1 - alpha), alpha])


def test_backward_batch_is_mean_of_singles():
    rng = np.random.default_rng(1)
    net = _net([3, 5, 2], seed=1)
    z = rng.normal(size=(2, 3))
    s = rng.exponential(size=(2, 2))
    both = backward(net, z, s)
    singles = [backward(net, z[k:k + 1], s[k:k + 1]) for k in range(2)]
    for g, g0, g1 in zip(both, *singles):
        np.testing.assert_allclose(g, 0.5 * (g0 + g1), atol=1e-15)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    net = _net([3, 6, 4, 2], seed=7)
    z = rng.normal(size=(4, 3))
    q = forward(net, z)
    s = q + rng.choice([-1, 1], size=q.shape) * rng.uniform(0.05, 0.3, size=q.shape)
    grads = backward(net, z, s)
    h = 1e-5
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss(net, z, s)
            p[idx] = old - h
            down = loss(net, z, s)
            p[idx] = old
            assert abs((up - down) / (2 * h) - g[idx]) < 1e-6


def test_constant_quantile_examples():
    s = np.arange(1.0, 11.0)
    assert constant_quantile_model(s, 0.1).item() == 9.0
    assert constant_quantile_model(np.full((7, 2, 3), 4.25), 0.1).tolist() == [[4.25] * 3] * 2


def _normal_quantile_bisect(prob):
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_constant_quantile_half_normal():
    target = _normal_quantile_bisect(0.95)
    assert target == pytest.approx(1.6449, abs=1e-4)
    s = np.abs(np.random.default_rng(1).standard_normal(1000))
    assert abs(constant_quantile_model(s, 0.1).item() - target) < 0.1


def test_constant_quantile_band_holds_for_most_seeds():
    # sampling sd of the 0.9 quantile at n=1000 is about 0.046, so +-0.1 is ~2.2 sd
    target = _normal_quantile_bisect(0.95)
    hits = [
        abs(constant_quantile_model(np.abs(np.random.default_rng(k).standard_normal(1000)), 0.1).item() - target) < 0.1
        for k in range(200)
    ]
    assert np.mean(hits) > 0.94


def _panel(features, errors):
    T, p, d1 = errors.shape
    return PanelDataset(np.zeros((T, p, d1)), errors, features)


def test_train_reduces_heldout_loss():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(400, 2, 3))
    scale = np.exp(0.8 * z[..., :1])
    s = scale * np.abs(rng.normal(size=(400, 2, 2)))
    cfg = NetConfig(3, 2, hidden_dims=[16, 8], max_epochs=40, seed=3)
    net, log = train(_panel(z, s), s, cfg)
    assert log.val_loss[log.best_epoch] < log.val_loss[0]
    assert log.epochs[0] == 0 and len(log.epochs) == len(log.val_loss)


def test_train_constant_target():
    z = np.ones((100, 2, 3))
    s = np.full((100, 2, 2), 3.0)
    net, _ = train(_panel(z, s), s, NetConfig(3, 2, hidden_dims=[8], max_epochs=20, seed=1))
    np.testing.assert_allclose(forward(net, z[0, 0]), 3.0, atol=0.1)


def test_train_is_deterministic():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(60, 2, 3))
    s = np.abs(rng.normal(size=(60, 2, 2)))
    cfg = NetConfig(3, 2, hidden_dims=[8, 4], max_epochs=8, seed=11)
    net_a, log_a = train(_panel(z, s), s, cfg)
    net_b, log_b = train(_panel(z, s), s, cfg)
    assert log_a == log_b
    assert all(np.array_equal(a, b) for a, b in zip(net_a.params, net_b.params))


def test_train_needs_ten_rows():
    z = np.zeros((4, 2, 3))
    s = np.zeros((4, 2, 2))
    with pytest.raises(InsufficientDataError):
        train(_panel(z, s), s, NetConfig(3, 2, hidden_dims=[4]))


def test_netconfig_validation():
    with pytest.raises(ParameterError):
        NetConfig(3, 2, hidden_dims=[])
    with pytest.raises(ParameterError):
        NetConfig(3, 2, split_fraction=1.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    net = _net([4, 6, 3], seed=2)
    net.norm_mean = rng.normal(size=4)
    net.norm_std = rng.uniform(0.1, 3.0, size=4)
    save(net, tmp_path / "ck")
    back = load(tmp_path / "ck")
    z = rng.normal(size=(5, 4))
    assert forward(back, z).tobytes() == forward(net, z).tobytes()


def test_checkpoint_truncated(tmp_path):
    save(_net([4, 6, 3]), tmp_path / "ck")
    w = tmp_path / "ck" / "weights.ctsb"
    w.write_bytes(w.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load(tmp_path / "ck")


def test_checkpoint_version_mismatch(tmp_path):
    save(_net([4, 6, 3]), tmp_path / "ck")
    meta = tmp_path / "ck" / "meta.json"
    meta.write_text(meta.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(CheckpointError, match="version"):
        load(tmp_path / "ck")


def test_checkpoint_alpha_warning(tmp_path):
    save(_net([4, 6, 3], alpha=0.1), tmp_path / "ck")
    with pytest.warns(AlphaMismatchWarning):
        load(tmp_path / "ck", alpha=0.2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load(tmp_path / "ck", alpha=0.1)

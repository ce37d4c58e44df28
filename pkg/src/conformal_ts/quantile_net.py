"""Feature-conditioned predictor of the (1 - alpha) quantile of absolute errors.

A small fully connected ReLU network is shared across variates: each row
``z[t, i, :]`` (length ``d2``) maps to ``d1`` nonnegative quantile estimates,
one per horizon. Training minimises the pinball loss with Adam and early
stopping on a held-out split. Everything is plain numpy so that gradients can
be checked against finite differences and runs are bit-reproducible.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    DimensionError,
    FormatError,
    InsufficientDataError,
    ParameterError,
)
from .panel import read_tensors, write_tensors

FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AlphaMismatchWarning(UserWarning):
    """Checkpoint was trained for a different miscoverage level."""


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha!r}")


@dataclass
class NetConfig:
    input_dim: int
    output_dim: int
    hidden_dims: list = field(default_factory=lambda: [512, 256])
    alpha: float = 0.1
    learning_rate: float = 0.001
    max_epochs: int = 100
    patience: int = 5
    split_fraction: float = 0.8
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        _check_alpha(self.alpha)
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ParameterError("hidden_dims must be a nonempty list of positive widths")
        if not 0.0 < self.split_fraction < 1.0:
            raise ParameterError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ParameterError("input_dim and output_dim must be positive")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ParameterError("batch_size, patience must be >= 1 and max_epochs >= 0")

    @property
    def layer_sizes(self):
        return [self.input_dim, *self.hidden_dims, self.output_dim]


def pinball_loss(s, qhat, alpha):
    """Elementwise pinball loss ``max((1 - alpha)(s - qhat), alpha (qhat - s))``.

    Examples
    --------
    >>> float(pinball_loss(2.0, 1.0, 0.1))
    0.9
    """
    _check_alpha(alpha)
    diff = np.asarray(s, dtype=np.float64) - np.asarray(qhat, dtype=np.float64)
    return np.maximum((1.0 - alpha) * diff, -alpha * diff)


def pinball_grad(s, qhat, alpha):
    """Subgradient of the pinball loss in ``qhat``; the kink takes the ``s > qhat`` branch."""
    return np.where(np.asarray(s) >= np.asarray(qhat), -(1.0 - alpha), alpha)


def higher_quantile(values, level, axis=0):
    """Order statistic number ``ceil(level * n)`` (1-based) along ``axis``.

    Used as the single empirical-quantile kernel for the constant baseline,
    classical split conformal and ACI.
    """
    arr = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    n = arr.shape[axis]
    if n == 0:
        raise InsufficientDataError("empirical quantile of an empty sample")
    return np.take(arr, _order_index(level, n), axis=axis)


def _order_index(level, n):
    # 1e-9 guards against 0.9 * 10 evaluating to 9.000000000000002
    k = int(math.ceil(level * n - 1e-9))
    return min(max(k, 1), n) - 1


def constant_quantile_model(errors, alpha):
    """Per-(i, j) empirical ``1 - alpha`` quantile of errors over time, shape ``(p, d1)``."""
    _check_alpha(alpha)
    s = np.asarray(errors, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None, None]
    if s.shape[0] < 1:
        raise InsufficientDataError("need at least one time step")
    return higher_quantile(s, 1.0 - alpha, axis=0)


class QuantileNet:
    """Fully connected ReLU network with nonnegative outputs.

    Parameters
    ----------
    config : NetConfig
    weights : list of ndarray
        ``weights[k]`` has shape ``(layer_sizes[k], layer_sizes[k + 1])``.
    biases : list of ndarray
    norm_mean, norm_std : ndarray
        Per-input standardisation applied before the first layer.
    """

    def __init__(self, config, weights, biases, norm_mean=None, norm_std=None):
        self.config = config
        sizes = config.layer_sizes
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise DimensionError("number of layers does not match config")
        for k, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise DimensionError(f"layer {k} has shapes {W.shape}, {b.shape}")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        d2 = config.input_dim
        self.norm_mean = np.zeros(d2) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        std = np.ones(d2) if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        self.norm_std = np.where(std > 0, std, 1.0)

    @classmethod
    def initialize(cls, config, rng=None, output_bias=None):
        """Uniform ``+-1/sqrt(fan_in)`` init; ``output_bias`` overrides the last bias."""
        rng = np.random.default_rng(config.seed) if rng is None else rng
        sizes = config.layer_sizes
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            bound = 1.0 / math.sqrt(sizes[k])
            weights.append(rng.uniform(-bound, bound, size=(sizes[k], sizes[k + 1])))
            biases.append(rng.uniform(-bound, bound, size=sizes[k + 1]))
        if output_bias is not None:
            biases[-1] = np.broadcast_to(np.asarray(output_bias, dtype=np.float64), biases[-1].shape).copy()
        return cls(config, weights, biases)

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def normalize(self, z):
        return (z - self.norm_mean) / self.norm_std

    def _forward_cache(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def __call__(self, z):
        return forward(self, z)

    def copy(self):
        return QuantileNet(
            self.config,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.norm_mean.copy(),
            self.norm_std.copy(),
        )


def forward(net, z):
    """Predict error quantiles for feature rows.

    ``z`` may be a single row ``(d2,)`` or any array whose last axis is ``d2``
    (e.g. a ``(T, p, d2)`` feature tensor); the output swaps that axis for ``d1``.
    """
    z = np.asarray(z, dtype=np.float64)
    d2 = net.config.input_dim
    if z.shape[-1:] != (d2,):
        raise DimensionError(f"feature rows must have length {d2}, got shape {z.shape}")
    lead = z.shape[:-1]
    x = net.normalize(z.reshape(-1, d2))
    raw = net._forward_cache(x)[-1]
    return np.maximum(raw, 0.0).reshape(*lead, net.config.output_dim)


def loss(net, z, s):
    """Mean over rows of the summed per-horizon pinball loss (the training objective)."""
    q = forward(net, z)
    return float(np.mean(np.sum(pinball_loss(s, q, net.config.alpha), axis=-1)))


def backward(net, z, s):
    """Gradients of :func:`loss` for a batch of rows.

    Parameters
    ----------
    z : ndarray, shape (n, d2)
    s : ndarray, shape (n, d1)

    Returns
    -------
    list of ndarray
        ``[dW_0, db_0, dW_1, db_1, ...]`` matching :attr:`QuantileNet.params`.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    n = z.shape[0]
    if n == 0:
        raise InsufficientDataError("empty batch")
    if s.shape != (n, net.config.output_dim):
        raise DimensionError(f"s has shape {s.shape}, expected {(n, net.config.output_dim)}")
    acts = net._forward_cache(net.normalize(z))
    raw = acts[-1]
    q = np.maximum(raw, 0.0)
    # clamp passes gradient for raw >= 0
    delta = pinball_grad(s, q, net.config.alpha) * (raw >= 0.0) / n
    grads = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k].T) * (acts[k] > 0.0)
    return grads


@dataclass
class TrainLog:
    """Per-epoch losses; epoch 0 is the untrained network.

    Losses are mean elementwise pinball losses (training objective / d1).
    """

    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    optimizer: dict = field(
        default_factory=lambda: {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS}
    )

    def record(self, epoch, train, val):
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.val_loss.append(val)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for e, tr, va in zip(self.epochs, self.train_loss, self.val_loss):
                fh.write(f"{e},{tr!r},{va!r}\n")


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def _panel_rows(features, errors):
    features = np.asarray(features, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if features.shape[:-1] != errors.shape[:-1]:
        raise DimensionError(f"features {features.shape} and errors {errors.shape} disagree")
    return features.reshape(-1, features.shape[-1]), errors.reshape(-1, errors.shape[-1])


def train(ds, errors, config):
    """Fit a :class:`QuantileNet` on the ``T * p`` rows ``(z[t, i], s[t, i])``.

    Rows are split 80/20 (``config.split_fraction``) by a seeded permutation.
    The held-out pinball loss drives early stopping and the returned network
    carries the parameters of the best held-out epoch.

    Parameters
    ----------
    ds : PanelDataset or ndarray
        Dataset (its ``features`` are used) or a raw ``(T, p, d2)`` feature array.
    errors : ndarray, shape (T, p, d1)
    config : NetConfig

    Returns
    -------
    net : QuantileNet
    log : TrainLog
    """
    features = getattr(ds, "features", ds)
    z, s = _panel_rows(features, errors)
    if z.shape[1] != config.input_dim or s.shape[1] != config.output_dim:
        raise DimensionError("data widths do not match config input_dim/output_dim")
    n = z.shape[0]
    if n < 10:
        raise InsufficientDataError(f"need at least 10 rows to train, got {n}")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_train = min(max(int(round(config.split_fraction * n)), 1), n - 1)
    tr_idx, va_idx = perm[:n_train], perm[n_train:]
    z_tr, s_tr, z_va, s_va = z[tr_idx], s[tr_idx], z[va_idx], s[va_idx]

    net = QuantileNet.initialize(
        config, rng, output_bias=higher_quantile(s_tr, 1.0 - config.alpha, axis=0)
    )
    net.norm_mean = z_tr.mean(axis=0)
    std = z_tr.std(axis=0)
    net.norm_std = np.where(std > 0, std, 1.0)

    d1 = config.output_dim
    log = TrainLog()
    best_val = loss(net, z_va, s_va) / d1
    log.record(0, loss(net, z_tr, s_tr) / d1, best_val)
    best = net.copy()
    opt = _Adam(net.params, config.learning_rate)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, config.batch_size):
            batch = order[start:start + config.batch_size]
            opt.step(net.params, backward(net, z_tr[batch], s_tr[batch]))
        val = loss(net, z_va, s_va) / d1
        log.record(epoch, loss(net, z_tr, s_tr) / d1, val)
        if val < best_val:
            best_val, best, stale = val, net.copy(), 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                log.stopped_early = True
                break
    return best, log


# ---------------------------------------------------------------------------
# checkpoints


def save(net, path):
    """Write ``meta.json`` and ``weights.ctsb`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = [net.norm_mean, net.norm_std, *net.params]
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(net.config),
        "tensor_shapes": [list(t.shape) for t in tensors],
    }
    write_tensors(path / "weights.ctsb", tensors)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load(path, alpha=None):
    """Restore a network saved by :func:`save`.

    If ``alpha`` is given and differs from the checkpoint's, an
    :class:`AlphaMismatchWarning` is issued.
    """
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no meta.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"meta.json is not valid JSON: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    try:
        config = NetConfig(**meta["config"])
        tensors = read_tensors(path / "weights.ctsb")
    except (FormatError, FileNotFoundError, TypeError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    shapes = [list(t.shape) for t in tensors]
    if shapes != meta.get("tensor_shapes"):
        raise CheckpointError(f"weight shapes {shapes} disagree with metadata")
    params = tensors[2:]
    try:
        net = QuantileNet(config, params[0::2], params[1::2], tensors[0], tensors[1])
    except DimensionError as exc:
        raise CheckpointError(str(exc)) from None
    if alpha is not None and alpha != config.alpha:
        warnings.warn(
            f"checkpoint trained for alpha={config.alpha}, calibrating at alpha={alpha}",
            AlphaMismatchWarning,
            stacklevel=2,
        )
    return net

"""Batch front end: ``synth``, ``fit``, ``calibrate``, ``report``, ``ablate``.

Settings come from a flat ``key=value`` file (``--config``) with ``#``
comments, and any key may be overridden on the command line as
``--key value``. Every command writes ``resolved_config.txt`` to ``--out``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 internal failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import quantile_net
from .calibrator import Calibrator, CalibratorConfig, Method, Trace, run, theorem1_bound
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    FormatError,
    InsufficientDataError,
    ParameterError,
    ParseError,
    ValidationError,
)
from .metrics import cell_coverage, evaluate, sigma_fit
from .panel import PanelDims, compute_errors, load_dataset, read_tensor
from .quantile_net import NetConfig
from .synth import OracleConfig, Regime, generate, write_panel

DEFAULTS = {
    "dataset": "",
    "out": "out",
    "seed": "0",
    # synthetic panels
    "regime": "STATIONARY",
    "T": "2000",
    "p": "4",
    "d1": "4",
    "d2": "8",
    "M": "10.0",
    "base": "0.1",
    "kappa": "2.0",
    "shift_step": "",
    "rho": "0.98",
    # quantile network
    "hidden_dims": "512,256",
    "learning_rate": "0.001",
    "max_epochs": "100",
    "patience": "5",
    "split_fraction": "0.8",
    "batch_size": "256",
    "checkpoint": "",
    # calibration
    "methods": "FFDCI,CP,ACI,ECI",
    "alpha": "0.1",
    "gamma": "0.002",
    "eci_c": "0.2",
    "calib_fraction": "0.5",
    "qhat_cap": "",
    "aci_history": "calibration",
    "aci_window": "",
    # reporting
    "window": "100",
    "sliding": "false",
    "svg": "false",
}

ABLATION_METHODS = (Method.FFDCI, Method.FFDCI_NO_UPDATE, Method.FFDCI_NO_FEATURE)
AUDITED = (Method.FFDCI, Method.FFDCI_NO_FEATURE)


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def parse_overrides(tokens):
    values = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"--{key} needs a value")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    return values


class RunConfig:
    """Typed view over the resolved string settings."""

    def __init__(self, values):
        self.raw = dict(DEFAULTS)
        self.raw.update(values)
        try:
            self._parse()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from None

    def _parse(self):
        r = self.raw
        self.out = Path(r["out"])
        self.dataset = Path(r["dataset"]) if r["dataset"] else self.out
        self.checkpoint = Path(r["checkpoint"]) if r["checkpoint"] else self.out / "checkpoint"
        self.seed = int(r["seed"])
        try:
            self.regime = Regime(r["regime"].upper())
        except ValueError:
            raise ConfigError(f"unknown regime {r['regime']!r}; choose from "
                              + ", ".join(x.value for x in Regime)) from None
        self.T, self.p, self.d1, self.d2 = (int(r[k]) for k in ("T", "p", "d1", "d2"))
        self.M = float(r["M"])
        self.base = float(r["base"])
        self.kappa = float(r["kappa"])
        self.shift_step = int(r["shift_step"]) if r["shift_step"] else None
        self.rho = float(r["rho"])
        self.hidden_dims = [int(x) for x in r["hidden_dims"].split(",") if x.strip()]
        self.learning_rate = float(r["learning_rate"])
        self.max_epochs = int(r["max_epochs"])
        self.patience = int(r["patience"])
        self.split_fraction = float(r["split_fraction"])
        self.batch_size = int(r["batch_size"])
        try:
            self.methods = [Method(m.strip().upper()) for m in r["methods"].split(",") if m.strip()]
        except ValueError:
            raise ConfigError(f"unknown method in {r['methods']!r}") from None
        if not self.methods:
            raise ConfigError("methods is empty")
        self.alpha = float(r["alpha"])
        self.gamma = float(r["gamma"])
        self.eci_c = float(r["eci_c"])
        self.calib_fraction = float(r["calib_fraction"])
        if not 0.0 < self.calib_fraction < 1.0:
            raise ConfigError("calib_fraction must lie in (0, 1)")
        self.qhat_cap = float(r["qhat_cap"]) if r["qhat_cap"] else None
        self.aci_history = r["aci_history"]
        self.aci_window = int(r["aci_window"]) if r["aci_window"] else None
        self.window = int(r["window"])
        self.sliding = _parse_bool(r["sliding"])
        self.svg = _parse_bool(r["svg"])

    def write_resolved(self):
        self.out.mkdir(parents=True, exist_ok=True)
        lines = [f"{k}={self.raw[k]}" for k in DEFAULTS]
        (self.out / "resolved_config.txt").write_text("\n".join(lines) + "\n")

    def net_config(self):
        return NetConfig(
            input_dim=self.d2,
            output_dim=self.d1,
            hidden_dims=self.hidden_dims,
            alpha=self.alpha,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            split_fraction=self.split_fraction,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def calibrator_config(self, method, p, d1):
        return CalibratorConfig(
            method=method, p=p, d1=d1, alpha=self.alpha, gamma=self.gamma, eci_c=self.eci_c,
            qhat_cap=self.qhat_cap, aci_history=self.aci_history, aci_window=self.aci_window,
        )


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _threads():
    env = os.environ.get("CONFORMAL_TS_THREADS", "")
    try:
        n = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"CONFORMAL_TS_THREADS must be an integer, got {env!r}") from None
    return max(n, 1)


def _split(cfg, ds):
    T = ds.dims.T
    n_cal = int(round(cfg.calib_fraction * T))
    if n_cal < 1 or n_cal >= T:
        raise InsufficientDataError(f"calibration split of {n_cal} steps out of {T}")
    return n_cal, ds.slice(0, n_cal), ds.slice(n_cal, T)


def _load_net(cfg, required):
    if not (cfg.checkpoint / "meta.json").is_file():
        if required:
            raise ConfigError(f"no checkpoint at {cfg.checkpoint}; run `fit` first or set checkpoint=")
        return None
    return quantile_net.load(cfg.checkpoint, alpha=cfg.alpha)


def _run_methods(cfg, methods, cal, test):
    needs_net = any(m.uses_qhat for m in methods)
    net = _load_net(cfg, required=needs_net)
    qhat = quantile_net.forward(net, test.features) if needs_net else None
    cal_errors = compute_errors(cal)
    _, p, d1, _ = test.dims.as_tuple()

    def one(method):
        calib = Calibrator(cfg.calibrator_config(method, p, d1), cal_errors)
        return run(calib, test.predictions, test.targets, qhat if method.uses_qhat else None)

    with ThreadPoolExecutor(max_workers=min(_threads(), len(methods))) as pool:
        traces = list(pool.map(one, methods))
    return dict(zip(methods, traces))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    oc = OracleConfig(
        dims=PanelDims(cfg.T, cfg.p, cfg.d1, cfg.d2),
        regime=cfg.regime,
        M=cfg.M,
        shift_step=cfg.shift_step,
        kappa=cfg.kappa,
        base=cfg.base,
        rho=cfg.rho,
        alpha=cfg.alpha,
        seed=cfg.seed,
    )
    manifest = write_panel(generate(oc), cfg.out)
    print(manifest)
    return manifest


def cmd_fit(cfg):
    ds = load_dataset(cfg.dataset)
    _, cal, _ = _split(cfg, ds)
    net, log = quantile_net.train(cal, compute_errors(cal), cfg.net_config())
    quantile_net.save(net, cfg.checkpoint)
    log.to_csv(cfg.out / "train_log.csv")
    print(f"best epoch {log.best_epoch}: held-out loss {log.val_loss[log.best_epoch]!r}")
    return cfg.checkpoint


def cmd_calibrate(cfg):
    ds = load_dataset(cfg.dataset)
    _, cal, test = _split(cfg, ds)
    traces = _run_methods(cfg, cfg.methods, cal, test)
    paths = []
    for method, trace in traces.items():
        path = cfg.out / f"trace_{method.value}.csv"
        trace.to_csv(path)
        paths.append(path)
    return paths


def cmd_report(cfg):
    ds = load_dataset(cfg.dataset)
    n_cal, cal, test = _split(cfg, ds)
    qstar_path = cfg.dataset / "qstar.ctsb"
    qstar = read_tensor(qstar_path)[n_cal:] if qstar_path.is_file() else None
    if qstar is not None and qstar.shape != test.predictions.shape:
        raise DimensionError(f"qstar shape {qstar.shape} does not match test segment")
    net = None
    if qstar is not None and any(m.uses_qhat for m in cfg.methods):
        net = _load_net(cfg, required=False)
    qbar = quantile_net.constant_quantile_model(compute_errors(cal), cfg.alpha)

    rows = []
    local_series = {}
    for method in cfg.methods:
        path = cfg.out / f"trace_{method.value}.csv"
        if not path.is_file():
            raise FileNotFoundError(f"missing trace {path}; run `calibrate` first")
        trace = Trace.from_csv(path, method.value)
        if trace.shape != test.predictions.shape:
            raise DimensionError(f"trace {path} has shape {trace.shape}, test segment {test.predictions.shape}")
        rep = evaluate(trace, cfg.alpha, cfg.window, cfg.sliding)
        rows += [(method.value, name, value) for name, value in rep.rows()]
        _write_local_cov(cfg.out / f"local_cov_{method.value}.csv", rep.local_cov)
        local_series[method.value] = rep.local_cov
        if qstar is None:
            continue
        qhat = None
        if method.uses_qhat and net is not None:
            qhat = quantile_net.forward(net, test.features)
        elif method in (Method.CP, Method.FFDCI_NO_FEATURE):
            qhat = np.broadcast_to(qbar, qstar.shape)
        if qhat is not None:
            rows.append((method.value, "sigma_fit", float(np.mean(sigma_fit(qstar, qhat)))))
        if method in AUDITED:
            ok = _write_audit(cfg, cfg.out / f"audit_{method.value}.csv", trace)
            rows.append((method.value, "theorem1_audit", "PASS" if ok else "FAIL"))

    with open(cfg.out / "report.csv", "w") as fh:
        fh.write("method,metric,value\n")
        for method, name, value in rows:
            fh.write(f"{method},{name},{value if isinstance(value, str) else repr(float(value))}\n")
    if cfg.svg:
        _write_svg(cfg.out / "local_coverage.svg", local_series, 1.0 - cfg.alpha)
    return cfg.out / "report.csv"


def cmd_ablate(cfg):
    ds = load_dataset(cfg.dataset)
    _, cal, test = _split(cfg, ds)
    traces = _run_methods(cfg, list(ABLATION_METHODS), cal, test)
    reports = {m: evaluate(tr, cfg.alpha, cfg.window, cfg.sliding) for m, tr in traces.items()}
    ref = reports[Method.FFDCI]
    path = cfg.out / "ablation.csv"
    with open(path, "w") as fh:
        fh.write("method,cov,mean_width,min_d,min_t,coverage_loss_pct,width_loss_pct\n")
        for m in ABLATION_METHODS:
            r = reports[m]
            cov_loss = 100.0 * (ref.cov - r.cov)
            width_loss = 100.0 * (r.mean_width - ref.mean_width) / ref.mean_width
            fh.write(f"{m.value},{r.cov!r},{r.mean_width!r},{r.min_d!r},{r.min_t!r},"
                     f"{cov_loss!r},{width_loss!r}\n")
    print(path.read_text(), end="")
    return path


def _write_local_cov(path, local):
    keys = sorted(local)
    n = max((local[k].size for k in keys), default=0)
    with open(path, "w") as fh:
        fh.write("window," + ",".join(f"cell_{i}_{j}" for i, j in keys) + "\n")
        for w in range(n):
            cells = [repr(float(local[k][w])) if w < local[k].size else "" for k in keys]
            fh.write(f"{w}," + ",".join(cells) + "\n")


def _write_audit(cfg, path, trace):
    """Per-cell coverage deviation vs the coverage bound, plus the ``a`` range check."""
    cov, counts = cell_coverage(trace)
    T = trace.shape[0]
    g = cfg.gamma
    states = trace.state if trace.final_state is None else np.concatenate([trace.state, trace.final_state[None]])
    a_min, a_max = states.min(axis=0), states.max(axis=0)
    all_ok = True
    with open(path, "w") as fh:
        fh.write("i,j,resolved,coverage,deviation,bound,coverage_status,a_min,a_max,a_status\n")
        for i in range(cov.shape[0]):
            for j in range(cov.shape[1]):
                dev = abs(cov[i, j] - (1.0 - cfg.alpha))
                bound = theorem1_bound(cfg.M, g, T, j + 1)
                c_ok = bool(dev <= bound)
                a_ok = bool(-cfg.M - g <= a_min[i, j] and a_max[i, j] <= cfg.M + g)
                all_ok &= c_ok and a_ok
                fh.write(
                    f"{i},{j},{int(counts[i, j])},{float(cov[i, j])!r},{float(dev)!r},{bound!r},"
                    f"{'PASS' if c_ok else 'FAIL'},{float(a_min[i, j])!r},{float(a_max[i, j])!r},"
                    f"{'PASS' if a_ok else 'FAIL'}\n"
                )
    return all_ok


def _write_svg(path, series_by_method, target, width=640, height=320):
    """Mean local coverage across cells, one polyline per method."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    curves = {}
    for name, local in series_by_method.items():
        n = min((s.size for s in local.values()), default=0)
        if n:
            curves[name] = np.mean([s[:n] for s in local.values()], axis=0)
    pad = 40
    n_max = max((c.size for c in curves.values()), default=1)

    def xy(k, v):
        x = pad + (width - 2 * pad) * (k / max(n_max - 1, 1))
        y = height - pad - (height - 2 * pad) * v
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polyline points="{xy(0, target)} {xy(n_max - 1, target)}" stroke="gray" '
        'stroke-dasharray="4 4" fill="none"/>',
        f'<text x="{pad}" y="{pad - 10}" font-size="12">local coverage (target {target:g})</text>',
    ]
    for k, (name, curve) in enumerate(curves.items()):
        color = colors[k % len(colors)]
        pts = " ".join(xy(w, v) for w, v in enumerate(curve))
        parts.append(f'<polyline points="{pts}" stroke="{color}" fill="none"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 14 * k}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def build_config(config_path, overrides):
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    values.update(parse_overrides(overrides))
    return RunConfig(values)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="conformal-ts", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key=value settings file")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        cfg = build_config(args.config, rest)
        cfg.write_resolved()
        COMMANDS[args.command](cfg)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ParseError, FileNotFoundError, DimensionError, ValidationError,
            CheckpointError, InsufficientDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

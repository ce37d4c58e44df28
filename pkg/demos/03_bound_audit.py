"""
Checking the coverage guarantee by hand
=======================================

The adjustment ``a`` moves by at most ``gamma`` per step and stays inside
``[-M - gamma, M + gamma]`` when the errors and the predicted quantiles are
bounded by ``M``. From that, the coverage gap of every (series, horizon) cell
shrinks like ``1 / (T gamma)``. Here we watch both facts on a stationary panel
and then drive the same audit through the command-line front end.
"""

import tempfile
from pathlib import Path

import numpy as np

from conformal_ts import Calibrator, CalibratorConfig, OracleConfig, PanelDims, generate, run
from conformal_ts.calibrator import theorem1_bound
from conformal_ts.cli import main
from conformal_ts.metrics import cell_coverage

M, gamma, alpha = 10.0, 0.002, 0.1
p, d1 = 2, 3

# A deliberately bad quantile model: always half the true quantile. The update
# has to do all the work.
for T in (1_000, 10_000, 40_000):
    panel = generate(OracleConfig(PanelDims(T, p, d1, 4), regime="STATIONARY", M=M, seed=5))
    ds = panel.dataset
    qhat = 0.5 * panel.qstar
    tr = run(Calibrator(CalibratorConfig("FFDCI", p, d1, gamma=gamma, qhat_cap=M)),
             ds.predictions, ds.targets, qhat)
    cov, _ = cell_coverage(tr)
    gap = np.abs(cov - (1 - alpha)).max()
    bound = theorem1_bound(M, gamma, T, d1)
    a_all = np.concatenate([tr.state, tr.final_state[None]])
    print(f"T={T:6d}  worst cell gap {gap:.4f}  bound {bound:8.4f}  a in [{a_all.min():+.4f}, {a_all.max():+.4f}]")

# The bound is loose at these sizes (it needs T * gamma >> M), but the
# empirical gap shrinks as it predicts. With a larger step the gap closes
# faster at the price of jumpier widths.
panel = generate(OracleConfig(PanelDims(10_000, p, d1, 4), regime="STATIONARY", M=M, seed=5))
for g in (0.0005, 0.002, 0.02):
    tr = run(Calibrator(CalibratorConfig("FFDCI", p, d1, gamma=g)),
             panel.dataset.predictions, panel.dataset.targets, 0.5 * panel.qstar)
    cov, _ = cell_coverage(tr)
    print(f"gamma={g:<7g} worst cell gap {np.abs(cov - 0.9).max():.4f}  width sd {tr.width.std():.4f}")

# Same audit via the CLI: synth -> fit -> calibrate -> report.
with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    common = ["--out", str(out), "--T", "4000", "--p", "2", "--d1", "3", "--d2", "4",
              "--hidden_dims", "32,16", "--max_epochs", "20", "--methods", "FFDCI,CP", "--qhat_cap", "10"]
    for cmd in ("synth", "fit", "calibrate", "report"):
        assert main([cmd, *common]) == 0
    print()
    print((out / "audit_FFDCI.csv").read_text())
    print("\n".join(ln for ln in (out / "report.csv").read_text().splitlines() if "FFDCI" in ln))

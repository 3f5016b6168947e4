"""Static figures for estimate reports (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def reference_scatter(predicted, reference, stderr=None, path="scatter.png", units="kT"):
    """Predicted vs reference free energies with a y = x guide."""
    p = np.asarray(predicted, dtype=float)
    r = np.asarray(reference, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.errorbar(r, p, yerr=None if stderr is None else 2 * np.asarray(stderr), fmt="o",
                ms=4, capsize=2, color="tab:blue")
    lo = float(min(p.min(), r.min()))
    hi = float(max(p.max(), r.max()))
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", lw=0.8)
    mae = float(np.mean(np.abs(p - r)))
    ax.set_xlabel(f"reference F [{units}]")
    ax.set_ylabel(f"estimated F [{units}]")
    ax.set_title(f"MAE = {mae:.3f} {units}")
    return _save(fig, path)


def ess_error_panel(ess, error, path="ess_error.png"):
    """Absolute estimation error against harmonic-mean ESS (log x axis)."""
    ess = np.asarray(ess, dtype=float)
    err = np.abs(np.asarray(error, dtype=float))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(ess, err, s=14, color="tab:red")
    ax.set_xscale("log")
    ax.set_xlabel("harmonic-mean ESS")
    ax.set_ylabel("|error| [kT]")
    return _save(fig, path)


def training_curve(history, path="training.png"):
    """Train loss and validation NLL per epoch."""
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [h["train_loss"] for h in history], label="train loss")
    ax.plot(ep, [h["val_nll"] for h in history], label="val NLL / atom")
    ax.set_xlabel("epoch")
    ax.legend()
    return _save(fig, path)

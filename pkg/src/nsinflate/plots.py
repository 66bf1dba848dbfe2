"""Optional matplotlib figures for the CLI ``--plot`` flag."""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def sweep_figure(table):
    """log2(|B1| - |B2|) against N with the fitted line, and log2 |B2|/|B1|."""
    plt = _pyplot()
    N = np.array([r.N for r in table.rows], dtype=float)
    lower = np.array([r.lower for r in table.rows])
    ratio = np.array([r.ratio_log2 for r in table.rows])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(N, lower, "o", label="measured")
    b = np.mean(lower - table.slope * N)
    ax1.plot(N, table.slope * N + b, "-", label=f"fit slope {table.slope:.5f}")
    ax1.plot(N, table.expected * N + np.mean(lower - table.expected * N), "--", label=f"rate {table.expected:.5f}")
    ax1.set_xlabel("N")
    ax1.set_ylabel("log2(|B1| - |B2|)")
    ax1.legend(fontsize=8)
    ax2.plot(N, ratio, "s-")
    ax2.set_xlabel("N")
    ax2.set_ylabel("log2 |B2|/|B1|")
    fig.suptitle(f"{table.regime}, p = {table.p}, k0 = {table.k0}")
    fig.tight_layout()
    return fig


def probe_figure(report):
    """Time histories of the U1 probe norm and the U2 and a1 block norms."""
    plt = _pyplot()
    hist = report.history
    t = np.array([r["t"] for r in hist])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(t, [r["U1_probe"] for r in hist], label="U1 probe")
    ax1.plot(t, [r["U2_mean"] for r in hist], label="U2 mean mode")
    ax1.set_xlabel("t")
    ax1.legend(fontsize=8)
    for key in sorted(k for k in hist[0] if k.startswith("U2_j")):
        v = np.array([r[key] for r in hist])
        if np.any(v > 0):
            ax2.semilogy(t[v > 0], v[v > 0], label=key[3:])
    ax2.set_xlabel("t")
    ax2.set_ylabel("block norms of U2")
    ax2.legend(fontsize=7, ncol=2)
    fig.suptitle(f"{report.regime}, N = {report.N}, k0 = {report.k0}, M = {report.spec.M}")
    fig.tight_layout()
    return fig

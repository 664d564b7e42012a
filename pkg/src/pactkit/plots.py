"""Figure rendering for study outputs. All figures are written to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["plot_fwhm_vs_x", "plot_profiles", "plot_shell_metrics"]

_METHOD_STYLE = {
    "rect": dict(color="#d62728", marker="o"),
    "compensated": dict(color="#1f77b4", marker="s"),
    "oracle-kernel": dict(color="#2ca02c", marker="^"),
    "point": dict(color="#7f7f7f", marker="d"),
}


def _style(method: str) -> dict:
    return _METHOD_STYLE.get(method, dict(marker="x"))


def plot_fwhm_vs_x(rows, out_path, title: str = "") -> None:
    """FWHM against sphere x-position, one line per method.

    rows: iterables/dicts with keys method, x_mm, blur_fwhm.
    """
    methods: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        methods.setdefault(row["method"], []).append((row["x_mm"], row["blur_fwhm"]))
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for method, pts in sorted(methods.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                label=method, **_style(method))
    ax.set_xlabel("sphere x position (mm)")
    ax.set_ylabel("blur FWHM (mm)")
    ax.set_ylim(bottom=0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_profiles(rows, out_path, title: str = "") -> None:
    """Reconstructed y-profiles, one panel per sphere position.

    rows: dicts with keys method, x_mm, y_mm, value.
    """
    panels: dict[float, dict[str, list[tuple[float, float]]]] = {}
    for row in rows:
        panels.setdefault(row["x_mm"], {}).setdefault(row["method"], []).append(
            (row["y_mm"], row["value"])
        )
    xs = sorted(panels)
    n = len(xs)
    cols = min(3, n) or 1
    rows_n = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows_n, cols, figsize=(3.4 * cols, 2.8 * rows_n),
                             squeeze=False, sharex=True)
    for i, x_mm in enumerate(xs):
        ax = axes[i // cols][i % cols]
        for method, pts in sorted(panels[x_mm].items()):
            pts.sort()
            ys = [p[0] for p in pts]
            vs = [p[1] for p in pts]
            peak = max((abs(v) for v in vs), default=1.0) or 1.0
            ax.plot(ys, [v / peak for v in vs], label=method,
                    color=_style(method).get("color"))
        ax.set_title(f"x = {x_mm:g} mm", fontsize=9)
        ax.grid(True, alpha=0.3)
    for i in range(n, rows_n * cols):
        axes[i // cols][i % cols].axis("off")
    axes[0][0].legend(fontsize=7)
    fig.supxlabel("y (mm)")
    fig.supylabel("normalized amplitude")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_shell_metrics(rows, out_path, title: str = "") -> None:
    """Grouped bars of RSE and NCC per shell and method.

    rows: dicts with keys shell, method, rse, ncc.
    """
    shells = sorted({r["shell"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    fig, (ax_rse, ax_ncc) = plt.subplots(1, 2, figsize=(8.0, 3.6))
    width = 0.8 / max(len(methods), 1)
    for j, method in enumerate(methods):
        vals = {r["shell"]: r for r in rows if r["method"] == method}
        pos = [i + j * width for i in range(len(shells))]
        color = _style(method).get("color")
        ax_rse.bar(pos, [vals[s]["rse"] if s in vals else 0 for s in shells],
                   width=width, label=method, color=color)
        ax_ncc.bar(pos, [vals[s]["ncc"] if s in vals else 0 for s in shells],
                   width=width, label=method, color=color)
    for ax, name in ((ax_rse, "RSE"), (ax_ncc, "NCC")):
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(shells))])
        ax.set_xticklabels(shells, fontsize=8)
        ax.set_ylabel(name)
        ax.grid(True, axis="y", alpha=0.3)
    ax_rse.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)

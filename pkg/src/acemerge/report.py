"""Render merge reports to CSV and diagnostic figures.

Consumes the JSON report emitted by ``merge_model`` / the ``merge``
subcommand.  matplotlib is imported lazily so the merge and verify paths
never pay for a plotting stack.
"""

from __future__ import annotations

import csv
import os

CSV_COLUMNS = [
    "layer",
    "gamma",
    "branch",
    "k",
    "sigma_iso",
    "pre_condition_number",
    "final_condition_number",
    "energy_top5pct_pre",
    "energy_top5pct_final",
    "alignment_top1",
    "fallback",
]


def write_layers_csv(report: dict, path) -> None:
    """Write one row per merged layer with the report's diagnostic fields."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for name in sorted(report.get("layers", {})):
            diag = report["layers"][name]
            alignment = diag.get("principal_alignment") or []
            writer.writerow(
                [
                    name,
                    diag.get("gamma"),
                    diag.get("branch"),
                    diag.get("k"),
                    diag.get("sigma_iso"),
                    diag.get("pre_condition_number"),
                    diag.get("final_condition_number"),
                    diag.get("energy_top5pct_pre"),
                    diag.get("energy_top5pct_final"),
                    alignment[0] if alignment else None,
                    diag.get("fallback"),
                ]
            )


def render_report_figures(report: dict, out_dir) -> list[str]:
    """Render per-layer diagnostic figures as PNGs; returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    layers = report.get("layers", {})
    names = sorted(layers)
    written: list[str] = []
    if not names:
        return written
    tau = report.get("config", {}).get("tau")

    def grab(key):
        return [layers[n].get(key) for n in names]

    positions = range(len(names))

    fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(names)), 4.0))
    gammas = [g if g is not None else 0.0 for g in grab("gamma")]
    branches = grab("branch")
    colors = ["#d1495b" if b == "heterogeneous" else "#2e6f95" for b in branches]
    ax.bar(positions, gammas, color=colors)
    if tau is not None:
        ax.axhline(tau, color="black", linestyle="--", linewidth=1, label=f"threshold {tau:g}")
        ax.legend()
    ax.set_xticks(positions)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("heterogeneity coefficient")
    ax.set_title("Per-layer heterogeneity and branch")
    fig.tight_layout()
    path = os.path.join(out_dir, "gamma_by_layer.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    pre = grab("pre_condition_number")
    final = grab("final_condition_number")
    if any(v is not None for v in pre + final):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(names)), 4.0))
        if any(v is not None for v in pre):
            ax.plot(positions, [v or float("nan") for v in pre], "o-", label="preliminary")
        ax.plot(positions, [v or float("nan") for v in final], "s-", label="final")
        ax.set_yscale("log")
        ax.set_xticks(positions)
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
        ax.set_ylabel("condition number")
        ax.set_title("Spectral conditioning before/after refinement")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "conditioning.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    alignments = [layers[n].get("principal_alignment") or [] for n in names]
    if any(alignments):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(names)), 4.0))
        width = len(max(alignments, key=len))
        for rank in range(width):
            values = [a[rank] if rank < len(a) else float("nan") for a in alignments]
            ax.plot(positions, values, "o-", markersize=3, label=f"direction {rank + 1}")
        ax.set_ylim(0.0, 1.05)
        ax.set_xticks(positions)
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
        ax.set_ylabel("|cosine| to preliminary directions")
        ax.set_title("Principal-direction preservation")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, "principal_alignment.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    return written

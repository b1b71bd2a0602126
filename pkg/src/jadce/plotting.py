"""Render per-cell and sweep figures next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = {
    "lpom_gs": "LPOM-GS", "lpomcp_gs": "LPOMCP-GS", "alpom_gs": "ALPOM-GS",
    "lista_gs": "LISTA-GS", "ista_gs": "ISTA-GS",
}
# fixed metadata keeps the PNG bytes stable across reruns
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def _layer_plot(records, attr, ylabel, path, logy=False):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for r in records:
        ys = getattr(r, attr)
        ax.plot(range(len(ys)), ys, marker="o", ms=3, label=LABELS.get(r.variant, r.variant))
    ax.set_xlabel("layer / iteration k")
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def cell_figures(records, out_dir: str) -> dict:
    files = {}
    files["nmse_vs_layer.png"] = _layer_plot(
        records, "nmse_db", "NMSE (dB)", os.path.join(out_dir, "nmse_vs_layer.png"))
    files["error_rate_vs_layer.png"] = _layer_plot(
        records, "error_rate", "error rate", os.path.join(out_dir, "error_rate_vs_layer.png"), logy=True)
    return files


def sweep_figures(records, axis: str, out_dir: str) -> dict:
    by_variant: dict = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append((r.cell[axis], r.nmse_db[-1]))
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for v in sorted(by_variant):
        pts = sorted(by_variant[v])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", ms=4, label=LABELS.get(v, v))
    ax.set_xlabel("SNR (dB)" if axis == "snr_db" else axis)
    ax.set_ylabel("final-layer NMSE (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    name = f"nmse_vs_{axis}.png"
    return {name: _save(fig, os.path.join(out_dir, name))}

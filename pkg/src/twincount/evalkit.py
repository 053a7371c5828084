"""Count metrics, latent embedding export and lightweight SVG reports."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import asdict, dataclass
from xml.sax.saxutils import escape

import numpy as np


class EmptyLabeledSetError(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    mae: float
    mre: float   # percent
    acc: float   # percent
    n: int

    def to_dict(self):
        return asdict(self)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    whole = np.floor(a)
    # a - floor(a) is exact, unlike floor(a + 0.5) just below a tie
    return np.sign(x) * (whole + (a - whole >= 0.5))


def metrics_from_predictions(labels, predictions):
    """MAE, MRE (% of the true count) and exact-count accuracy (%) over labeled items."""
    labels = np.asarray(labels, dtype=np.float64)
    preds = np.asarray(predictions, dtype=np.float64)
    mask = labels >= 1
    if not mask.any():
        raise EmptyLabeledSetError("no labeled samples to evaluate")
    lab, pred = labels[mask], preds[mask]
    err = np.abs(lab - pred)
    n = len(lab)
    # correctly rounded sums make the result independent of summation order
    return Metrics(
        mae=math.fsum(err) / n,
        mre=math.fsum(err / lab) / n * 100.0,
        acc=float((round_half_away(pred) == lab).mean() * 100.0),
        n=n,
    )


def evaluate(model, dataset, batch_size=64):
    """Eval-mode metrics of ``model`` on the labeled part of ``dataset``."""
    mask = dataset.labels >= 1
    if not mask.any():
        raise EmptyLabeledSetError(f"dataset ({dataset.origin}) has no labeled samples")
    preds = model.predict(dataset.images[mask], dataset.origin, batch_size=batch_size)
    return metrics_from_predictions(dataset.labels[mask], preds)


def export_embeddings(model, dataset, path, batch_size=64):
    """Write latent means (one row per sample) for external UMAP/t-SNE plots."""
    mus = []
    for i in range(0, len(dataset), batch_size):
        mu, _ = model.encode(dataset.images[i:i + batch_size], dataset.origin)
        mus.append(mu)
    model.clear_caches()
    dim = model.config.latent_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"mu_{j:03d}" for j in range(dim)] + ["origin", "labeled", "label", "filename"])
        for mu_block_start, block in zip(range(0, len(dataset), batch_size), mus):
            for k, row in enumerate(block):
                i = mu_block_start + k
                lab = int(dataset.labels[i])
                w.writerow([f"{v:.9g}" for v in row] + [
                    dataset.origin, int(lab >= 1), lab if lab >= 1 else "", dataset.filenames[i],
                ])
    return path


def read_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    mu_cols = [k for k in rows[0] if k.startswith("mu_")] if rows else []
    vectors = np.array([[float(r[c]) for c in mu_cols] for r in rows])
    return vectors, rows


def metrics_csv_text(metrics):
    """``metrics`` maps dataset name -> Metrics."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "n", "mae", "mre_percent", "acc_percent"])
    for name, m in metrics.items():
        w.writerow([name, m.n, f"{m.mae:.6f}", f"{m.mre:.6f}", f"{m.acc:.6f}"])
    return buf.getvalue()


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv_text(metrics))


# ---------------------------------------------------------------- SVG charts

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def line_chart_svg(series, title, xlabel, ylabel, width=640, height=400):
    """Minimal standalone SVG line chart. ``series`` maps name -> (xs, ys)."""
    pad_l, pad_r, pad_t, pad_b = 60, 140, 30, 45
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)
           if y is not None and math.isfinite(y)]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">'
        f'{escape(xlabel)}</text>',
        f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        xv = x0 + (x1 - x0) * i / 4
        parts.append(f'<text x="{pad_l - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                     f'font-size="10">{yv:.3g}</text>')
        parts.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle" '
                     f'font-size="10">{xv:.3g}</text>')
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys)
                          if y is not None and math.isfinite(y))
        if coords:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{coords}"/>')
        ly = pad_t + 14 + 16 * k
        parts.append(f'<line x1="{pad_l + pw + 10}" y1="{ly - 4}" x2="{pad_l + pw + 28}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{pad_l + pw + 32}" y="{ly}" font-size="11">{escape(str(name))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(histories, metrics, path):
    """Write metrics.csv, per-run history CSVs and loss / validation SVG charts into ``path``.

    ``histories`` is a TrainingHistory or a mapping run name -> TrainingHistory.
    """
    if not isinstance(histories, dict):
        histories = {"run": histories}
    if not histories or all(len(h.records) == 0 for h in histories.values()):
        raise ValueError("write_report needs a non-empty history")
    os.makedirs(path, exist_ok=True)
    written = []
    for name, hist in histories.items():
        p = os.path.join(path, f"history_{name}.csv")
        hist.to_csv(p)
        written.append(p)
    if metrics:
        p = os.path.join(path, "metrics.csv")
        write_metrics_csv(metrics, p)
        written.append(p)
    charts = {
        "loss.svg": ("training loss per item", "loss_total"),
        "val_mae.svg": ("validation MAE", "val_mae"),
        "val_acc.svg": ("validation accuracy (%)", "val_acc"),
    }
    for fname, (title, attr) in charts.items():
        series = {
            name: ([r.epoch for r in h.records], [getattr(r, attr) for r in h.records])
            for name, h in histories.items()
        }
        p = os.path.join(path, fname)
        with open(p, "w") as fh:
            fh.write(line_chart_svg(series, title, "epoch", attr))
        written.append(p)
    return written

"""Run reports: CSV tables, an SVG resistance plot and a PGM reconstruction sheet."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import CSV_COLUMNS, RESISTANCE_TARGET, AttackReport
from .checkpoint import atomic_write_bytes
from .errors import ConfigError
from .sfl import EpochResult

EPOCH_COLUMNS = ("run", "epoch", "train_loss", "val_accuracy")
SUMMARY_COLUMNS = ("setting", "accuracy", "mse_l0", "mse_best", "verdict")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{float(x):.8g}"
    return "" if x is None else str(x)


@dataclass
class RunRecord:
    name: str
    epochs: list[EpochResult] = field(default_factory=list)
    attack: AttackReport = field(default_factory=AttackReport)

    def summary(self) -> tuple:
        """(setting, accuracy, mse_l0, mse_best, verdict) at the last attacked epoch."""
        acc = self.epochs[-1].val_accuracy if self.epochs else float("nan")
        if not self.attack.rows:
            return (self.name, acc, float("nan"), float("nan"), 0)
        last = max(self.attack.rows, key=lambda r: r.epoch)
        l0 = last.mse_l0
        return (self.name, acc, float("nan") if l0 is None else l0, last.mse_best, int(last.verdict))


@dataclass
class RunReport:
    runs: list[RunRecord] = field(default_factory=list)
    truth: np.ndarray | None = None
    recon: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def primary(self) -> RunRecord | None:
        return self.runs[-1] if self.runs else None

    def summary_rows(self) -> list[tuple]:
        skip = set(self.extra.get("reference", ()))
        return [r.summary() for r in self.runs if (r.attack.rows or r.epochs) and r.name not in skip]


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def epochs_csv(runs) -> bytes:
    rows = [(r.name, e.epoch, e.train_loss, e.val_accuracy) for r in runs for e in r.epochs]
    return csv_bytes(EPOCH_COLUMNS, rows)


def attack_csv(report: AttackReport) -> bytes:
    return csv_bytes(CSV_COLUMNS, report.csv_rows())


def curves_svg(runs, width: int = 640, height: int = 400) -> str:
    """Resistance (mse_best) against epoch, one polyline per run, plus the 0.02 target line.

    A second panel scatters final accuracy against final mse_best.
    """
    pad = 50
    pts = [(row.epoch, row.mse_best) for r in runs for row in r.attack.rows]
    max_epoch = max([p[0] for p in pts] + [1])
    max_mse = max([p[1] for p in pts] + [RESISTANCE_TARGET * 1.5])
    panel_w = (width - 3 * pad) / 2

    def sx(e):
        return pad + (e - 1) / max(max_epoch - 1, 1) * panel_w

    def sy(m):
        return height - pad - m / max_mse * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{pad}" y="20" font-size="12">mse_best vs epoch</text>',
           f'<line class="target" x1="{pad}" y1="{sy(RESISTANCE_TARGET):.2f}" x2="{pad + panel_w:.2f}" '
           f'y2="{sy(RESISTANCE_TARGET):.2f}" stroke="red" stroke-dasharray="6,4"/>']
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"]
    for i, r in enumerate(runs):
        rows = sorted(r.attack.rows, key=lambda row: row.epoch)
        if not rows:
            continue
        coords = " ".join(f"{sx(row.epoch):.2f},{sy(row.mse_best):.2f}" for row in rows)
        out.append(f'<polyline class="run" data-run="{_esc(r.name)}" fill="none" '
                   f'stroke="{palette[i % len(palette)]}" points="{coords}"/>')
    x0 = 2 * pad + panel_w
    out.append(f'<text x="{x0:.2f}" y="20" font-size="12">accuracy vs mse_best</text>')
    for i, r in enumerate(runs):
        name, acc, _, best, _ = r.summary()
        if np.isnan(best) or np.isnan(acc):
            continue
        cx = x0 + acc / 100.0 * panel_w
        out.append(f'<circle cx="{cx:.2f}" cy="{sy(best):.2f}" r="3" fill="{palette[i % len(palette)]}">'
                   f'<title>{_esc(name)}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_") or "run"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def contact_sheet(truth: np.ndarray, recon: np.ndarray, max_images: int = 8) -> bytes:
    """Binary PGM: ground truth on the top row, reconstructions below, channels averaged."""
    n = min(len(truth), len(recon), max_images)
    if n == 0:
        raise ConfigError("contact sheet needs at least one image")
    t = truth[:n].mean(axis=1)
    r = recon[:n].mean(axis=1)
    h, w = t.shape[1:]
    gap = 1
    sheet = np.ones((2 * h + 3 * gap, n * w + (n + 1) * gap))
    for i in range(n):
        x = gap + i * (w + gap)
        sheet[gap:gap + h, x:x + w] = t[i]
        sheet[2 * gap + h:2 * gap + 2 * h, x:x + w] = r[i]
    pix = np.clip(np.round(sheet * 255), 0, 255).astype(np.uint8)
    return f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii") + pix.tobytes()


def emit_report(report: RunReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def put(name: str, data: bytes) -> None:
        atomic_write_bytes(out / name, data)
        written.append(out / name)

    put("epochs.csv", epochs_csv(report.runs))
    primary = report.primary
    put("attack.csv", attack_csv(primary.attack if primary else AttackReport()))
    for r in report.runs[:-1]:
        if r.attack.rows:
            put(f"attack-{safe_name(r.name)}.csv", attack_csv(r.attack))
    put("summary.csv", csv_bytes(SUMMARY_COLUMNS, report.summary_rows()))
    for name, rows in report.extra.get("tables", {}).items():
        put(name, csv_bytes(SUMMARY_COLUMNS, rows))
    put("curves.svg", curves_svg(report.runs).encode("utf-8"))
    if report.truth is not None and report.recon is not None:
        put("recon.pgm", contact_sheet(report.truth, report.recon))
    if "meta" in report.extra:
        put("report.json", (json.dumps(report.extra["meta"], indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return written

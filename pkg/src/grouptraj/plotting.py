"""Dependency-free SVG output for trajectory samples and sweep curves."""

from __future__ import annotations

from typing import Sequence

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"]


class _Canvas:
    def __init__(self, points: np.ndarray, width: int = 640, height: int = 640, margin: int = 30):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
        self.scale = min((width - 2 * margin) / span[0], (height - 2 * margin) / span[1])
        self.lo, self.margin, self.width, self.height = lo, margin, width, height
        self.items: list[str] = []

    def xy(self, p) -> tuple[float, float]:
        x = self.margin + (p[0] - self.lo[0]) * self.scale
        y = self.height - self.margin - (p[1] - self.lo[1]) * self.scale
        return x, y

    def polyline(self, pts, color: str, width: float = 1.0, dash: str | None = None, opacity: float = 1.0) -> None:
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in (self.xy(p) for p in pts))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"'
            f' stroke-opacity="{opacity}"{extra}/>'
        )

    def text(self, x: float, y: float, s: str, size: int = 12, anchor: str = "start") -> None:
        self.items.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}">{s}</text>')

    def render(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}"'
            f' viewBox="0 0 {self.width} {self.height}">'
        )
        return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *self.items, "</svg>"]) + "\n"


def trajectory_svg(observed: np.ndarray, future: np.ndarray, samples: np.ndarray, mean: np.ndarray | None = None) -> str:
    """Observed solid, ground truth dashed, samples thin, mean dot-dashed; one color per pedestrian.

    ``observed`` N x t_obs x 2, ``future`` N x T x 2, ``samples`` k x N x T x 2
    absolute positions.
    """
    pts = [observed, future, samples] + ([mean] if mean is not None else [])
    canvas = _Canvas(np.concatenate([np.asarray(p).reshape(-1, 2) for p in pts]))
    for i in range(observed.shape[0]):
        color = PALETTE[i % len(PALETTE)]
        last = observed[i, -1:]
        for s in range(samples.shape[0]):
            canvas.polyline(np.vstack([last, samples[s, i]]), color, 0.6, opacity=0.5)
        canvas.polyline(observed[i], color, 2.0)
        canvas.polyline(np.vstack([last, future[i]]), color, 2.5, dash="8,4")
        if mean is not None:
            canvas.polyline(np.vstack([last, mean[i]]), color, 1.5, dash="6,3,1,3")
    return canvas.render()


def sweep_svg(rows: Sequence[dict], width: int = 640, height: int = 400) -> str:
    """ADE and FDE against rho."""
    rho = np.array([r["rho"] for r in rows], dtype=np.float64)
    series = {"ADE": np.array([r["ade"] for r in rows]), "FDE": np.array([r["fde"] for r in rows])}
    all_y = np.concatenate(list(series.values()))
    pts = np.stack([np.concatenate([rho, rho]), all_y], axis=1)
    canvas = _Canvas(np.vstack([pts, [rho.min(), 0.0]]), width, height, margin=50)
    x0, y0 = canvas.xy((rho.min(), 0.0))
    x1, _ = canvas.xy((rho.max(), 0.0))
    canvas.items.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y0:.1f}" stroke="black"/>')
    for r in rho:
        x, _ = canvas.xy((r, 0.0))
        canvas.text(x, y0 + 16, f"{r:g}", 11, "middle")
    canvas.text(width / 2, height - 8, "rho", 12, "middle")
    for (label, ys), color in zip(series.items(), PALETTE):
        canvas.polyline(np.stack([rho, ys], axis=1), color, 2.0)
        x, y = canvas.xy((rho[-1], ys[-1]))
        canvas.text(x + 4, y, label, 12)
    return canvas.render()

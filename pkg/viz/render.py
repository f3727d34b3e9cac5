#!/usr/bin/env python3
"""Render exported forecast JSON into figures.

Two figure styles, consumed from the forecaster's export files:
  - prediction curves: input window, ground truth, and forecast per panel,
    with a vertical marker where the forecast starts;
  - attention heatmap: the head-averaged attention matrix, averaged over the
    exported samples (query time step on the y axis, support/source time step
    on the x axis).

The script never recomputes model math; it renders exported numbers only.

Usage: render.py predictions <json> -o <png>
       render.py attention   <json> -o <png>
"""

from __future__ import annotations

import json
import sys
from datetime import datetime
from pathlib import Path

import click
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class ValidationError(ValueError):
    """Exported JSON does not match the documented schema."""


PREDICTION_KEYS = {"location_id", "start", "resolution_minutes", "input",
                   "forecast"}
ATTENTION_KEYS = {"location_id", "start", "resolution_minutes", "module",
                  "map"}


def load_entries(path, kind: str) -> list:
    """Read and validate one export file ('predictions' or 'attention')."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"{path}: expected a non-empty list of entries")
    required = PREDICTION_KEYS if kind == "predictions" else ATTENTION_KEYS
    for i, entry in enumerate(entries):
        missing = required - set(entry)
        if missing:
            raise ValidationError(f"{path}[{i}]: missing keys {sorted(missing)}")
        if kind == "attention":
            m = np.asarray(entry["map"], dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValidationError(f"{path}[{i}]: map must be square, "
                                      f"got shape {m.shape}")
            sums = m.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=1e-3):
                raise ValidationError(
                    f"{path}[{i}]: attention rows must sum to ~1 "
                    f"(worst row sum {sums[np.argmax(np.abs(sums - 1))]:.4f})")
    return entries


# ---------------------------------------------------------------------------
# prediction curves


def render_predictions(entries: list, out_path) -> dict:
    """Line charts: input region, truth, forecast, forecast-start marker.

    With four or more entries, the first four are laid out on a 2x2 grid
    (weekday/weekend style panels); otherwise one panel per entry.
    Returns layout facts for programmatic checks.
    """
    shown = entries[:4]
    n = len(shown)
    rows, cols = (2, 2) if n == 4 else (1, n)
    fig, axes = plt.subplots(rows, cols, figsize=(6 * cols, 3.5 * rows),
                             squeeze=False)
    info = {"panels": n, "markers": []}
    for ax, entry in zip(axes.reshape(-1), shown):
        inp = np.asarray(entry["input"], dtype=np.float64)
        fc = np.asarray(entry["forecast"], dtype=np.float64)
        h = len(inp) - 1           # input covers indices 0..H
        marker_x = h + 1           # forecast starts at H+1
        ax.plot(np.arange(len(inp)), inp, color="0.4", label="input")
        fx = np.arange(marker_x, marker_x + len(fc))
        truth = entry.get("truth")
        if truth is not None:
            ax.plot(np.concatenate([[h], fx]),
                    np.concatenate([[inp[-1]], truth]),
                    color="black", label="truth")
        ax.plot(np.concatenate([[h], fx]), np.concatenate([[inp[-1]], fc]),
                color="tab:red", label="forecast")
        ax.axvline(marker_x, color="tab:blue", linestyle="--", linewidth=1)
        start = datetime.fromisoformat(entry["start"])
        ax.set_title(f"{entry['location_id']}  {start:%Y-%m-%d %a %H:%M}  "
                     f"({entry['resolution_minutes']} min)", fontsize=9)
        ax.set_xlabel("time step")
        ax.legend(fontsize=8)
        info["markers"].append(marker_x)
    for ax in axes.reshape(-1)[n:]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return info


# ---------------------------------------------------------------------------
# attention heatmaps


def mean_attention(entries: list) -> np.ndarray:
    maps = [np.asarray(e["map"], dtype=np.float64) for e in entries]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValidationError(f"attention maps have mixed shapes: {shapes}")
    return np.mean(maps, axis=0)


def band_profile(matrix: np.ndarray, row: int = -1) -> dict:
    """Mass per column offset o >= 1 on one query row: profile[o] = A[i, i-o]."""
    matrix = np.asarray(matrix, dtype=np.float64)
    i = matrix.shape[0] + row if row < 0 else row
    return {o: float(matrix[i, i - o]) for o in range(1, i + 1)}


def max_band_offset(matrix: np.ndarray, row: int = -1) -> int:
    """Column offset with the largest off-diagonal mass on the readout row."""
    profile = band_profile(matrix, row)
    if not profile:
        raise ValidationError("matrix too small for an off-diagonal band")
    return max(profile, key=profile.get)


def band_mass(matrix: np.ndarray, offset: int, width: int = 1,
              row: int = -1) -> float:
    """Total mass within +/-width of a column offset on one query row."""
    profile = band_profile(matrix, row)
    return sum(profile.get(o, 0.0)
               for o in range(offset - width, offset + width + 1))


def render_attention(entries: list, out_path) -> dict:
    """Heatmap of the sample-averaged attention matrix."""
    mean_map = mean_attention(entries)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(mean_map, origin="upper", cmap="viridis",
                   vmin=0.0, vmax=float(mean_map.max()), aspect="equal")
    ax.set_xlabel("support time step")
    ax.set_ylabel("prediction (query) time step")
    module = entries[0].get("module", "attention")
    ax.set_title(f"{module} attention, averaged over {len(entries)} samples")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return {"shape": mean_map.shape,
            "max_band_offset": max_band_offset(mean_map)}


# ---------------------------------------------------------------------------
# CLI


@click.group()
def cli():
    """Render exported forecast JSON into figures."""


@cli.command("predictions")
@click.argument("json_path", type=click.Path(exists=True))
@click.option("-o", "--out", required=True, type=click.Path())
def cmd_predictions(json_path, out):
    """Prediction-vs-truth curves from predictions.json."""
    info = render_predictions(load_entries(json_path, "predictions"), out)
    click.echo(f"wrote {out} ({info['panels']} panel(s))")


@cli.command("attention")
@click.argument("json_path", type=click.Path(exists=True))
@click.option("-o", "--out", required=True, type=click.Path())
def cmd_attention(json_path, out):
    """Attention heatmap from attention.json."""
    info = render_attention(load_entries(json_path, "attention"), out)
    click.echo(f"wrote {out} (max off-diagonal band at column offset "
               f"{info['max_band_offset']})")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (ValidationError, click.UsageError, click.BadParameter,
            FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

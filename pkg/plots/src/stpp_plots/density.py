"""Render exported spatial density grids as heatmap panels.

Layout: the first predicted event's density on the left, then the
consecutive density differences for the later events when difference
grids are supplied (plain densities otherwise). History points from the
prediction JSON are overlaid as markers.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .common import SchemaError, load_grid


@dataclass
class FigureSpec:
    grid_paths: list
    prediction_path: Path | None = None
    colormap: str = "viridis"
    history_points: int = 50
    output: Path = field(default_factory=lambda: Path("density.png"))


def _grid_extent(grid_meta):
    return (grid_meta["x1_min"], grid_meta["x1_max"], grid_meta["x2_min"], grid_meta["x2_max"])


def _values(doc):
    steps = doc["grid"]["steps"]
    if "logp" in doc:
        return np.exp(np.asarray(doc["logp"])).reshape(steps, steps)
    return np.asarray(doc["density_diff"]).reshape(steps, steps)


def plot_density(spec: FigureSpec):
    """Returns (figure, panel descriptions); caller saves and closes."""
    docs = [load_grid(p) for p in spec.grid_paths]
    densities = sorted(
        (d for d in docs if d["meta"]["kind"] == "density"), key=lambda d: d["event_index"]
    )
    diffs = {d["event_index"]: d for d in docs if d["meta"]["kind"] == "density_difference"}
    if not densities:
        raise SchemaError("no density grids supplied")

    panels = [("density", densities[0])]
    for doc in densities[1:]:
        if doc["event_index"] in diffs:
            panels.append(("difference", diffs[doc["event_index"]]))
        else:
            panels.append(("density", doc))

    history = None
    truth = None
    if spec.prediction_path is not None:
        pred = json.loads(Path(spec.prediction_path).read_text())
        tail = pred.get("history_tail")
        if tail:
            history = np.asarray(tail)[-spec.history_points :]
        if pred.get("true_x"):
            truth = np.asarray(pred["true_x"])

    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 4.0), squeeze=False)
    for ax, (kind, doc) in zip(axes[0], panels):
        values = _values(doc)
        cmap = spec.colormap if kind == "density" else "RdBu_r"
        if kind == "difference":
            bound = max(abs(values.min()), abs(values.max()), 1e-300)
            im = ax.imshow(
                values.T, origin="lower", extent=_grid_extent(doc["grid"]), cmap=cmap,
                vmin=-bound, vmax=bound, aspect="auto",
            )
        else:
            im = ax.imshow(
                values.T, origin="lower", extent=_grid_extent(doc["grid"]), cmap=cmap,
                aspect="auto",
            )
        if history is not None and history.shape[1] >= 2:
            ax.scatter(history[:, 0], history[:, 1], s=6, c="black", marker="*", alpha=0.7)
        slot = doc["event_index"] - (panels[0][1]["event_index"])
        if truth is not None and slot < len(truth):
            ax.scatter([truth[slot][0]], [truth[slot][1]], s=60, facecolors="none",
                       edgecolors="lime", linewidths=1.5)
        title = f"event {doc['event_index']}"
        if kind == "difference":
            title += f" − {doc['diff_with']}"
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    return fig, panels


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stpp-plot-density",
        description="Render stpp density grids (a directory or JSON files) to a PNG.",
    )
    parser.add_argument("inputs", nargs="+", help="grid JSON files or a directory of them")
    parser.add_argument("--prediction", default=None, help="prediction JSON for overlays")
    parser.add_argument("--colormap", default="viridis")
    parser.add_argument("--history-points", type=int, default=50)
    parser.add_argument("-o", "--output", default="density.png")
    args = parser.parse_args(argv)

    paths = []
    prediction = Path(args.prediction) if args.prediction else None
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("density_event*.json")))
            paths.extend(sorted(p.glob("diff_event*.json")))
            if prediction is None and (p / "prediction.json").exists():
                prediction = p / "prediction.json"
        else:
            paths.append(p)
    spec = FigureSpec(
        grid_paths=paths,
        prediction_path=prediction,
        colormap=args.colormap,
        history_points=args.history_points,
        output=Path(args.output),
    )
    try:
        fig, panels = plot_density(spec)
    except (SchemaError, OSError, KeyError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": str(exc)}) + "\n")
        return 1
    spec.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output, dpi=120)
    plt.close(fig)
    print(f"wrote {spec.output} ({len(panels)} panels)")
    return 0


if __name__ == "__main__":
    sys.exit(main())

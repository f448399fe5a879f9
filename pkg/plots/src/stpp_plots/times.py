"""Predicted-vs-true event time scatter from a prediction JSON."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .common import SchemaError, load_prediction


def plot_times(prediction: dict):
    t_hat = np.asarray(prediction["t_hat"])
    true_t = np.asarray(prediction["true_t"])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    lo = min(t_hat.min(), true_t.min())
    hi = max(t_hat.max(), true_t.max())
    pad = 0.05 * max(hi - lo, 1e-12)
    line = np.array([lo - pad, hi + pad])
    ax.plot(line, line, color="gray", linewidth=1, linestyle="--")
    ax.scatter(true_t, t_hat, marker="*", s=90, c="red", label="predicted")
    ax.scatter(true_t, true_t, marker="o", s=40, facecolors="none", edgecolors="green",
               label="true")
    ax.set_xlabel("true event time")
    ax.set_ylabel("predicted event time")
    ax.legend(loc="best")
    fig.tight_layout()
    return fig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stpp-plot-times",
        description="Scatter predicted vs true event times from a prediction JSON.",
    )
    parser.add_argument("prediction", help="prediction JSON file")
    parser.add_argument("-o", "--output", default="times.png")
    args = parser.parse_args(argv)
    try:
        doc = load_prediction(args.prediction)
        fig = plot_times(doc)
    except (SchemaError, OSError, KeyError, json.JSONDecodeError) as exc:
        sys.stderr.write(json.dumps({"error": str(exc)}) + "\n")
        return 1
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out} ({len(doc['t_hat'])} events)")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic data: Ogata thinning for temporal models, pinwheel for space.

Thinning proposes exponential waiting times under a local intensity upper
bound and accepts with probability lambda(t)/bound. For intensities that
decay between events (Hawkes, Poisson) the bound is the current intensity,
refreshed at every proposal; for increasing intensities (self-correcting)
the bound is taken over a finite lookahead window with retry.

The pinwheel scatters Gaussian blobs along a spiral; clusters are emitted
in clockwise angular order so a time-sorted pairing visits them
sequentially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .classical import TemporalModelParams
from .events import Event

MAX_EVENTS_DEFAULT = 1_000_000


@dataclass(frozen=True)
class PinwheelConfig:
    n_clusters: int = 15
    per_cluster: int = 150
    radial_std: float = 0.3
    tangential_std: float = 0.1
    rate: float = 0.25  # spiral tightness

    def __post_init__(self):
        if self.n_clusters <= 0 or self.per_cluster <= 0:
            raise ValueError("cluster counts must be positive")
        if self.radial_std < 0 or self.tangential_std < 0 or self.rate <= 0:
            raise ValueError("noise scales must be nonnegative and rate positive")


def thinning_sample(
    model: TemporalModelParams,
    rng: np.random.Generator,
    horizon: float | None = None,
    n: int | None = None,
    bound_factor: float = 1.0,
    lookahead: float | None = None,
    max_events: int = MAX_EVENTS_DEFAULT,
) -> np.ndarray:
    """Sample event times by Ogata thinning until `horizon` or `n` events.

    The Hawkes excitation is carried incrementally (one exponential decay
    per proposal) so long simulations stay O(number of proposals).
    `bound_factor` >= 1 inflates the upper bound; the accepted process is
    distributionally unchanged (used to test bound invariance).
    """
    if (horizon is None) == (n is None):
        raise ValueError("specify exactly one of horizon or n")
    if horizon is not None and horizon <= 0:
        raise ValueError("horizon must be positive")
    if n is not None and n <= 0:
        raise ValueError("n must be positive")
    if bound_factor < 1.0:
        raise ValueError("bound_factor must be >= 1")

    increasing = model.kind == "self_correcting" and model.alpha > 0
    jump = model.alpha / model.beta if model.kind == "hawkes" else 0.0
    exc = 0.0  # hawkes excitation sum at the current time
    times: list[float] = []
    t = 0.0
    while True:
        if n is not None and len(times) >= n:
            break
        if horizon is not None and t >= horizon:
            break
        if horizon is not None and len(times) >= max_events:
            raise RuntimeError(
                f"event cap {max_events} hit before horizon {horizon}; "
                "model may be supercritical"
            )

        if model.kind == "poisson":
            lam_now = model.lam
        elif model.kind == "hawkes":
            lam_now = model.mu + exc
        else:
            lam_now = math.exp(model.mu + model.alpha * t - model.beta * len(times))

        if increasing:
            # window sized to the growth rate so the bound stays <= 2 * lam_now
            window = lookahead if lookahead is not None else math.log(2.0) / model.alpha
            lam_end = math.exp(
                model.mu + model.alpha * (t + window) - model.beta * len(times)
            )
            bound = max(lam_now, lam_end) * bound_factor
            w = rng.exponential(1.0 / bound)
            if w > window:
                t += window  # no proposal landed in the window; slide it
                continue
            cand = t + w
            lam = math.exp(model.mu + model.alpha * cand - model.beta * len(times))
        else:
            bound = lam_now * bound_factor
            w = rng.exponential(1.0 / bound)
            cand = t + w
            if model.kind == "hawkes":
                exc *= math.exp(-w / model.beta)
            lam = model.lam if model.kind == "poisson" else model.mu + exc
        if lam > bound * (1.0 + 1e-12):
            raise RuntimeError("intensity exceeded its upper bound (internal bug)")
        if not math.isfinite(lam):
            raise RuntimeError(f"non-finite intensity at t={cand}")
        t = cand
        if rng.random() * bound <= lam:
            if horizon is not None and cand > horizon:
                break
            times.append(cand)
            exc += jump
    return np.asarray(times)


def pinwheel_spatial(
    cfg: PinwheelConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """2-d spiral cluster points; returns (points (N,2), cluster labels (N,)).

    Each cluster is a Gaussian blob at unit radius sheared along a spiral
    (angle grows with the radial coordinate). Clusters are emitted sorted
    by centroid angle, descending, i.e. clockwise.
    """
    k, m = cfg.n_clusters, cfg.per_cluster
    base_angles = 2.0 * np.pi * np.arange(k) / k
    clusters = []
    for j in range(k):
        radial = 1.0 + cfg.radial_std * rng.normal(size=m)
        tangential = cfg.tangential_std * rng.normal(size=m)
        angle = base_angles[j] + cfg.rate * np.exp(radial)
        pts = np.stack(
            [
                radial * np.cos(angle) - tangential * np.sin(angle),
                radial * np.sin(angle) + tangential * np.cos(angle),
            ],
            axis=1,
        )
        clusters.append(pts)
    centroids = np.array([c.mean(axis=0) for c in clusters])
    centroid_angle = np.arctan2(centroids[:, 1], centroids[:, 0])
    order = np.argsort(-centroid_angle)
    points = np.concatenate([clusters[j] for j in order], axis=0)
    labels = np.concatenate([np.full(m, j) for j in order])
    return points, labels


def spiral_skeleton(cfg: PinwheelConfig, cluster: int) -> np.ndarray:
    """Zero-noise location of a cluster's points (radial=1, tangential=0)."""
    base = 2.0 * np.pi * cluster / cfg.n_clusters
    angle = base + cfg.rate * np.e
    return np.array([np.cos(angle), np.sin(angle)])


def make_pinwheel_dataset(
    cfg: PinwheelConfig,
    hawkes: TemporalModelParams,
    rng: np.random.Generator,
) -> list[Event]:
    """Pair thinning-sampled times with clockwise pinwheel points; marker 1."""
    points, _ = pinwheel_spatial(cfg, rng)
    times = thinning_sample(hawkes, rng, n=len(points))
    if len(times) != len(points):
        raise ValueError(f"time/location count mismatch: {len(times)} vs {len(points)}")
    return [
        Event(t=float(t), x=(float(p[0]), float(p[1])), m=1.0)
        for t, p in zip(times, points)
    ]

"""Event data model, CSV ingestion, windowing, splitting, normalization.

An event is a time, a d-dimensional location, and one scalar extra marker.
Long recordings are cut into overlapping fixed-length windows whose times
are shifted to start at 0; windows are shuffled and split into train /
val / test. Normalization standardizes locations and markers with
train-split statistics, divides inter-event intervals by the maximum
train interval (so every train interval lands in [0, 1]; val/test
intervals may exceed 1 and are deliberately not clamped), and min-max
rescales the input-times and output-times of each sequence separately.
Note the output-time rescaling uses the outputs' own min/max, information
unavailable at true forecast time; this mirrors the training protocol the
network assumes and is kept for parity.
All functions are pure: they return new objects and never mutate inputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import STREAM_SPLIT, make_rng

DEFAULT_SEQ_LEN = 500
DEFAULT_OVERLAP = 498
DEFAULT_L_OUT = 3
DEFAULT_FRACTIONS = (0.80, 0.14, 0.06)


@dataclass(frozen=True)
class Event:
    """One marked point: time, location (length d), scalar extra marker."""

    t: float
    x: tuple[float, ...]
    m: float

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError(f"non-finite event time {self.t}")
        if not all(math.isfinite(v) for v in self.x):
            raise ValueError(f"non-finite location {self.x}")
        if not math.isfinite(self.m):
            raise ValueError(f"non-finite marker {self.m}")


@dataclass(frozen=True)
class SequenceNorm:
    """Normalized arrays for one sequence plus the constants to invert them."""

    times: np.ndarray  # (n+L,) input and output times min-max scaled separately
    dts: np.ndarray  # (n+L,) inter-event intervals / dt_max; dts[0] relative to window start
    x: np.ndarray  # (n+L, d) standardized locations
    m: np.ndarray  # (n+L,) standardized markers
    in_tmin: float
    in_tmax: float
    out_tmin: float
    out_tmax: float


@dataclass(frozen=True)
class EventSequence:
    """A window of n_in + l_out events with window-local times (first time 0)."""

    events: tuple[Event, ...]
    n_in: int
    l_out: int
    t0: float
    norm: SequenceNorm | None = None

    def __post_init__(self):
        if len(self.events) != self.n_in + self.l_out:
            raise ValueError(
                f"sequence length {len(self.events)} != n_in+l_out = {self.n_in + self.l_out}"
            )
        times = [e.t for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("sequence times must be nondecreasing")

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    @property
    def locations(self) -> np.ndarray:
        return np.array([e.x for e in self.events])

    @property
    def markers(self) -> np.ndarray:
        return np.array([e.m for e in self.events])


@dataclass(frozen=True)
class NormStats:
    space_mean: np.ndarray
    space_var: np.ndarray
    marker_mean: float
    marker_var: float
    dt_max: float

    def __post_init__(self):
        if np.any(np.asarray(self.space_var) <= 0):
            raise ValueError("zero variance in a location component")
        if self.marker_var <= 0:
            raise ValueError("zero variance in the marker")
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")

    def to_dict(self) -> dict:
        return {
            "space_mean": [float(v) for v in self.space_mean],
            "space_var": [float(v) for v in self.space_var],
            "marker_mean": float(self.marker_mean),
            "marker_var": float(self.marker_var),
            "dt_max": float(self.dt_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            space_mean=np.asarray(d["space_mean"], dtype=float),
            space_var=np.asarray(d["space_var"], dtype=float),
            marker_mean=float(d["marker_mean"]),
            marker_var=float(d["marker_var"]),
            dt_max=float(d["dt_max"]),
        )


@dataclass(frozen=True)
class SequenceDataset:
    train: tuple[EventSequence, ...]
    val: tuple[EventSequence, ...]
    test: tuple[EventSequence, ...]
    d: int
    stats: NormStats | None = None

    def all_sequences(self) -> tuple[EventSequence, ...]:
        return self.train + self.val + self.test


# ---------------------------------------------------------------------------
# CSV ingestion


def parse_event_csv(data: bytes | str, d: int) -> list[Event]:
    """Parse `t,x1,...,xd,m` rows (times ascending) into events."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    reader = csv.reader(io.StringIO(data))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty CSV: missing header") from None
    expected = ["t", *[f"x{i + 1}" for i in range(d)], "m"]
    if [c.strip() for c in header] != expected:
        raise ValueError(f"malformed header {header!r}, expected {expected!r}")
    events: list[Event] = []
    prev_t = -math.inf
    for idx, row in enumerate(reader):
        if not row:
            continue
        if len(row) != d + 2:
            raise ValueError(f"row {idx}: expected {d + 2} columns, got {len(row)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise ValueError(f"row {idx}: non-numeric field ({exc})") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"row {idx}: non-finite value")
        t, m = vals[0], vals[-1]
        if t < prev_t:
            raise ValueError(f"row {idx}: non-monotone time ({t} after {prev_t})")
        prev_t = t
        events.append(Event(t=t, x=tuple(vals[1:-1]), m=m))
    return events


def write_event_csv(events: list[Event], d: int, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *[f"x{i + 1}" for i in range(d)], "m"])
        for e in events:
            # repr of a Python float round-trips exactly
            writer.writerow([repr(float(e.t)), *[repr(float(v)) for v in e.x], repr(float(e.m))])


# ---------------------------------------------------------------------------
# windowing and splitting


def window_sequences(
    events: list[Event],
    seq_len: int = DEFAULT_SEQ_LEN,
    overlap: int = DEFAULT_OVERLAP,
    l_out: int = DEFAULT_L_OUT,
) -> list[EventSequence]:
    """Cut events into overlapping windows; times shift so each window starts at 0."""
    if not (seq_len > overlap >= 0):
        raise ValueError(f"need seq_len > overlap >= 0, got {seq_len}, {overlap}")
    if not (0 < l_out < seq_len):
        raise ValueError(f"need 0 < l_out < seq_len, got {l_out}, {seq_len}")
    if len(events) < seq_len:
        raise ValueError(f"{len(events)} events < window length {seq_len}")
    stride = seq_len - overlap
    sequences = []
    for start in range(0, len(events) - seq_len + 1, stride):
        window = events[start : start + seq_len]
        t0 = window[0].t
        shifted = tuple(replace(e, t=e.t - t0) for e in window)
        sequences.append(
            EventSequence(events=shifted, n_in=seq_len - l_out, l_out=l_out, t0=t0)
        )
    return sequences


def split_dataset(
    sequences: list[EventSequence],
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SequenceDataset:
    """Shuffle deterministically and split; val and test are kept nonempty."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if len(sequences) < 3:
        raise ValueError("need at least 3 sequences for nonempty splits")
    rng = make_rng(seed, STREAM_SPLIT)
    order = rng.permutation(len(sequences))
    shuffled = [sequences[i] for i in order]

    n = len(shuffled)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test  # floor allocation, remainder to train
    if n_val == 0:
        n_val, n_train = 1, n_train - 1
    if n_test == 0:
        n_test, n_train = 1, n_train - 1
    if n_train < 1:
        raise ValueError("too few sequences for nonempty splits")

    d = len(shuffled[0].events[0].x)
    return SequenceDataset(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
        d=d,
    )


# ---------------------------------------------------------------------------
# normalization


def compute_stats(train: tuple[EventSequence, ...]) -> NormStats:
    locs = np.concatenate([s.locations for s in train], axis=0)
    marks = np.concatenate([s.markers for s in train])
    dts = np.concatenate([np.diff(s.times, prepend=0.0) for s in train])
    d = locs.shape[1] if locs.ndim == 2 else 0
    if d:
        space_mean, space_var = locs.mean(axis=0), locs.var(axis=0)
        if np.any(space_var <= 0):
            raise ValueError("zero variance in a location component")
    else:
        space_mean, space_var = np.zeros(0), np.ones(0)
    # A constant extra marker (e.g. the all-ones pinwheel marker) standardizes
    # to zeros with unit scale; inversion stays exact.
    marker_var = float(marks.var())
    if marker_var <= 0.0:
        marker_var = 1.0
    return NormStats(
        space_mean=space_mean,
        space_var=space_var,
        marker_mean=float(marks.mean()),
        marker_var=marker_var,
        dt_max=float(dts.max()),
    )


def _minmax(times: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(times.min()), float(times.max())
    span = hi - lo
    if span <= 0.0:
        # degenerate window (all ties): map to zeros, span 1 keeps inversion exact
        return np.zeros_like(times), lo, lo + 1.0
    return (times - lo) / span, lo, hi


def _normalize_sequence(seq: EventSequence, stats: NormStats) -> EventSequence:
    times = seq.times
    dts = np.diff(times, prepend=0.0) / stats.dt_max
    t_in, in_lo, in_hi = _minmax(times[: seq.n_in])
    t_out, out_lo, out_hi = _minmax(times[seq.n_in :])
    norm = SequenceNorm(
        times=np.concatenate([t_in, t_out]),
        dts=dts,
        x=(seq.locations - stats.space_mean) / np.sqrt(stats.space_var),
        m=(seq.markers - stats.marker_mean) / math.sqrt(stats.marker_var),
        in_tmin=in_lo,
        in_tmax=in_hi,
        out_tmin=out_lo,
        out_tmax=out_hi,
    )
    return replace(seq, norm=norm)


def normalize(dataset: SequenceDataset) -> SequenceDataset:
    """Fill stats from the train split and attach normalized arrays everywhere."""
    stats = dataset.stats if dataset.stats is not None else compute_stats(dataset.train)
    return SequenceDataset(
        train=tuple(_normalize_sequence(s, stats) for s in dataset.train),
        val=tuple(_normalize_sequence(s, stats) for s in dataset.val),
        test=tuple(_normalize_sequence(s, stats) for s in dataset.test),
        d=dataset.d,
        stats=stats,
    )


def denormalize_location(x_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(x_norm) * np.sqrt(stats.space_var) + stats.space_mean


def denormalize_marker(m_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(m_norm) * math.sqrt(stats.marker_var) + stats.marker_mean


def denormalize_intervals(dt_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(dt_norm) * stats.dt_max


def normalized_axis_times(seq: EventSequence) -> np.ndarray:
    """Event times on the dt_max-normalized axis (cumulative normalized intervals).

    This is the common time axis on which classical baselines and the
    network's interval densities are compared.
    """
    if seq.norm is None:
        raise ValueError("sequence is not normalized")
    return np.cumsum(seq.norm.dts)


# ---------------------------------------------------------------------------
# dataset directory: events.csv + manifest.json

MANIFEST_NAME = "manifest.json"
EVENTS_NAME = "events.csv"


def save_dataset(
    path,
    events: list[Event],
    d: int,
    seq_len: int,
    overlap: int,
    l_out: int,
    seed: int,
    stats: NormStats,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_event_csv(events, d, path / EVENTS_NAME)
    manifest = {
        "d": d,
        "n_in": seq_len - l_out,
        "l_out": l_out,
        "seq_len": seq_len,
        "overlap": overlap,
        "seed": seed,
        "stats": stats.to_dict(),
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> SequenceDataset:
    """Rebuild the windowed, split, normalized dataset from a dataset directory."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    events = parse_event_csv((path / EVENTS_NAME).read_bytes(), manifest["d"])
    sequences = window_sequences(
        events, manifest["seq_len"], manifest["overlap"], manifest["l_out"]
    )
    dataset = split_dataset(sequences, seed=manifest["seed"])
    stats = NormStats.from_dict(manifest["stats"])
    return normalize(replace(dataset, stats=stats))


def build_dataset(
    events: list[Event],
    seq_len: int = DEFAULT_SEQ_LEN,
    overlap: int = DEFAULT_OVERLAP,
    l_out: int = DEFAULT_L_OUT,
    seed: int = 0,
) -> SequenceDataset:
    """window + split + normalize in one call."""
    sequences = window_sequences(events, seq_len, overlap, l_out)
    return normalize(split_dataset(sequences, seed=seed))

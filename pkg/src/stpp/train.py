"""End-to-end training, evaluation, multi-event prediction, density export.

The training loss is the joint negative log-likelihood of the L output
events: -sum_l log p_t(dt_l) - sum_l log p_x(x_l | t_l), averaged over the
batch, with true output events fed to the decoder. Evaluation feeds the
decoder zeros and reports per-sequence output NLL (sum over the L slots)
as mean +/- population std, never including any regularizer.

Prediction draws 1000 interval samples per slot, takes their means, and
reconstructs event times by the running sum t_hat_l = dt_hat_l +
t_hat_{l-1} starting from the last observed input time; locations are the
mean of 1000 samples pushed through the flow. The spatial head is
conditioned on true intervals (`time_source='true_times'`, the evaluation
parity mode) or on the sampled interval means (`'sampled'`, genuine
forecasting).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import heads
from .autodiff import ParamStore, Tensor
from .events import EventSequence, NormStats, SequenceDataset, denormalize_location
from .neural import ABLATIONS, NetConfig, network_forward
from .rng import STREAM_DROPOUT, STREAM_SAMPLE, make_rng

TIME_SOURCES = ("true_times", "sampled")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    lr0: float = 1e-3
    decay_factor: float = 0.5
    patience: int = 50
    lr_floor: float = 1e-5
    seed: int = 0
    ablation: str = "none"
    time_source: str = "true_times"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.time_source not in TIME_SOURCES:
            raise ValueError(f"unknown time_source {self.time_source!r}")


@dataclass
class PredictedBatch:
    """Per-slot distributions and point predictions for one history."""

    beta: np.ndarray  # (L,) exponential means
    mu: np.ndarray  # (L, d) Gaussian base means
    chol: np.ndarray  # (L, d, d) Gaussian base Cholesky factors
    dt_hat_norm: np.ndarray  # (L,) mean sampled intervals, normalized units
    t_hat: np.ndarray  # (L,) reconstructed times, window-local dataset units
    t_hat_abs: np.ndarray  # (L,) absolute dataset units (window start added)
    x_hat_norm: np.ndarray  # (L, d) mean sampled locations, standardized
    x_hat: np.ndarray  # (L, d) dataset units
    nll: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# batch assembly


def sequence_arrays(seq: EventSequence) -> dict[str, np.ndarray]:
    if seq.norm is None:
        raise ValueError("sequence is not normalized")
    n = seq.n_in
    tuples = np.concatenate(
        [seq.norm.times[:, None], seq.norm.x, seq.norm.m[:, None]], axis=1
    )
    return {
        "enc_in": tuples[:n],
        "dec_in": tuples[n:],
        "dt_out": seq.norm.dts[n:],
        "x_out": seq.norm.x[n:],
    }


def stack_batch(sequences) -> dict[str, np.ndarray]:
    parts = [sequence_arrays(s) for s in sequences]
    return {k: np.stack([p[k] for p in parts]) for k in parts[0]}


def make_batches(sequences, batch_size: int) -> list[dict[str, np.ndarray]]:
    return [
        stack_batch(sequences[i : i + batch_size])
        for i in range(0, len(sequences), batch_size)
    ]


# ---------------------------------------------------------------------------
# loss

DT_BOUNDARY_EPS = 1e-9


def squeeze_unit_interval(dt: np.ndarray) -> np.ndarray:
    """Nudge exact-boundary intervals into the flow's open support (0, 1).

    The maximum training interval normalizes to exactly 1.0 and tied events
    give exactly 0.0; both are measure-zero boundary points of the softsign
    support. Values genuinely outside [0, 1] (possible on val/test) are left
    untouched and will be flagged by the density evaluation.
    """
    out = np.array(dt, dtype=float, copy=True)
    out[(out >= 0.0) & (out < DT_BOUNDARY_EPS)] = DT_BOUNDARY_EPS
    out[(out <= 1.0) & (out > 1.0 - DT_BOUNDARY_EPS)] = 1.0 - DT_BOUNDARY_EPS
    return out


def loss_multi_event(
    leaves,
    cfg: NetConfig,
    batch: dict[str, np.ndarray],
    train: bool = True,
    rng=None,
    ablation: str = "none",
    feed_decoder: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    """Mean joint NLL over the batch; returns (loss, logp_time, logp_space).

    `feed_decoder=False` zero-pads the decoder input (test-phase decoding);
    in training the true output events are fed (unless the zero_decoder
    ablation overrides).
    """
    dec_in = batch["dec_in"] if feed_decoder else np.zeros_like(batch["dec_in"])
    h_t_l, h_x_l = network_forward(
        leaves, cfg, batch["enc_in"], dec_in, train=train, rng=rng, ablation=ablation
    )
    dt = squeeze_unit_interval(batch["dt_out"])[..., None]
    logp_t = heads.log_prob_time(leaves, cfg, dt, h_t_l)  # (b, L)
    logp_x = heads.log_prob_space(leaves, cfg, batch["x_out"], dt, h_x_l)  # (b, L)
    per_seq = -ad.sum_(logp_t, axis=1) - ad.sum_(logp_x, axis=1)
    loss = ad.mean_(per_seq)
    if not np.isfinite(loss.value):
        bad = np.flatnonzero(~np.isfinite(per_seq.value))
        raise FloatingPointError(f"non-finite loss for batch sequences {bad.tolist()}")
    return loss, logp_t, logp_x


# ---------------------------------------------------------------------------
# Adam optimizer


class Adam:
    def __init__(self, store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.value) for p in store if p.trainable}
        self.v = {p.name: np.zeros_like(p.value) for p in store if p.trainable}
        self.t = 0

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in store:
            if not p.trainable:
                continue
            g = grads[p.name]
            self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            mhat = self.m[p.name] / (1 - b1**self.t)
            vhat = self.v[p.name] / (1 - b2**self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training loop


def _dataset_loss(store, cfg, sequences, ablation) -> float:
    """Joint NLL in eval mode (no dropout), true decoder inputs."""
    if not sequences:
        return math.nan
    batch = stack_batch(sequences)
    loss, _, _ = loss_multi_event(
        store.leaves(), cfg, batch, train=False, ablation=ablation
    )
    return float(loss.value)


def train(
    store: ParamStore,
    dataset: SequenceDataset,
    cfg: NetConfig,
    tc: TrainConfig,
    log_path=None,
) -> tuple[ParamStore, list[dict]]:
    """Adam with plateau-decayed learning rate; keeps the best-val params.

    Batches are visited in a fixed order each epoch, so a run is fully
    determined by (initial params, dataset, seed). A non-finite loss aborts
    and returns the last good checkpoint.
    """
    store = store.copy()
    batches = make_batches(list(dataset.train), tc.batch_size)
    optimizer = Adam(store, tc.lr0)
    lr = tc.lr0
    history: list[dict] = []
    row0 = {
        "epoch": 0,
        "train_loss": _dataset_loss(store, cfg, list(dataset.train), tc.ablation),
        "val_loss": _dataset_loss(store, cfg, list(dataset.val), tc.ablation),
        "lr": lr,
    }
    history.append(row0)
    best_val = row0["val_loss"]
    best_store = store.copy()
    stale = 0

    for epoch in range(1, tc.epochs + 1):
        # per-epoch stream: reproducible masks that still differ across epochs
        dropout_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=tc.seed, spawn_key=(STREAM_DROPOUT, epoch))
        ))
        epoch_losses = []
        aborted = False
        for batch in batches:
            leaves = store.leaves()
            try:
                loss, _, _ = loss_multi_event(
                    leaves, cfg, batch, train=True, rng=dropout_rng, ablation=tc.ablation
                )
            except FloatingPointError:
                aborted = True
                break
            grads = ad.backward(loss, leaves)
            optimizer.lr = lr
            optimizer.step(store, grads)
            epoch_losses.append(float(loss.value))
        if aborted:
            history.append({"epoch": epoch, "train_loss": math.nan, "val_loss": math.nan, "lr": lr, "aborted": True})
            break

        val_loss = _dataset_loss(store, cfg, list(dataset.val), tc.ablation)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val_loss,
                "lr": lr,
            }
        )
        if math.isfinite(val_loss) and val_loss < best_val:
            best_val = val_loss
            best_store = store.copy()
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                lr = max(lr * tc.decay_factor, tc.lr_floor)
                stale = 0

    if log_path is not None:
        write_history_csv(history, log_path)
    return best_store, history


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], row["train_loss"], row["val_loss"], row["lr"]])


# ---------------------------------------------------------------------------
# evaluation (Table-1 convention)


def _forward_zero_decoder(store, cfg, sequences, ablation):
    batch = stack_batch(sequences)
    leaves = store.leaves()
    dec_zero = np.zeros_like(batch["dec_in"])
    h_t_l, h_x_l = network_forward(
        leaves, cfg, batch["enc_in"], dec_zero, train=False, ablation=ablation
    )
    return leaves, batch, h_t_l, h_x_l


def _spatial_time_input(leaves, cfg, batch, h_t_l, time_source, seed, n_samples):
    if time_source == "true_times":
        return squeeze_unit_interval(batch["dt_out"])[..., None]
    rng = make_rng(seed, STREAM_SAMPLE)
    draws = heads.sample_time(leaves, cfg, h_t_l.value, rng, n_samples)
    return draws.mean(axis=0)[..., None]


def evaluate(
    store: ParamStore,
    sequences,
    cfg: NetConfig,
    time_source: str = "true_times",
    ablation: str = "none",
    seed: int = 0,
    n_samples: int = 1000,
) -> dict:
    """Per-sequence output NLLs with the decoder zero-padded.

    Returns {nll_time, nll_space, nll_joint}, each (mean, std, per_seq).
    """
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences to evaluate")
    leaves, batch, h_t_l, h_x_l = _forward_zero_decoder(store, cfg, sequences, ablation)
    logp_t = heads.log_prob_time(leaves, cfg, squeeze_unit_interval(batch["dt_out"])[..., None], h_t_l)
    t_in = _spatial_time_input(leaves, cfg, batch, h_t_l, time_source, seed, n_samples)
    logp_x = heads.log_prob_space(leaves, cfg, batch["x_out"], t_in, h_x_l)
    nll_t = -logp_t.value.sum(axis=1)
    nll_x = -logp_x.value.sum(axis=1)
    out = {}
    for name, vals in [("nll_time", nll_t), ("nll_space", nll_x), ("nll_joint", nll_t + nll_x)]:
        out[name] = {
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "per_seq": vals.tolist(),
        }
    return out


# ---------------------------------------------------------------------------
# prediction (1000-sample protocol)


def predict(
    store: ParamStore,
    seq: EventSequence,
    cfg: NetConfig,
    stats: NormStats,
    time_source: str = "true_times",
    seed: int = 0,
    n_samples: int = 1000,
    ablation: str = "none",
) -> PredictedBatch:
    """Forecast the L withheld events from the n-event history."""
    leaves, batch, h_t_l, h_x_l = _forward_zero_decoder(store, cfg, [seq], ablation)
    rng = make_rng(seed, STREAM_SAMPLE)

    dt_draws = heads.sample_time(leaves, cfg, h_t_l.value, rng, n_samples)  # (n, 1, L)
    dt_hat = dt_draws.mean(axis=0)[0]  # (L,)

    if time_source == "true_times":
        t_in = squeeze_unit_interval(batch["dt_out"])[..., None]
    else:
        t_in = dt_hat[None, :, None]
    x_draws = heads.sample_space(leaves, cfg, h_x_l.value, t_in, rng, n_samples)
    x_hat_norm = x_draws.mean(axis=0)[0]  # (L, d)

    beta = heads.exp_head(leaves, ad.constant(h_t_l.value)).value[0, :, 0]
    mu, chol = heads.mvn_head(leaves, cfg, ad.constant(h_x_l.value), ad.constant(t_in))

    t_n = seq.events[seq.n_in - 1].t
    dt_units = dt_hat * stats.dt_max
    t_hat = t_n + np.cumsum(dt_units)
    x_hat = denormalize_location(x_hat_norm, stats)

    logp_t = heads.log_prob_time(
        leaves, cfg, squeeze_unit_interval(batch["dt_out"])[..., None], h_t_l
    ).value[0]
    logp_x = heads.log_prob_space(leaves, cfg, batch["x_out"], t_in, h_x_l).value[0]
    return PredictedBatch(
        beta=beta,
        mu=mu.value[0],
        chol=chol.value[0],
        dt_hat_norm=dt_hat,
        t_hat=t_hat,
        t_hat_abs=t_hat + seq.t0,
        x_hat_norm=x_hat_norm,
        x_hat=x_hat,
        nll={
            "nll_time": float(-logp_t.sum()),
            "nll_space": float(-logp_x.sum()),
            "nll_joint": float(-(logp_t + logp_x).sum()),
        },
    )


def prediction_json(pred: PredictedBatch) -> dict:
    return {
        "t_hat": [float(v) for v in pred.t_hat],
        "t_hat_abs": [float(v) for v in pred.t_hat_abs],
        "x_hat": [[float(v) for v in row] for row in pred.x_hat],
        "dt_hat_norm": [float(v) for v in pred.dt_hat_norm],
        "nll": pred.nll,
    }


# ---------------------------------------------------------------------------
# density-grid export


GRID_SCHEMA_VERSION = 1
MAX_GRID_POINTS = 4_000_000


def export_density(
    store: ParamStore,
    seq: EventSequence,
    cfg: NetConfig,
    stats: NormStats,
    steps: int = 100,
    span_sigmas: float = 6.0,
    depth: float | None = None,
    with_differences: bool = True,
    time_source: str = "true_times",
    seed: int = 0,
    n_samples: int = 1000,
) -> list[dict]:
    """Spatial log-density grids per output slot, plus consecutive
    density-difference grids.

    All slots share one window: the union of their sampled means +/-
    span_sigmas sample stds (in normalized coordinates). For d=3 the grid
    is a 2-d slice at `depth` (default: the first true output's depth).
    """
    if steps * steps > MAX_GRID_POINTS:
        raise ValueError(f"grid of {steps}x{steps} exceeds cap {MAX_GRID_POINTS}")
    leaves, batch, h_t_l, h_x_l = _forward_zero_decoder(store, cfg, [seq], "none")
    rng = make_rng(seed, STREAM_SAMPLE)
    t_in = _spatial_time_input(leaves, cfg, batch, h_t_l, time_source, seed, n_samples)
    draws = heads.sample_space(leaves, cfg, h_x_l.value, t_in, rng, n_samples)[:, 0]  # (n, L, d)

    lo = (draws.mean(axis=0) - span_sigmas * draws.std(axis=0)).min(axis=0)
    hi = (draws.mean(axis=0) + span_sigmas * draws.std(axis=0)).max(axis=0)
    xs = np.linspace(lo[0], hi[0], steps)
    ys = np.linspace(lo[1], hi[1], steps)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    pts2 = np.stack([xx.ravel(), yy.ravel()], axis=1)
    if cfg.d_space == 3:
        if depth is None:
            depth = float(batch["x_out"][0, 0, 2])
        pts = np.concatenate([pts2, np.full((pts2.shape[0], 1), depth)], axis=1)
    else:
        pts = pts2

    n_pts = pts.shape[0]
    grids: list[dict] = []
    logps = []
    for l in range(cfg.l_out):
        ctx = np.broadcast_to(h_x_l.value[0, l], (n_pts, 1, cfg.d_space))
        t_slot = np.broadcast_to(t_in[0, l], (n_pts, 1, 1))
        lp = heads.log_prob_space(
            leaves, cfg, pts[:, None, :], t_slot, ad.constant(ctx)
        ).value[:, 0]
        logps.append(lp)
        grid_meta = {
            "x1_min": float(lo[0]),
            "x1_max": float(hi[0]),
            "x2_min": float(lo[1]),
            "x2_max": float(hi[1]),
            "steps": steps,
        }
        if cfg.d_space == 3:
            grid_meta["depth"] = float(depth)
        grids.append(
            {
                "grid": grid_meta,
                "logp": [float(v) for v in lp],
                "event_index": seq.n_in + l,
                "meta": {
                    "schema_version": GRID_SCHEMA_VERSION,
                    "kind": "density",
                    "order": "row-major",
                    "d_space": cfg.d_space,
                },
            }
        )
    if with_differences:
        for l in range(1, cfg.l_out):
            diff = np.exp(logps[l]) - np.exp(logps[l - 1])
            grids.append(
                {
                    "grid": grids[l]["grid"],
                    "density_diff": [float(v) for v in diff],
                    "event_index": seq.n_in + l,
                    "diff_with": seq.n_in + l - 1,
                    "meta": {
                        "schema_version": GRID_SCHEMA_VERSION,
                        "kind": "density_difference",
                        "order": "row-major",
                        "d_space": cfg.d_space,
                    },
                }
            )
    return grids


def write_density_grids(grids: list[dict], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for g in grids:
        kind = "diff" if g["meta"]["kind"] == "density_difference" else "density"
        path = out_dir / f"{kind}_event{g['event_index']}.json"
        path.write_text(json.dumps(g))
        paths.append(path)
    return paths

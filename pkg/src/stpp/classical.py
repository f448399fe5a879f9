"""Parametric temporal intensity models and first-order-moment prediction.

Three intensity families: homogeneous Poisson, Hawkes with exponential
kernel g(u) = (1/beta) exp(-u/beta) weighted by alpha (alpha is the
branching ratio; the intensity jumps alpha/beta at each event), and the
Isham-Westcott self-correcting form lambda(t) = exp(mu + alpha*t - beta*N(t)).

The `history` argument of evaluation functions is the set of events that
have already occurred at or before the evaluation time; events later than
the evaluation point are rejected.

Fitting is gradient descent with backtracking line search on
log-parameters (positivity by construction) with analytic gradients for
Poisson and Hawkes and finite differences for self-correcting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

SURVIVAL_CUTOFF = 1e-10
_LOG_SURVIVAL_CUTOFF = -math.log(SURVIVAL_CUTOFF)

KINDS = ("poisson", "hawkes", "self_correcting")


@dataclass(frozen=True)
class TemporalModelParams:
    kind: str
    lam: float | None = None  # poisson
    mu: float | None = None
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self):
        if self.kind == "poisson":
            if self.lam is None or self.lam <= 0:
                raise ValueError("poisson needs lam > 0")
        elif self.kind == "hawkes":
            # mu = 0 (pure triggering) is allowed for evaluation; the NLL
            # reports zero-intensity events explicitly.
            if self.mu is None or self.mu < 0:
                raise ValueError("hawkes needs mu >= 0")
            if self.alpha is None or self.alpha < 0:
                raise ValueError("hawkes needs alpha >= 0")
            if self.beta is None or self.beta <= 0:
                raise ValueError("hawkes needs beta > 0")
        elif self.kind == "self_correcting":
            if self.mu is None or self.alpha is None or self.beta is None:
                raise ValueError("self_correcting needs mu, alpha, beta")
            if self.beta <= 0:
                raise ValueError("self_correcting needs beta > 0")
        else:
            raise ValueError(f"unknown kind {self.kind!r}")

    @classmethod
    def poisson(cls, lam: float) -> "TemporalModelParams":
        return cls(kind="poisson", lam=lam)

    @classmethod
    def hawkes(cls, mu: float, alpha: float, beta: float) -> "TemporalModelParams":
        return cls(kind="hawkes", mu=mu, alpha=alpha, beta=beta)

    @classmethod
    def self_correcting(cls, mu: float, alpha: float, beta: float) -> "TemporalModelParams":
        return cls(kind="self_correcting", mu=mu, alpha=alpha, beta=beta)

    @property
    def is_stationary(self) -> bool:
        """Hawkes with branching ratio < 1; True for the other kinds."""
        if self.kind == "hawkes":
            return self.alpha < 1.0
        return True

    def to_dict(self) -> dict:
        params = {
            k: float(getattr(self, k))
            for k in ("lam", "mu", "alpha", "beta")
            if getattr(self, k) is not None
        }
        return {"kind": self.kind, "params": params}

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalModelParams":
        return cls(kind=d["kind"], **d["params"])


@dataclass(frozen=True)
class FitMeta:
    nll: float
    iters: int
    converged: bool


def save_model(model: TemporalModelParams, meta: FitMeta | None, path) -> None:
    doc = model.to_dict()
    if meta is not None:
        doc["fit_meta"] = {"nll": meta.nll, "iters": meta.iters, "converged": meta.converged}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_model(path) -> TemporalModelParams:
    with open(path) as fh:
        return TemporalModelParams.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# intensity / compensator


def _check_history(t: float, history: np.ndarray) -> np.ndarray:
    history = np.asarray(history, dtype=float)
    if history.size and history[-1] > t:
        raise ValueError(f"evaluation time {t} precedes history end {history[-1]}")
    return history


def intensity(model: TemporalModelParams, t: float, history) -> float:
    """Conditional intensity at t given the events observed up to t."""
    history = _check_history(t, history)
    if model.kind == "poisson":
        return model.lam
    if model.kind == "hawkes":
        exc = float(np.exp(-(t - history) / model.beta).sum()) if history.size else 0.0
        return model.mu + model.alpha / model.beta * exc
    return math.exp(model.mu + model.alpha * t - model.beta * history.size)


def compensator(model: TemporalModelParams, t_a: float, t_b: float, history) -> float:
    """Integral of the intensity over [t_a, t_b]; history must precede t_a."""
    if t_b < t_a:
        raise ValueError(f"need t_a <= t_b, got {t_a} > {t_b}")
    history = _check_history(t_a, history)
    if model.kind == "poisson":
        return model.lam * (t_b - t_a)
    if model.kind == "hawkes":
        if not history.size:
            return model.mu * (t_b - t_a)
        if math.isinf(t_b):
            decayed = np.exp(-(t_a - history) / model.beta)
            return math.inf if model.mu > 0 else float(model.alpha * decayed.sum())
        tail = np.exp(-(t_a - history) / model.beta) - np.exp(-(t_b - history) / model.beta)
        return model.mu * (t_b - t_a) + float(model.alpha * tail.sum())
    # self-correcting: N is constant on (t_a, t_b] given no new events
    n = history.size
    val, err = quad(
        lambda u: math.exp(model.mu + model.alpha * u - model.beta * n), t_a, t_b, limit=200
    )
    if not math.isfinite(val) or (abs(val) > 1e-12 and err / abs(val) > 1e-8):
        raise RuntimeError(f"compensator quadrature did not converge (err {err})")
    return val


# ---------------------------------------------------------------------------
# sequence negative log-likelihood (with analytic gradients where available)


def _hawkes_nll_terms(mu, alpha, beta, times, t_start, t_end):
    """Vectorized Hawkes NLL + gradient over (mu, alpha, beta).

    Overflow during line-search probes surfaces as a non-finite NLL, which
    the optimizer rejects.
    """
    t = times
    n = t.size
    a = t / beta
    lcse = np.logaddexp.accumulate(a)
    s = np.zeros(n)
    if n > 1:
        s[1:] = np.exp(lcse[:-1] - a[1:])
    lam = mu + alpha / beta * s
    if np.any(lam <= 0):
        idx = int(np.argmax(lam <= 0))
        raise ValueError(f"zero intensity at event {idx} (t={t[idx]})")
    # P_i = sum_{j<i} t_j exp(-(t_i-t_j)/beta), for the beta derivative
    with np.errstate(divide="ignore"):
        w = np.where(t > 0, np.log(np.maximum(t, 1e-300)), -np.inf) + a
    lw = np.logaddexp.accumulate(w)
    p = np.zeros(n)
    if n > 1:
        p[1:] = np.exp(lw[:-1] - a[1:])
    e_end = np.exp(-(t_end - t) / beta)
    span = t_end - t_start
    comp = mu * span + alpha * float((1.0 - e_end).sum())
    nll = -float(np.log(lam).sum()) + comp

    dlam_dmu = 1.0
    dlam_dalpha = s / beta
    dlam_dbeta = alpha / beta**2 * ((t * s - p) / beta - s)
    g_mu = -float((dlam_dmu / lam).sum()) + span
    g_alpha = -float((dlam_dalpha / lam).sum()) + float((1.0 - e_end).sum())
    g_beta = -float((dlam_dbeta / lam).sum()) - alpha * float(
        (e_end * (t_end - t)).sum()
    ) / beta**2
    return nll, np.array([g_mu, g_alpha, g_beta])


def nll_temporal(
    model: TemporalModelParams,
    times,
    t_start: float | None = None,
    t_end: float | None = None,
) -> float:
    """-sum log lambda(t_i | H_{t_i}) + integral of lambda over [t_start, t_end].

    Defaults integrate over [first event, last event]; pass explicit bounds
    for a different observation window.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("need at least one event")
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be nondecreasing")
    t0 = times[0] if t_start is None else float(t_start)
    t1 = times[-1] if t_end is None else float(t_end)
    if t0 > times[0] or t1 < times[-1]:
        raise ValueError("observation window must contain all events")

    if model.kind == "poisson":
        return -times.size * math.log(model.lam) + model.lam * (t1 - t0)
    if model.kind == "hawkes":
        nll, _ = _hawkes_nll_terms(model.mu, model.alpha, model.beta, times, t0, t1)
        return nll
    # self-correcting
    n = times.size
    idx = np.arange(n)
    loglam = model.mu + model.alpha * times - model.beta * idx
    comp = 0.0
    prev = t0
    for i, t in enumerate(times):
        comp += compensator(model, prev, t, times[:i])
        prev = t
    comp += compensator(model, prev, t1, times)
    return -float(loglam.sum()) + comp


def _poisson_nll_grad(lam, times, t0, t1):
    n = times.size
    nll = -n * math.log(lam) + lam * (t1 - t0)
    return nll, np.array([-n / lam + (t1 - t0)])


# ---------------------------------------------------------------------------
# MLE fitting


def _pack(kind: str, model: TemporalModelParams) -> np.ndarray:
    if kind == "poisson":
        return np.array([math.log(model.lam)])
    if kind == "hawkes":
        return np.array(
            [math.log(model.mu), math.log(max(model.alpha, 1e-4)), math.log(model.beta)]
        )
    return np.array([model.mu, model.alpha, math.log(model.beta)])


def _unpack(kind: str, theta: np.ndarray) -> TemporalModelParams:
    if kind == "poisson":
        return TemporalModelParams.poisson(math.exp(theta[0]))
    if kind == "hawkes":
        with np.errstate(over="ignore"):
            mu, alpha, beta = np.exp(theta)
        if not (math.isfinite(mu) and math.isfinite(alpha) and math.isfinite(beta)):
            raise ValueError("parameter overflow in line search probe")
        return TemporalModelParams.hawkes(mu, alpha, beta)
    return TemporalModelParams.self_correcting(theta[0], theta[1], math.exp(theta[2]))


def _default_init(kind: str, seqs: list[np.ndarray]) -> TemporalModelParams:
    total_n = sum(s.size for s in seqs)
    total_t = sum(float(s[-1] - s[0]) for s in seqs)
    rate = total_n / max(total_t, 1e-12)
    if kind == "poisson":
        return TemporalModelParams.poisson(rate)
    if kind == "hawkes":
        mean_dt = max(total_t / total_n, 1e-6)
        return TemporalModelParams.hawkes(mu=0.5 * rate, alpha=0.5, beta=mean_dt)
    return TemporalModelParams.self_correcting(mu=math.log(max(rate, 1e-6)), alpha=0.1, beta=0.1)


def _mean_nll_grad(kind: str, theta: np.ndarray, seqs: list[np.ndarray], fd_h: float = 1e-6):
    """Mean per-sequence NLL and its gradient in the packed parameter space."""
    model = _unpack(kind, theta)
    total = 0.0
    grad = np.zeros_like(theta)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for s in seqs:
            t0, t1 = float(s[0]), float(s[-1])
            if kind == "poisson":
                nll, g = _poisson_nll_grad(model.lam, s, t0, t1)
                grad += g * model.lam  # chain rule through log
            elif kind == "hawkes":
                nll, g = _hawkes_nll_terms(model.mu, model.alpha, model.beta, s, t0, t1)
                grad += g * np.array([model.mu, model.alpha, model.beta])
            else:
                nll = nll_temporal(model, s, t0, t1)
                for j in range(theta.size):
                    up, down = theta.copy(), theta.copy()
                    up[j] += fd_h
                    down[j] -= fd_h
                    grad[j] += (
                        nll_temporal(_unpack(kind, up), s, t0, t1)
                        - nll_temporal(_unpack(kind, down), s, t0, t1)
                    ) / (2 * fd_h)
            total += nll
    k = len(seqs)
    return total / k, grad / k


def fit_mle(
    kind: str,
    sequences,
    init: TemporalModelParams | None = None,
    max_iters: int = 2000,
    tol: float = 1e-8,
) -> tuple[TemporalModelParams, FitMeta]:
    """Fit by gradient descent with backtracking line search on log-parameters."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    seqs = [s for s in seqs if s.size >= 1]
    if not seqs:
        raise ValueError("empty training data")

    if kind == "poisson":
        # the objective has the unique stationary point lam = n / T; descent
        # iterations would only approach it
        n = sum(s.size for s in seqs)
        span = sum(float(s[-1] - s[0]) for s in seqs)
        model = TemporalModelParams.poisson(n / max(span, 1e-300))
        nll = sum(nll_temporal(model, s) for s in seqs) / len(seqs)
        return model, FitMeta(nll=nll, iters=0, converged=True)

    theta = _pack(kind, init if init is not None else _default_init(kind, seqs))

    f, g = _mean_nll_grad(kind, theta, seqs)
    iters = 0
    converged = False
    for iters in range(1, max_iters + 1):
        if not math.isfinite(f):
            raise RuntimeError("NLL diverged (non-finite)")
        gnorm2 = float(g @ g)
        if math.sqrt(gnorm2) < 1e-12:
            converged = True
            break
        step = 1.0
        accepted = False
        for _ in range(50):
            cand = theta - step * g
            try:
                f_new, g_new = _mean_nll_grad(kind, cand, seqs)
            except (ValueError, OverflowError):
                f_new = math.inf
                g_new = g
            if math.isfinite(f_new) and f_new <= f - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent direction progress left
            break
        rel_change = abs(f - f_new) / max(abs(f), 1e-12)
        theta, f, g = cand, f_new, g_new
        if rel_change < tol:
            converged = True
            break
    return _unpack(kind, theta), FitMeta(nll=f, iters=iters, converged=converged)


# ---------------------------------------------------------------------------
# first-order-moment prediction


def _tail_state(model: TemporalModelParams, history: np.ndarray):
    """Collapse the history for intensity evaluation beyond its last event."""
    t_n = history[-1]
    if model.kind == "hawkes":
        g = model.alpha / model.beta * float(np.exp(-(t_n - history) / model.beta).sum())
        return t_n, g
    return t_n, history.size


def _tail_intensity(model, state, t: float) -> float:
    t_n, aux = state
    if model.kind == "poisson":
        return model.lam
    if model.kind == "hawkes":
        return model.mu + aux * math.exp(-(t - t_n) / model.beta)
    return math.exp(model.mu + model.alpha * t - model.beta * aux)


def _tail_compensator(model, state, t: float) -> float:
    t_n, aux = state
    dt = t - t_n
    if model.kind == "poisson":
        return model.lam * dt
    if model.kind == "hawkes":
        return model.mu * dt + aux * model.beta * (1.0 - math.exp(-dt / model.beta))
    if model.alpha == 0.0:
        return math.exp(model.mu - model.beta * aux) * dt
    base = math.exp(model.mu - model.beta * aux) / model.alpha
    return base * (math.exp(model.alpha * t) - math.exp(model.alpha * t_n))


def expected_next_time(model: TemporalModelParams, history) -> float:
    """E[t_{n+1} | history] by quadrature, truncated where survival < 1e-10."""
    history = np.asarray(history, dtype=float)
    if history.size == 0:
        raise ValueError("nonempty history required")
    state = _tail_state(model, history)
    t_n = state[0]

    lam0 = _tail_intensity(model, state, t_n)
    scale = 1.0 / max(lam0, 1e-12)
    hi = t_n + scale
    for _ in range(400):
        if _tail_compensator(model, state, hi) >= _LOG_SURVIVAL_CUTOFF:
            break
        hi = t_n + (hi - t_n) * 2.0
        if hi - t_n > 1e15 * max(scale, 1.0):
            raise ValueError(
                "defective next-event distribution: survival does not vanish"
            )
    else:
        raise ValueError("defective next-event distribution: survival does not vanish")

    def integrand(t):
        return t * _tail_intensity(model, state, t) * math.exp(-_tail_compensator(model, state, t))

    val, err = quad(integrand, t_n, hi, limit=400, epsabs=1e-12, epsrel=1e-10)
    if not math.isfinite(val):
        raise RuntimeError("expected_next_time quadrature failed")
    return val


def sequential_predict(model: TemporalModelParams, history, l_out: int) -> np.ndarray:
    """Repeated first-order-moment prediction, feeding each t-hat back in."""
    if l_out < 1:
        raise ValueError("l_out must be >= 1")
    work = list(np.asarray(history, dtype=float))
    out = []
    for _ in range(l_out):
        t_hat = expected_next_time(model, np.asarray(work))
        out.append(t_hat)
        work.append(t_hat)
    return np.asarray(out)


def next_event_log_density(model: TemporalModelParams, history, t: float) -> float:
    """log p(next event at t | events strictly before t).

    Events in `history` at or after t are ignored, which keeps the density
    well-defined when a predicted event overshoots the true next time.
    """
    history = np.asarray(history, dtype=float)
    past = history[history < t]
    lam = intensity(model, t, past)
    if lam <= 0:
        raise ValueError(f"zero intensity at t={t}")
    a = float(past[-1]) if past.size else 0.0
    return math.log(lam) - compensator(model, a, t, past)


# ---------------------------------------------------------------------------
# combined baseline loss (regularized NLL)


def baseline_loss(
    sequence_times,
    n_in: int,
    time_model: TemporalModelParams | None = None,
    space_model=None,
    locations=None,
    lam1: float = 0.1,
    lam2: float = 0.1,
    phase: str = "train",
) -> dict:
    """Regularized baseline loss over one sequence of n_in + L events.

    Training phase: NLL of the n_in history events, plus NLL of the L
    output events conditioned on the sequentially updated history (the
    time history absorbs each predicted time; the spatial history absorbs
    true events), plus lam1 * sum |t - t_hat| + lam2 * sum ||x - x_hat||.
    Test phase: only the output-event NLL terms, no regularizers.

    `space_model` needs log_density(x, t, hist_x, hist_t) and
    predict_mean(t, hist_x, hist_t); see the gmm module.
    """
    if phase not in ("train", "test"):
        raise ValueError(f"unknown phase {phase!r}")
    if time_model is None and space_model is None:
        raise ValueError("need at least one of time_model, space_model")
    times = np.asarray(sequence_times, dtype=float)
    l_out = times.size - n_in
    if l_out < 1:
        raise ValueError("sequence must extend past n_in")
    locs = None if locations is None else np.asarray(locations, dtype=float)
    if space_model is not None and locs is None:
        raise ValueError("space_model requires locations")

    out: dict = {
        "nll_time_hist": 0.0,
        "nll_space_hist": 0.0,
        "nll_time_out": 0.0,
        "nll_space_out": 0.0,
        "reg_time": 0.0,
        "reg_space": 0.0,
        "t_hat": [],
        "x_hat": [],
    }

    if time_model is not None:
        out["nll_time_hist"] = nll_temporal(time_model, times[:n_in], t_start=0.0)
        work = list(times[:n_in])
        for l in range(n_in, times.size):
            t_hat = expected_next_time(time_model, np.asarray(work))
            out["t_hat"].append(t_hat)
            out["nll_time_out"] -= next_event_log_density(
                time_model, np.asarray(work), times[l]
            )
            out["reg_time"] += abs(times[l] - t_hat)
            work.append(t_hat)

    if space_model is not None:
        hist_nll = space_model.history_nll(locs[:n_in], times[:n_in])
        out["nll_space_hist"] = hist_nll
        for l in range(n_in, times.size):
            x_hat = space_model.predict_mean(times[l], locs[:l], times[:l])
            out["x_hat"].append(x_hat)
            out["nll_space_out"] -= space_model.log_density(
                locs[l], times[l], locs[:l], times[:l]
            )
            out["reg_space"] += float(np.linalg.norm(locs[l] - x_hat))

    if phase == "train":
        out["loss"] = (
            out["nll_time_hist"]
            + out["nll_space_hist"]
            + out["nll_time_out"]
            + out["nll_space_out"]
            + lam1 * out["reg_time"]
            + lam2 * out["reg_space"]
        )
    else:
        out["loss"] = out["nll_time_out"] + out["nll_space_out"]
    return out

"""Conditional Gaussian-mixture spatial baselines.

Two variants. The pairwise model places one Gaussian with a shared
diagonal bandwidth on every historical location and weights it by an
exponential time decay exp(-gamma * (t - t_i)); bandwidth and decay are
fit by gradient descent on the sequential held-in NLL. The K-cluster
model is a plain EM mixture fit on the historical locations (kmeans++
seeding, full covariances). Both expose the interface baseline_loss
expects: log_density, predict_mean, history_nll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


def _gauss_logpdf_diag(x: np.ndarray, centers: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """log N(x; centers_i, diag(scales^2)) for each center, vectorized."""
    z = (x - centers) / scales
    return -0.5 * (z * z).sum(axis=-1) - np.log(scales).sum() - 0.5 * x.shape[-1] * LOG_2PI


@dataclass(frozen=True)
class GmmPairwiseParams:
    scales: np.ndarray  # per-dimension bandwidth, positive
    gamma: float  # time-decay coefficient, positive

    def __post_init__(self):
        if np.any(np.asarray(self.scales) <= 0):
            raise ValueError("bandwidth scales must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


class PairwiseGmm:
    """Time-decayed kernel mixture over historical locations."""

    def __init__(self, params: GmmPairwiseParams):
        self.params = params

    def _log_weights(self, t: float, hist_t: np.ndarray) -> np.ndarray:
        logw = -self.params.gamma * (t - hist_t)
        return logw - logsumexp(logw)

    def log_density(self, x, t: float, hist_x, hist_t):
        """Mixture log-density at x; x may be a single point or a batch (..., d)."""
        hist_x = np.asarray(hist_x, dtype=float)
        hist_t = np.asarray(hist_t, dtype=float)
        if hist_x.shape[0] < 1:
            raise ValueError("pairwise GMM needs history")
        logw = self._log_weights(t, hist_t)
        x = np.asarray(x, dtype=float)
        batched = x.ndim > 1
        comp = _gauss_logpdf_diag(x[..., None, :], hist_x, self.params.scales)
        out = logsumexp(logw + comp, axis=-1)
        return out if batched else float(out)

    def predict_mean(self, t: float, hist_x, hist_t) -> np.ndarray:
        hist_x = np.asarray(hist_x, dtype=float)
        w = np.exp(self._log_weights(t, np.asarray(hist_t, dtype=float)))
        return w @ hist_x

    def history_nll(self, hist_x, hist_t) -> float:
        """Sequential NLL of each history event given the ones before it."""
        hist_x = np.asarray(hist_x, dtype=float)
        hist_t = np.asarray(hist_t, dtype=float)
        n = hist_x.shape[0]
        if n < 2:
            raise ValueError("pairwise GMM needs >= 2 history events")
        comp = _gauss_logpdf_diag(hist_x[:, None, :], hist_x[None, :, :], self.params.scales)
        decay = -self.params.gamma * (hist_t[:, None] - hist_t[None, :])
        past = np.tril(np.ones((n, n), dtype=bool), k=-1)
        scores = np.where(past, decay, -np.inf)
        with np.errstate(invalid="ignore"):  # row 0 has no past and is dropped
            logw = scores - logsumexp(scores, axis=1, keepdims=True)
            logp = logsumexp(np.where(past, logw + comp, -np.inf), axis=1)
        return float(-logp[1:].sum())


def gmm_pairwise_fit(
    hist_x,
    hist_t,
    init_scales=None,
    init_gamma: float = 1.0,
    max_iters: int = 200,
    tol: float = 1e-8,
) -> GmmPairwiseParams:
    """Pick (bandwidth, gamma) minimizing the sequential held-in NLL.

    `hist_x`/`hist_t` may also be lists of per-sequence arrays; the
    objective then sums over sequences. Gradient descent with backtracking
    on log-parameters; gradients by central differences (d+1 parameters).
    """
    if isinstance(hist_x, (list, tuple)):
        pairs = [
            (np.asarray(x, dtype=float), np.asarray(t, dtype=float))
            for x, t in zip(hist_x, hist_t)
        ]
    else:
        pairs = [(np.asarray(hist_x, dtype=float), np.asarray(hist_t, dtype=float))]
    if any(x.shape[0] < 2 for x, _ in pairs):
        raise ValueError("pairwise GMM needs >= 2 history events")
    d = pairs[0][0].shape[1]
    pooled_std = float(np.mean([x.std(axis=0).mean() for x, _ in pairs]))
    scales0 = np.full(d, pooled_std + 1e-3) if init_scales is None else np.asarray(init_scales, float)
    theta = np.concatenate([np.log(scales0), [math.log(init_gamma)]])

    def objective(th):
        model = PairwiseGmm(GmmPairwiseParams(scales=np.exp(th[:d]), gamma=math.exp(th[d])))
        return sum(model.history_nll(x, t) for x, t in pairs)

    f = objective(theta)
    h = 1e-5
    for _ in range(max_iters):
        grad = np.zeros_like(theta)
        for j in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[j] += h
            down[j] -= h
            grad[j] = (objective(up) - objective(down)) / (2 * h)
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) < 1e-10:
            break
        step, accepted = 1.0, False
        for _ in range(40):
            cand = theta - step * grad
            f_new = objective(cand)
            if math.isfinite(f_new) and f_new <= f - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel = abs(f - f_new) / max(abs(f), 1e-12)
        theta, f = cand, f_new
        if rel < tol:
            break
    return GmmPairwiseParams(scales=np.exp(theta[:d]), gamma=math.exp(theta[d]))


# ---------------------------------------------------------------------------
# K-cluster mixture


@dataclass(frozen=True)
class GmmKClusterParams:
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d) SPD
    weights: np.ndarray  # (K,), sums to 1

    def __post_init__(self):
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-8:
            raise ValueError("mixture weights must sum to 1")


def _gauss_logpdf_full(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.size
    chol = np.linalg.cholesky(cov)
    diff = np.atleast_2d(x) - mean
    y = np.linalg.solve(chol, diff.T).T
    return (
        -0.5 * (y * y).sum(axis=-1)
        - np.log(np.diag(chol)).sum()
        - 0.5 * d * LOG_2PI
    )


def gmm_kcluster_logprob(x, params: GmmKClusterParams) -> float:
    x = np.asarray(x, dtype=float)
    parts = [
        math.log(params.weights[k]) + float(_gauss_logpdf_full(x, params.means[k], params.covs[k])[0])
        for k in range(params.weights.size)
    ]
    return float(logsumexp(parts))


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [((x - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(x[rng.choice(n, p=probs)])
    return np.asarray(centers)


def gmm_kcluster_fit(
    hist_x,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 200,
    tol: float = 1e-9,
    reg: float = 1e-6,
) -> tuple[GmmKClusterParams, list[float]]:
    """EM fit with kmeans++ seeding; returns params and the log-lik trace."""
    x = np.asarray(hist_x, dtype=float)
    n, d = x.shape
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= K <= n events, got K={k}, n={n}")

    base_cov = np.atleast_2d(np.cov(x.T)) + reg * np.eye(d)
    for attempt in range(3):
        means = _kmeanspp_init(x, k, rng)
        covs = np.stack([base_cov.copy() for _ in range(k)])
        weights = np.full(k, 1.0 / k)
        trace: list[float] = []
        failed = False
        for _ in range(max_iters):
            logp = np.stack(
                [
                    np.log(weights[j]) + _gauss_logpdf_full(x, means[j], covs[j])
                    for j in range(k)
                ],
                axis=1,
            )  # (n, K)
            norm = logsumexp(logp, axis=1)
            trace.append(float(norm.sum()))
            resp = np.exp(logp - norm[:, None])
            nk = resp.sum(axis=0)
            if np.any(nk < 1e-10):
                failed = True  # empty cluster: reseed
                break
            weights = nk / n
            means = (resp.T @ x) / nk[:, None]
            for j in range(k):
                diff = x - means[j]
                covs[j] = (resp[:, j][:, None] * diff).T @ diff / nk[j] + reg * np.eye(d)
            if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * max(abs(trace[-2]), 1.0):
                break
        if not failed:
            return (
                GmmKClusterParams(means=means, covs=covs, weights=weights),
                trace,
            )
    raise RuntimeError(f"EM produced an empty cluster in {attempt + 1} attempts")


class KClusterGmm:
    """baseline_loss adapter: mixture fit once on the history, then frozen."""

    def __init__(self, k: int, rng: np.random.Generator):
        self.k = k
        self.rng = rng
        self.params: GmmKClusterParams | None = None

    def _ensure_fit(self, hist_x) -> GmmKClusterParams:
        if self.params is None:
            self.params, _ = gmm_kcluster_fit(hist_x, self.k, self.rng)
        return self.params

    def log_density(self, x, t, hist_x, hist_t) -> float:
        return gmm_kcluster_logprob(x, self._ensure_fit(hist_x))

    def predict_mean(self, t, hist_x, hist_t) -> np.ndarray:
        p = self._ensure_fit(hist_x)
        return p.weights @ p.means

    def history_nll(self, hist_x, hist_t) -> float:
        p = self._ensure_fit(hist_x)
        return -float(sum(gmm_kcluster_logprob(xi, p) for xi in np.asarray(hist_x, float)))

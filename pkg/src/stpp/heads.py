"""Probabilistic heads and bijective flows over decoder states.

The time path maps each scalar decoder state to the rate of an exponential
base density, then pushes it through a softsign bijection z -> z/(1+z) so
the modeled interval lives in (0, 1) (a softplus bijection is available
behind the config flag). The space path maps (decoder state, interval) to
a multivariate Gaussian via a Cholesky factor and pushes it through a
RealNVP stack of affine coupling layers conditioned on the decoder state.

Log-densities follow the change-of-variables rule: pull the target back
through the inverse map, score it under the base density, and subtract the
forward log-determinant evaluated at the pulled-back point.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .neural import NetConfig

LOG_2PI = math.log(2.0 * math.pi)
BETA_FLOOR = 1e-6
CHOL_FLOOR = 1e-4
SCALE_BOUND = 3.0  # tanh bound on coupling log-scales


# ---------------------------------------------------------------------------
# exponential head


def exp_head(leaves, h_t_l: Tensor) -> Tensor:
    """Per-slot exponential mean beta = softplus(affine(h)) + floor, (b, L, 1)."""
    raw = ad.linear(h_t_l, leaves["time.head.w"], leaves["time.head.b"])
    return ad.softplus(raw) + ad.constant(BETA_FLOOR)


def exp_logprob(z: Tensor, beta: Tensor) -> Tensor:
    """log[(1/beta) exp(-z/beta)] for z > 0."""
    if np.any(z.value <= 0):
        raise ValueError("exponential density needs z > 0")
    return -ad.log(beta) - z / beta


def exp_sample(beta: np.ndarray, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Inverse-CDF draws, shape (n_samples, *beta.shape)."""
    u = rng.random((n_samples, *beta.shape))
    return -beta * np.log1p(-u)


# ---------------------------------------------------------------------------
# multivariate normal head


def _build_lower_triangular(diag: Tensor, off: Tensor, d: int) -> Tensor:
    """Assemble (..., d, d) lower-triangular from diagonal and off-diagonal parts."""
    batch_shape = diag.shape[:-1]
    zero = ad.constant(np.zeros(batch_shape + (1,)))
    entries = []
    k = 0
    for i in range(d):
        for j in range(d):
            if i == j:
                entries.append(diag[..., i : i + 1])
            elif i > j:
                entries.append(off[..., k : k + 1])
                k += 1
            else:
                entries.append(zero)
    flat = ad.concat(entries, axis=-1)
    return ad.reshape(flat, batch_shape + (d, d))


def mvn_head(leaves, cfg: NetConfig, h_x_l: Tensor, t_l: Tensor) -> tuple[Tensor, Tensor]:
    """(mu (b,L,d), chol (b,L,d,d)) learned from the decoder state and time."""
    d = cfg.d_space
    inp = ad.concat([h_x_l, t_l], axis=-1)
    h = ad.elu(ad.linear(inp, leaves["space.head.fc0.w"], leaves["space.head.fc0.b"]))
    out = ad.linear(h, leaves["space.head.fc1.w"], leaves["space.head.fc1.b"])
    mu = out[..., :d]
    diag = ad.softplus(out[..., d : 2 * d]) + ad.constant(CHOL_FLOOR)
    off = out[..., 2 * d :]
    return mu, _build_lower_triangular(diag, off, d)


def mvn_logprob(z: Tensor, mu: Tensor, chol: Tensor) -> Tensor:
    """Gaussian log-density with covariance chol cholT; batched, fused backward."""
    l_val = chol.value
    d = l_val.shape[-1]
    if np.any(~np.isfinite(np.diagonal(l_val, axis1=-2, axis2=-1))):
        raise ValueError("non-finite Cholesky diagonal")
    r = z.value - mu.value
    y = np.linalg.solve(l_val, r[..., None])[..., 0]
    diag = np.diagonal(l_val, axis1=-2, axis2=-1)
    with np.errstate(over="ignore"):  # extreme targets surface as -inf logp
        logp = -0.5 * (y * y).sum(-1) - np.log(diag).sum(-1) - 0.5 * d * LOG_2PI

    def bwd(g):
        w = np.linalg.solve(np.swapaxes(l_val, -1, -2), y[..., None])[..., 0]
        gz = -g[..., None] * w
        gmu = g[..., None] * w
        outer = w[..., :, None] * y[..., None, :]
        eye = np.zeros_like(l_val)
        idx = np.arange(d)
        eye[..., idx, idx] = 1.0 / diag
        glt = g[..., None, None] * (outer - eye)
        glt *= np.tril(np.ones((d, d)))
        return gz, gmu, glt

    return Tensor(logp, (z, mu, chol), bwd)


def mvn_sample(
    mu: np.ndarray, chol: np.ndarray, rng: np.random.Generator, n_samples: int
) -> np.ndarray:
    """mu + chol eps, shape (n_samples, *mu.shape)."""
    eps = rng.normal(size=(n_samples, *mu.shape))
    return mu + np.einsum("...ij,s...j->s...i", chol, eps)


# ---------------------------------------------------------------------------
# scalar bijections for the interval distribution


def softsign_fwd(z: Tensor) -> Tensor:
    if np.any(z.value <= 0):
        raise ValueError("softsign forward needs z > 0")
    return z / (z + ad.constant(1.0))


def softsign_inv(t: Tensor) -> Tensor:
    if np.any(t.value <= 0) or np.any(t.value >= 1):
        bad = np.argwhere((t.value <= 0) | (t.value >= 1))[:5]
        raise ValueError(
            f"softsign inverse needs t in (0, 1); offending indices {bad.tolist()}, "
            f"values {[float(t.value[tuple(i)]) for i in bad]}"
        )
    return t / (ad.constant(1.0) - t)


def softsign_logdet(z: Tensor) -> Tensor:
    """log |dF/dz| = -2 log(1 + z)."""
    return ad.constant(-2.0) * ad.log(z + ad.constant(1.0))


def softplus_fwd(z: Tensor) -> Tensor:
    if np.any(z.value <= 0):
        raise ValueError("softplus forward needs z > 0")
    return ad.softplus(z)


def softplus_inv(t: Tensor) -> Tensor:
    if np.any(t.value <= math.log(2.0)):
        raise ValueError("softplus inverse needs t > log 2")
    return ad.log(ad.exp(t) - ad.constant(1.0))


def softplus_logdet(z: Tensor) -> Tensor:
    """log sigmoid(z) = -softplus(-z)."""
    return -ad.softplus(-z)


_TIME_FLOWS = {
    "softsign": (softsign_fwd, softsign_inv, softsign_logdet),
    "softplus": (softplus_fwd, softplus_inv, softplus_logdet),
}


# ---------------------------------------------------------------------------
# RealNVP coupling stack (conditioned on the decoder state)


def coupling_masks(d: int, n_layers: int) -> list[np.ndarray]:
    """Alternating binary masks; consecutive layers cover all coordinates."""
    return [((np.arange(d) + i) % 2 == 0).astype(float) for i in range(n_layers)]


def _coupling_nets(leaves, layer: int, masked: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
    inp = ad.concat([masked, context], axis=-1)
    s_h = ad.elu(ad.linear(inp, leaves[f"space.flow.layer{layer}.s.fc0.w"], leaves[f"space.flow.layer{layer}.s.fc0.b"]))
    s = ad.linear(s_h, leaves[f"space.flow.layer{layer}.s.fc1.w"], leaves[f"space.flow.layer{layer}.s.fc1.b"])
    s = ad.tanh(s) * ad.constant(SCALE_BOUND)
    u_h = ad.elu(ad.linear(inp, leaves[f"space.flow.layer{layer}.u.fc0.w"], leaves[f"space.flow.layer{layer}.u.fc0.b"]))
    u = ad.linear(u_h, leaves[f"space.flow.layer{layer}.u.fc1.w"], leaves[f"space.flow.layer{layer}.u.fc1.b"])
    return s, u


def realnvp_fwd(leaves, cfg: NetConfig, z: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
    """Base -> data map; returns (x, log|det J|) accumulated over layers."""
    if cfg.d_space < 2:
        raise ValueError("RealNVP needs dimension >= 2")
    x = z
    logdet = ad.constant(np.zeros(z.shape[:-1]))
    for i, mask in enumerate(coupling_masks(cfg.d_space, cfg.flow_layers)):
        m = ad.constant(mask)
        inv_m = ad.constant(1.0 - mask)
        masked = x * m
        s, u = _coupling_nets(leaves, i, masked, context)
        s = s * inv_m
        u = u * inv_m
        x = masked + inv_m * (x * ad.exp(s) + u)
        logdet = logdet + ad.sum_(s, axis=-1)
    return x, logdet


def realnvp_inv(leaves, cfg: NetConfig, x: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
    """Data -> base map; returns (z, forward log|det J| evaluated at z)."""
    if cfg.d_space < 2:
        raise ValueError("RealNVP needs dimension >= 2")
    z = x
    logdet = ad.constant(np.zeros(x.shape[:-1]))
    for i, mask in reversed(list(enumerate(coupling_masks(cfg.d_space, cfg.flow_layers)))):
        m = ad.constant(mask)
        inv_m = ad.constant(1.0 - mask)
        masked = z * m
        s, u = _coupling_nets(leaves, i, masked, context)
        s = s * inv_m
        u = u * inv_m
        z = masked + inv_m * ((z - u) * ad.exp(-s))
        logdet = logdet + ad.sum_(s, axis=-1)
    return z, logdet


# ---------------------------------------------------------------------------
# end-to-end log-densities (change of variables)


def log_prob_time(leaves, cfg: NetConfig, t_target, h_t_l: Tensor) -> Tensor:
    """log p(t | h_t_l) per slot, (b, L); t_target are normalized intervals."""
    _, inv, logdet = _TIME_FLOWS[cfg.time_flow]
    t = t_target if isinstance(t_target, Tensor) else ad.constant(t_target)
    beta = exp_head(leaves, h_t_l)
    z = inv(t)
    logp = exp_logprob(z, beta) - logdet(z)
    return ad.reshape(logp, logp.shape[:-1])


def log_prob_space(leaves, cfg: NetConfig, x_target, t_l, h_x_l: Tensor) -> Tensor:
    """log p(x | t, h_x_l) per slot, (b, L)."""
    x = x_target if isinstance(x_target, Tensor) else ad.constant(x_target)
    t = t_l if isinstance(t_l, Tensor) else ad.constant(t_l)
    mu, chol = mvn_head(leaves, cfg, h_x_l, t)
    z, logdet = realnvp_inv(leaves, cfg, x, h_x_l)
    return mvn_logprob(z, mu, chol) - logdet


# ---------------------------------------------------------------------------
# sampling through the flows (no gradients needed)


def sample_time(leaves, cfg: NetConfig, h_t_l: np.ndarray, rng, n_samples: int) -> np.ndarray:
    """Interval draws, (n_samples, b, L)."""
    fwd, _, _ = _TIME_FLOWS[cfg.time_flow]
    beta = exp_head(leaves, ad.constant(h_t_l)).value
    z = exp_sample(beta, rng, n_samples)
    return fwd(ad.constant(z)).value[..., 0]


def sample_space(
    leaves, cfg: NetConfig, h_x_l: np.ndarray, t_l: np.ndarray, rng, n_samples: int
) -> np.ndarray:
    """Location draws, (n_samples, b, L, d)."""
    mu, chol = mvn_head(leaves, cfg, ad.constant(h_x_l), ad.constant(t_l))
    z = mvn_sample(mu.value, chol.value, rng, n_samples)
    n, b, l, d = z.shape
    ctx = np.broadcast_to(h_x_l, (n, b, l, d)).reshape(n * b, l, d)
    x, _ = realnvp_fwd(leaves, cfg, ad.constant(z.reshape(n * b, l, d)), ad.constant(ctx))
    return x.value.reshape(n, b, l, d)

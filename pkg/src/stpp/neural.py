"""Transformer encoder-decoder over event tuples, one stream for time and
one for space.

Both streams see the same raw [t, x, m] tuples but own every parameter
separately. The encoder self-attends over the n history events under a
causal mask. The decoder's first attention block self-attends over the L
output slots, also causally; its second block cross-attends to the encoder
states with no look-ahead mask, so every output slot sees the whole
history. Final feed-forward layers project the time stream to one
dimension per slot and the space stream to the spatial dimension, the
shapes the probabilistic heads expect.

Decoder inputs may be all zeros (the test-phase convention and the
zero-decoder ablation); the fixed sinusoidal positional embedding keeps
the slots distinguishable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .rng import STREAM_INIT, make_rng

STREAMS = ("time", "space")
ABLATIONS = ("none", "zero_encoder", "zero_decoder")


@dataclass(frozen=True)
class NetConfig:
    d_space: int
    n_in: int = 497
    l_out: int = 3
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 6
    dropout: float = 0.1
    ffn_mult: int = 4
    flow_layers: int = 4
    flow_hidden: int = 32
    mvn_hidden: int = 32
    time_flow: str = "softsign"  # or "softplus"

    def __post_init__(self):
        # d_k = d_v = floor(d_model / n_heads); projections are rectangular
        # when n_heads does not divide d_model (e.g. 64-dim model, 6 heads)
        if self.d_model < self.n_heads:
            raise ValueError(f"d_model {self.d_model} smaller than n_heads {self.n_heads}")
        if self.d_space not in (0, 2, 3):
            raise ValueError(f"d_space must be 2 or 3 for the network, got {self.d_space}")
        if self.time_flow not in ("softsign", "softplus"):
            raise ValueError(f"unknown time_flow {self.time_flow!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_in(self) -> int:
        return self.d_space + 2  # [t, x, m]


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal position signal, (length, d_model)."""
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def causal_mask(length: int) -> np.ndarray:
    """mask[i, j] True where slot i must not see slot j (the future)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


# ---------------------------------------------------------------------------
# parameter initialization


def _init_affine(store: ParamStore, rng, name: str, fan_in: int, fan_out: int, scale: float = 1.0):
    bound = scale / math.sqrt(fan_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def _init_layer_norm(store: ParamStore, name: str, dim: int):
    store.add(f"{name}.gamma", np.ones(dim))
    store.add(f"{name}.beta", np.zeros(dim))


def _init_attention(store: ParamStore, rng, name: str, cfg: "NetConfig"):
    inner = cfg.n_heads * cfg.d_k
    for proj in ("wq", "wk", "wv"):
        _init_affine(store, rng, f"{name}.{proj}", cfg.d_model, inner)
    _init_affine(store, rng, f"{name}.wo", inner, cfg.d_model)


def _init_block(store, rng, name, cfg: "NetConfig", cross: bool):
    d_model, ffn_mult = cfg.d_model, cfg.ffn_mult
    _init_attention(store, rng, f"{name}.self_attn", cfg)
    _init_layer_norm(store, f"{name}.ln1", d_model)
    if cross:
        _init_attention(store, rng, f"{name}.cross_attn", cfg)
        _init_layer_norm(store, f"{name}.ln2", d_model)
    _init_affine(store, rng, f"{name}.ffn.fc0", d_model, ffn_mult * d_model)
    _init_affine(store, rng, f"{name}.ffn.fc1", ffn_mult * d_model, d_model)
    _init_layer_norm(store, f"{name}.ln{'3' if cross else '2'}", d_model)


def init_params(cfg: NetConfig, seed: int) -> ParamStore:
    """Every learnable array of the network, heads, and flows, by name."""
    rng = make_rng(seed, STREAM_INIT)
    store = ParamStore()
    for st in STREAMS:
        for side in ("enc", "dec"):
            _init_affine(store, rng, f"{st}.{side}.embed.fc0", cfg.d_in, cfg.d_model)
            _init_affine(store, rng, f"{st}.{side}.embed.fc1", cfg.d_model, cfg.d_model)
        for i in range(cfg.n_layers):
            _init_block(store, rng, f"{st}.enc.layer{i}", cfg, cross=False)
            _init_block(store, rng, f"{st}.dec.layer{i}", cfg, cross=True)
        out_dim = 1 if st == "time" else cfg.d_space
        _init_affine(store, rng, f"{st}.out.fc0", cfg.d_model, cfg.d_model)
        _init_affine(store, rng, f"{st}.out.fc1", cfg.d_model, out_dim)

    # probabilistic heads; small output scale keeps the flows near identity
    _init_affine(store, rng, "time.head", 1, 1, scale=0.01)
    _init_affine(store, rng, "space.head.fc0", cfg.d_space + 1, cfg.mvn_hidden)
    _init_affine(
        store, rng, "space.head.fc1", cfg.mvn_hidden,
        cfg.d_space + cfg.d_space * (cfg.d_space + 1) // 2, scale=0.01,
    )
    for i in range(cfg.flow_layers):
        for net in ("s", "u"):
            _init_affine(store, rng, f"space.flow.layer{i}.{net}.fc0", 2 * cfg.d_space, cfg.flow_hidden)
            _init_affine(store, rng, f"space.flow.layer{i}.{net}.fc1", cfg.flow_hidden, cfg.d_space, scale=0.01)
    return store


# ---------------------------------------------------------------------------
# forward pieces


def _affine(leaves, name: str, x: Tensor) -> Tensor:
    return ad.linear(x, leaves[f"{name}.w"], leaves[f"{name}.b"])


def embed_events(leaves, prefix: str, events: Tensor, cfg: NetConfig, train: bool, rng) -> Tensor:
    """Two-layer ELU embedding to d_model plus positional encoding."""
    h = _affine(leaves, f"{prefix}.embed.fc1", ad.elu(_affine(leaves, f"{prefix}.embed.fc0", events)))
    pe = positional_encoding(h.shape[-2], cfg.d_model)
    h = h + ad.constant(pe)
    return ad.dropout(h, cfg.dropout, train, rng)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with optional boolean mask (True = hide)."""
    d_k = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k, axes=_swap_last_two(k.ndim)))
    scores = scores * ad.constant(1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.all(axis=-1).any():
            raise ValueError("attention mask hides every key for some query")
        scores = ad.masked_fill(scores, mask, -np.inf)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _swap_last_two(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d_model = x.shape
    x = ad.reshape(x, (b, length, n_heads, d_model // n_heads))
    return ad.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, d_k = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, length, h * d_k))


def multi_head_attention(
    leaves, name: str, q_in: Tensor, kv_in: Tensor, mask, cfg: NetConfig, train: bool, rng
) -> Tensor:
    q = _split_heads(_affine(leaves, f"{name}.wq", q_in), cfg.n_heads)
    k = _split_heads(_affine(leaves, f"{name}.wk", kv_in), cfg.n_heads)
    v = _split_heads(_affine(leaves, f"{name}.wv", kv_in), cfg.n_heads)
    out = _merge_heads(attention(q, k, v, mask))
    out = _affine(leaves, f"{name}.wo", out)
    return ad.dropout(out, cfg.dropout, train, rng)


def _sublayer_norm(leaves, name: str, x: Tensor, sub: Tensor) -> Tensor:
    return ad.layer_norm(x + sub, leaves[f"{name}.gamma"], leaves[f"{name}.beta"])


def _ffn(leaves, name: str, x: Tensor, cfg: NetConfig, train: bool, rng) -> Tensor:
    h = ad.elu(_affine(leaves, f"{name}.fc0", x))
    return ad.dropout(_affine(leaves, f"{name}.fc1", h), cfg.dropout, train, rng)


def encoder_forward(
    leaves, stream: str, embedded: Tensor, cfg: NetConfig, train: bool = False, rng=None
) -> Tensor:
    """n_layers of causally masked self-attention + feed-forward."""
    mask = causal_mask(embedded.shape[-2])
    x = embedded
    for i in range(cfg.n_layers):
        name = f"{stream}.enc.layer{i}"
        att = multi_head_attention(leaves, f"{name}.self_attn", x, x, mask, cfg, train, rng)
        x = _sublayer_norm(leaves, f"{name}.ln1", x, att)
        x = _sublayer_norm(leaves, f"{name}.ln2", x, _ffn(leaves, f"{name}.ffn", x, cfg, train, rng))
    return x


def decoder_forward(
    leaves,
    stream: str,
    embedded_out: Tensor,
    encoder_h: Tensor,
    cfg: NetConfig,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Masked self-attention over the L slots, then unmasked cross-attention
    to the encoder states, then the output projection."""
    self_mask = causal_mask(embedded_out.shape[-2])
    x = embedded_out
    for i in range(cfg.n_layers):
        name = f"{stream}.dec.layer{i}"
        att = multi_head_attention(leaves, f"{name}.self_attn", x, x, self_mask, cfg, train, rng)
        x = _sublayer_norm(leaves, f"{name}.ln1", x, att)
        cross = multi_head_attention(
            leaves, f"{name}.cross_attn", x, encoder_h, None, cfg, train, rng
        )
        x = _sublayer_norm(leaves, f"{name}.ln2", x, cross)
        x = _sublayer_norm(leaves, f"{name}.ln3", x, _ffn(leaves, f"{name}.ffn", x, cfg, train, rng))
    return _affine(leaves, f"{stream}.out.fc1", ad.elu(_affine(leaves, f"{stream}.out.fc0", x)))


def network_forward(
    leaves,
    cfg: NetConfig,
    enc_events: np.ndarray,
    dec_events: np.ndarray,
    train: bool = False,
    rng=None,
    ablation: str = "none",
) -> tuple[Tensor, Tensor]:
    """Full pass; returns (h_t_l (b, L, 1), h_x_l (b, L, d_space)).

    `ablation='zero_encoder'` blanks the encoder input content (history
    independence); `'zero_decoder'` blanks the decoder input (its train-time
    information channel). Test-time decoding passes zeros as dec_events.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    enc_events = np.asarray(enc_events, dtype=float)
    dec_events = np.asarray(dec_events, dtype=float)
    if ablation == "zero_encoder":
        enc_events = np.zeros_like(enc_events)
    if ablation == "zero_decoder":
        dec_events = np.zeros_like(dec_events)

    outputs = []
    for stream in STREAMS:
        enc_embedded = embed_events(leaves, f"{stream}.enc", ad.constant(enc_events), cfg, train, rng)
        h_enc = encoder_forward(leaves, stream, enc_embedded, cfg, train, rng)
        dec_embedded = embed_events(leaves, f"{stream}.dec", ad.constant(dec_events), cfg, train, rng)
        outputs.append(decoder_forward(leaves, stream, dec_embedded, h_enc, cfg, train, rng))
    return outputs[0], outputs[1]

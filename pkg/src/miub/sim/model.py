"""Toy transformer with low-rank adapters on every dense layer.

The frozen stack is a standard pre-norm causal transformer (RMS norm
without learnable scale, ReLU feed-forward, no biases, no dropout).  Each
of the six dense sites per layer (attention q/k/v/o, FFN up/down) carries a
low-rank adapter pair: ``A`` drawn from a seeded Gaussian with standard
deviation 1/rank, ``B`` all zeros, so an untrained model computes exactly
the frozen model's outputs.  Only A and B receive gradients; base weights
are created write-protected and never change.

Sharing compresses the model: within the second half of the stack, each
consecutive group of ``share_k`` layers reuses one canonical layer's frozen
weights (adapters stay per-layer).  All math runs in float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from ..capture import SITES
from .config import MAX_SEQ_LEN, ToySimConfig

NORM_EPS = 1e-6


def _site_dims(cfg: ToySimConfig) -> dict[str, tuple[int, int]]:
    d, f = cfg.d_model, cfg.d_ffn
    return {
        "attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d), "attn_o": (d, d),
        "ffn_up": (d, f), "ffn_down": (f, d),
    }


@dataclass
class ToyModel:
    config: ToySimConfig
    embed: np.ndarray                       # (vocab, d), frozen
    pos: np.ndarray                         # (MAX_SEQ_LEN, d), frozen
    out_w: np.ndarray                       # (d, vocab), frozen
    base_layers: list[dict[str, np.ndarray]]  # original per-layer weights, frozen
    share_map: tuple[int, ...]              # layer -> canonical layer
    lora_a: list[dict[str, np.ndarray]]     # (d_in, rank), trainable
    lora_b: list[dict[str, np.ndarray]]     # (rank, d_out), trainable

    def base_weight(self, layer: int, site: str) -> np.ndarray:
        return self.base_layers[self.share_map[layer]][site]


def build_model(config: ToySimConfig) -> ToyModel:
    """Construct a model deterministically from its seed.

    Base weights depend only on (architecture, seed), not on rank or
    share_k, so compression levels of the same seed are directly comparable.
    """
    rng_base = np.random.default_rng([config.seed, 0])
    rng_lora = np.random.default_rng([config.seed, 1])
    d = config.d_model

    def frozen(arr: np.ndarray) -> np.ndarray:
        arr.setflags(write=False)
        return arr

    embed = frozen(rng_base.normal(0.0, 1.0, size=(config.vocab, d)))
    pos = frozen(rng_base.normal(0.0, 0.02, size=(MAX_SEQ_LEN, d)))
    out_w = frozen(rng_base.normal(0.0, d ** -0.5, size=(d, config.vocab)))

    dims = _site_dims(config)
    base_layers = []
    for _ in range(config.layers):
        layer = {}
        for site in SITES:
            d_in, d_out = dims[site]
            layer[site] = frozen(rng_base.normal(0.0, d_in ** -0.5,
                                                 size=(d_in, d_out)))
        base_layers.append(layer)

    lora_a, lora_b = [], []
    for _ in range(config.layers):
        a_layer, b_layer = {}, {}
        for site in SITES:
            d_in, d_out = dims[site]
            a_layer[site] = rng_lora.normal(0.0, 1.0 / config.rank,
                                            size=(d_in, config.rank))
            b_layer[site] = np.zeros((config.rank, d_out))
        lora_a.append(a_layer)
        lora_b.append(b_layer)

    model = ToyModel(
        config=config, embed=embed, pos=pos, out_w=out_w,
        base_layers=base_layers,
        share_map=tuple(range(config.layers)),
        lora_a=lora_a, lora_b=lora_b,
    )
    return apply_layer_sharing(model, config.share_k)


def apply_layer_sharing(model: ToyModel, share_k: int) -> ToyModel:
    """Tie every group of share_k consecutive layers in the second half.

    The first half of the stack is left untouched.  Sharing is expressed
    through the layer->canonical map over the original weights, so it is
    non-destructive and reapplicable; share_k=1 restores the identity map.
    """
    layers = model.config.layers
    if (layers // 2) % share_k != 0:
        raise ValueError(f"share_k={share_k} must divide layers/2={layers // 2}")
    half = layers // 2
    share_map = []
    for layer in range(layers):
        if layer < half:
            share_map.append(layer)
        else:
            share_map.append(half + ((layer - half) // share_k) * share_k)
    return replace(model, share_map=tuple(share_map))


def effective_base_params(model: ToyModel) -> int:
    """Frozen parameter count with shared layers counted once."""
    total = model.embed.size + model.pos.size + model.out_w.size
    for layer in sorted(set(model.share_map)):
        total += sum(w.size for w in model.base_layers[layer].values())
    return int(total)


def lora_param_count(model: ToyModel) -> int:
    return int(sum(a.size for layer in model.lora_a for a in layer.values())
               + sum(b.size for layer in model.lora_b for b in layer.values()))


def base_checksum(model: ToyModel) -> str:
    """SHA-256 over every frozen array; unchanged by any amount of training."""
    h = hashlib.sha256()
    for arr in (model.embed, model.pos, model.out_w):
        h.update(arr.tobytes())
    for layer in model.base_layers:
        for site in SITES:
            h.update(layer[site].tobytes())
    return h.hexdigest()


def _rmsnorm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x * inv, inv


def _rmsnorm_bwd(dy: np.ndarray, x: np.ndarray, inv: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    dot = np.sum(dy * x, axis=-1, keepdims=True)
    return inv * dy - (inv ** 3 / d) * x * dot


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _pool(arr: np.ndarray, pooling: str) -> np.ndarray:
    # arr is (batch, time, features); reduce the time axis
    if pooling == "last_token":
        return arr[:, -1].copy()
    return arr.mean(axis=1)


def forward(model: ToyModel, tokens: np.ndarray,
            need_cache: bool = False, capture_sites: bool = False,
            capture_pooling: str = "last_token"):
    """Run the model on a (batch, time) token array.

    Returns ``(logits_last, cache)`` where ``logits_last`` is (batch, vocab)
    at the final position.  With ``need_cache`` the cache supports
    :func:`backward`; with ``capture_sites`` it additionally records, for
    every adapter site, the frozen output and the low-rank delta pooled
    over positions per ``capture_pooling`` (last token or mean).
    """
    cfg = model.config
    if capture_pooling not in ("last_token", "mean"):
        raise ValueError(f"unknown capture pooling {capture_pooling!r}")
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    scale = dh ** -0.5
    neg = np.full((T, T), -np.inf)
    mask = np.triu(neg, k=1)[None, None, :, :]

    x = model.embed[tokens] + model.pos[:T][None, :, :]
    layers_cache = []
    site_records = []

    for layer in range(cfg.layers):
        W = {s: model.base_weight(layer, s) for s in SITES}
        A = model.lora_a[layer]
        Bm = model.lora_b[layer]

        x_in = x
        h1, inv1 = _rmsnorm(x_in)
        proj = {}
        z = {}
        rec = {}
        for s in ("attn_q", "attn_k", "attn_v"):
            base_out = h1 @ W[s]
            z[s] = h1 @ A[s]
            delta = z[s] @ Bm[s]
            proj[s] = base_out + delta
            if capture_sites:
                rec[s] = (_pool(base_out, capture_pooling),
                          _pool(delta, capture_pooling))

        qh = proj["attn_q"].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        kh = proj["attn_k"].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        vh = proj["attn_v"].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + mask
        attn = _softmax_rows(scores)
        ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)

        o_base = ctx @ W["attn_o"]
        z_o = ctx @ A["attn_o"]
        o_delta = z_o @ Bm["attn_o"]
        if capture_sites:
            rec["attn_o"] = (_pool(o_base, capture_pooling),
                             _pool(o_delta, capture_pooling))
        x_mid = x_in + o_base + o_delta

        h2, inv2 = _rmsnorm(x_mid)
        u_base = h2 @ W["ffn_up"]
        z_u = h2 @ A["ffn_up"]
        u_delta = z_u @ Bm["ffn_up"]
        u = u_base + u_delta
        act = np.maximum(u, 0.0)
        d_base = act @ W["ffn_down"]
        z_d = act @ A["ffn_down"]
        d_delta = z_d @ Bm["ffn_down"]
        if capture_sites:
            rec["ffn_up"] = (_pool(u_base, capture_pooling),
                             _pool(u_delta, capture_pooling))
            rec["ffn_down"] = (_pool(d_base, capture_pooling),
                               _pool(d_delta, capture_pooling))
        x = x_mid + d_base + d_delta

        if need_cache:
            layers_cache.append({
                "x_in": x_in, "h1": h1, "inv1": inv1,
                "z_q": z["attn_q"], "z_k": z["attn_k"], "z_v": z["attn_v"],
                "qh": qh, "kh": kh, "vh": vh, "attn": attn, "ctx": ctx,
                "z_o": z_o, "x_mid": x_mid, "h2": h2, "inv2": inv2,
                "z_u": z_u, "u": u, "act": act, "z_d": z_d,
            })
        if capture_sites:
            site_records.append(rec)

    h3, inv3 = _rmsnorm(x)
    logits_last = h3[:, -1] @ model.out_w

    cache = {
        "tokens": tokens, "layers": layers_cache,
        "x_final": x, "h3": h3, "inv3": inv3,
        "site_records": site_records,
    }
    return logits_last, cache


def loss_from_logits(logits_last: np.ndarray, targets: np.ndarray):
    """Mean cross entropy (nats) at the final position, plus dlogits."""
    probs = _softmax_rows(logits_last)
    B = logits_last.shape[0]
    picked = probs[np.arange(B), targets]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(B), targets] -= 1.0
    dlogits /= B
    return loss, dlogits


def _contract(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # sum over (batch, time): (B,T,i),(B,T,j) -> (i,j), via one BLAS call.
    i = left.shape[-1]
    j = right.shape[-1]
    return left.reshape(-1, i).T @ right.reshape(-1, j)


def backward(model: ToyModel, cache: dict, dlogits_last: np.ndarray):
    """Gradients of the loss with respect to every adapter matrix.

    Base weights are frozen, so only dA/dB per (layer, site) are produced;
    activations still backpropagate through the whole stack.
    """
    cfg = model.config
    B, T = cache["tokens"].shape
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    scale = dh ** -0.5

    grads_a = [{s: np.zeros_like(model.lora_a[l][s]) for s in SITES}
               for l in range(cfg.layers)]
    grads_b = [{s: np.zeros_like(model.lora_b[l][s]) for s in SITES}
               for l in range(cfg.layers)]

    d_h3 = np.zeros_like(cache["h3"])
    d_h3[:, -1] = dlogits_last @ model.out_w.T
    dx = _rmsnorm_bwd(d_h3, cache["x_final"], cache["inv3"])

    for layer in range(cfg.layers - 1, -1, -1):
        c = cache["layers"][layer]
        W = {s: model.base_weight(layer, s) for s in SITES}
        A = model.lora_a[layer]
        Bm = model.lora_b[layer]
        ga, gb = grads_a[layer], grads_b[layer]

        # FFN block: x = x_mid + act @ (W_down + A_down B_down)
        d_out = dx
        gb["ffn_down"] += _contract(c["z_d"], d_out)
        d_zd = d_out @ Bm["ffn_down"].T
        ga["ffn_down"] += _contract(c["act"], d_zd)
        d_act = d_out @ W["ffn_down"].T + d_zd @ A["ffn_down"].T
        d_u = d_act * (c["u"] > 0.0)
        gb["ffn_up"] += _contract(c["z_u"], d_u)
        d_zu = d_u @ Bm["ffn_up"].T
        ga["ffn_up"] += _contract(c["h2"], d_zu)
        d_h2 = d_u @ W["ffn_up"].T + d_zu @ A["ffn_up"].T
        dx = dx + _rmsnorm_bwd(d_h2, c["x_mid"], c["inv2"])

        # Attention block: x_mid = x_in + ctx @ (W_o + A_o B_o)
        d_o = dx
        gb["attn_o"] += _contract(c["z_o"], d_o)
        d_zo = d_o @ Bm["attn_o"].T
        ga["attn_o"] += _contract(c["ctx"], d_zo)
        d_ctx = (d_o @ W["attn_o"].T + d_zo @ A["attn_o"].T)
        d_ctx_h = d_ctx.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        attn, vh, qh, kh = c["attn"], c["vh"], c["qh"], c["kh"]
        d_attn = d_ctx_h @ vh.transpose(0, 1, 3, 2)
        d_vh = attn.transpose(0, 1, 3, 2) @ d_ctx_h
        d_scores = attn * (d_attn - np.sum(attn * d_attn, axis=-1, keepdims=True))
        d_qh = (d_scores @ kh) * scale
        d_kh = (d_scores.transpose(0, 1, 3, 2) @ qh) * scale

        d_h1 = np.zeros_like(c["h1"])
        for s, dhh in (("attn_q", d_qh), ("attn_k", d_kh), ("attn_v", d_vh)):
            d_proj = dhh.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            zkey = {"attn_q": "z_q", "attn_k": "z_k", "attn_v": "z_v"}[s]
            gb[s] += _contract(c[zkey], d_proj)
            d_z = d_proj @ Bm[s].T
            ga[s] += _contract(c["h1"], d_z)
            d_h1 += d_proj @ W[s].T + d_z @ A[s].T
        dx = dx + _rmsnorm_bwd(d_h1, c["x_in"], c["inv1"])

    return grads_a, grads_b

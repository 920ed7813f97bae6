"""Transformer encoder towers in numpy with hand-rolled reverse-mode gradients.

One tower = token embeddings + learned positional embeddings + pre-norm
transformer layers + final normalization. The sequence embedding is the
hidden state at the BOS position, L2-normalized. `forward` optionally
returns a cache (the tape) that `backward` consumes to produce gradients
for every parameter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .tokenizer import PAD_ID

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatch(ValueError):
    pass


class NonPositiveTemperature(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Tower shape. Desk-scale defaults; the full-size configuration
    (dim=256, layers=6, heads=8, ff_dim=1024, max_len=384) stays expressible."""

    vocab_size: int
    max_len: int = 64
    dim: int = 32
    layers: int = 2
    heads: int = 4
    ff_dim: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.vocab_size, self.max_len, self.dim, self.layers, self.heads, self.ff_dim) <= 0:
            raise ShapeMismatch("all config dimensions must be positive")
        if self.dim % self.heads != 0:
            raise ShapeMismatch(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeMismatch(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.dim, cfg.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + f"attn.{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ff.w1"] = (d, f)
        shapes[p + "ff.b1"] = (f,)
        shapes[p + "ff.w2"] = (f, d)
        shapes[p + "ff.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    return shapes


def param_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # resample draws outside +-2 sigma
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_params(
    cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Truncated normal (sigma=0.02) for embeddings and linear weights,
    ones/zeros for normalization, zero biases."""
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _trunc_normal(rng, shape, 0.02, dtype)
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def template_trainable_keys(cfg: EncoderConfig, top_layers: int) -> set[str]:
    """Keys updated when only the top `top_layers` layers plus the final
    normalization are trainable. Embeddings stay frozen."""
    keys = {"final_ln.g", "final_ln.b"}
    first = max(cfg.layers - top_layers, 0)
    for name in parameter_shapes(cfg):
        if name.startswith("layers."):
            idx = int(name.split(".")[1])
            if idx >= first:
                keys.add(name)
    return keys


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return cdf + x * pdf


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_backward(dout, cache):
    xhat, inv, g = cache
    dg = (dout * xhat).sum(tuple(range(dout.ndim - 1)))
    db = dout.sum(tuple(range(dout.ndim - 1)))
    dxhat = dout * g
    n = xhat.shape[-1]
    dx = inv * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    # the two mean terms above already divide by n
    return dx, dg, db


def _dropout(x, rate, rng):
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype)
    return x * mask / keep, mask


def forward(
    params: dict[str, np.ndarray],
    cfg: EncoderConfig,
    ids: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    need_cache: bool = False,
):
    """Encode a (B, T) id batch into (B, dim) unit-norm embeddings.

    PAD positions are masked out of attention, so the pooled embedding is
    invariant to padding beyond the true sequence. Returns (z, cache); the
    cache is None unless `need_cache`.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeMismatch(f"ids must be (B, T), got shape {ids.shape}")
    B, T = ids.shape
    if T > cfg.max_len:
        raise ShapeMismatch(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ShapeMismatch("token id out of vocabulary range")
    if train and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")

    dtype = params["tok_emb"].dtype
    use_dropout = train and cfg.dropout > 0.0
    neg = np.asarray(-1e9 if dtype == np.float32 else -1e30, dtype=dtype)
    key_bias = np.where(ids == PAD_ID, neg, dtype.type(0.0))[:, None, None, :]

    h = params["tok_emb"][ids] + params["pos_emb"][:T][None, :, :]
    H, dh = cfg.heads, cfg.head_dim
    inv_scale = dtype.type(1.0 / np.sqrt(dh))
    layer_caches = []

    for i in range(cfg.layers):
        p = f"layers.{i}."
        x1, ln1_cache = _layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        q = x1 @ params[p + "attn.wq"] + params[p + "attn.bq"]
        k = x1 @ params[p + "attn.wk"] + params[p + "attn.bk"]
        v = x1 @ params[p + "attn.wv"] + params[p + "attn.bv"]
        q = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) * inv_scale + key_bias
        scores -= scores.max(-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(-1, keepdims=True)
        if use_dropout:
            att_d, att_mask = _dropout(att, cfg.dropout, rng)
        else:
            att_d, att_mask = att, None
        ctx = (att_d @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        attn_out = ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        if use_dropout:
            attn_out, attn_out_mask = _dropout(attn_out, cfg.dropout, rng)
        else:
            attn_out_mask = None
        h_mid = h + attn_out

        x2, ln2_cache = _layernorm(h_mid, params[p + "ln2.g"], params[p + "ln2.b"])
        u_pre = x2 @ params[p + "ff.w1"] + params[p + "ff.b1"]
        u = _gelu(u_pre)
        f_out = u @ params[p + "ff.w2"] + params[p + "ff.b2"]
        if use_dropout:
            f_out, f_mask = _dropout(f_out, cfg.dropout, rng)
        else:
            f_mask = None
        h_next = h_mid + f_out

        if need_cache:
            layer_caches.append(
                dict(
                    h_in=h, x1=x1, ln1=ln1_cache, q=q, k=k, v=v, att=att,
                    att_d=att_d, att_mask=att_mask, ctx=ctx,
                    attn_out_mask=attn_out_mask, h_mid=h_mid, x2=x2,
                    ln2=ln2_cache, u_pre=u_pre, u=u, f_mask=f_mask,
                )
            )
        h = h_next

    pooled = h[:, 0, :]
    y, final_cache = _layernorm(pooled, params["final_ln.g"], params["final_ln.b"])
    norm = np.sqrt((y * y).sum(-1, keepdims=True))
    z = y / norm

    cache = None
    if need_cache:
        cache = dict(
            ids=ids, T=T, layers=layer_caches, final=final_cache,
            z=z, norm=norm, inv_scale=inv_scale, use_dropout=use_dropout,
        )
    return z, cache


def backward(
    params: dict[str, np.ndarray],
    cfg: EncoderConfig,
    cache: dict,
    dz: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dz."""
    grads = zeros_like_params(params)
    ids, T = cache["ids"], cache["T"]
    B = ids.shape[0]
    H, dh = cfg.heads, cfg.head_dim
    inv_scale = cache["inv_scale"]
    keep = 1.0 - cfg.dropout

    z, norm = cache["z"], cache["norm"]
    dy = (dz - z * (z * dz).sum(-1, keepdims=True)) / norm
    dpooled, dg, db = _layernorm_backward(dy, cache["final"])
    grads["final_ln.g"] += dg
    grads["final_ln.b"] += db

    dH = np.zeros((B, T, cfg.dim), dtype=dz.dtype)
    dH[:, 0, :] = dpooled

    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # feed-forward sublayer
        df = dH.copy()
        if c["f_mask"] is not None:
            df = df * c["f_mask"] / keep
        u_flat = c["u"].reshape(-1, cfg.ff_dim)
        df_flat = df.reshape(-1, cfg.dim)
        grads[p + "ff.w2"] += u_flat.T @ df_flat
        grads[p + "ff.b2"] += df_flat.sum(0)
        du = df @ params[p + "ff.w2"].T
        du_pre = du * _gelu_grad(c["u_pre"])
        x2_flat = c["x2"].reshape(-1, cfg.dim)
        du_pre_flat = du_pre.reshape(-1, cfg.ff_dim)
        grads[p + "ff.w1"] += x2_flat.T @ du_pre_flat
        grads[p + "ff.b1"] += du_pre_flat.sum(0)
        dx2 = du_pre @ params[p + "ff.w1"].T
        dh_mid_ln, dg, db = _layernorm_backward(dx2, c["ln2"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dH = dH + dh_mid_ln

        # attention sublayer
        da = dH.copy()
        if c["attn_out_mask"] is not None:
            da = da * c["attn_out_mask"] / keep
        ctx_flat = c["ctx"].reshape(-1, cfg.dim)
        da_flat = da.reshape(-1, cfg.dim)
        grads[p + "attn.wo"] += ctx_flat.T @ da_flat
        grads[p + "attn.bo"] += da_flat.sum(0)
        dctx = (da @ params[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt_d = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["att_d"].transpose(0, 1, 3, 2) @ dctx
        if c["att_mask"] is not None:
            datt = datt_d * c["att_mask"] / keep
        else:
            datt = datt_d
        att = c["att"]
        dscores = att * (datt - (datt * att).sum(-1, keepdims=True))
        dq = dscores @ c["k"] * inv_scale
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"] * inv_scale

        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        x1_flat = c["x1"].reshape(-1, cfg.dim)
        for name, dmat in (("q", dq), ("k", dk), ("v", dv)):
            dmat_flat = dmat.reshape(-1, cfg.dim)
            grads[p + f"attn.w{name}"] += x1_flat.T @ dmat_flat
            grads[p + f"attn.b{name}"] += dmat_flat.sum(0)
        dx1 = (
            dq @ params[p + "attn.wq"].T
            + dk @ params[p + "attn.wk"].T
            + dv @ params[p + "attn.wv"].T
        )
        dh_ln, dg, db = _layernorm_backward(dx1, c["ln1"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dH = dH + dh_ln

    np.add.at(grads["tok_emb"], ids, dH)
    grads["pos_emb"][:T] += dH.sum(0)
    return grads


def score(zp: np.ndarray, zt: np.ndarray, temp: float):
    """Temperature-scaled cosine similarity of already-normalized embeddings."""
    if temp <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temp}")
    return (np.asarray(zp) * np.asarray(zt)).sum(-1) / temp


class Tower:
    """One encoder tower: config plus its parameter dict."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        return cls(config, init_params(config, rng, dtype))

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def forward(self, ids, train=False, rng=None, need_cache=False):
        return forward(self.params, self.config, ids, train=train, rng=rng, need_cache=need_cache)

    def encode(self, ids) -> np.ndarray:
        """Eval-mode embeddings, no tape."""
        z, _ = forward(self.params, self.config, ids, train=False)
        return z

    def backward(self, cache, dz):
        return backward(self.params, self.config, cache, dz)

    def param_count(self) -> int:
        return param_count(self.config)

    def copy(self) -> "Tower":
        return Tower(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Tower":
        return Tower(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

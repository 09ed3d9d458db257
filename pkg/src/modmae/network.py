"""Modality-conditioned encoder/decoder with hand-written backprop.

Parameters live in a flat dict of named numpy tensors (linear maps stored
as (in, out), applied as x @ w + b).  Every forward helper returns a cache
consumed by the matching backward helper, which accumulates parameter
gradients into a dict.  Gradients are exact; the finite-difference check in
`objectives.gradcheck` verifies them end to end.

Blocks are pre-norm with conditional layer normalization (CLN) at both
normalization sites: scale and shift are affine functions of the token's
modality embedding, parameterized as gamma = 1 + W_g m + b_g so that zero
init reproduces plain LN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, EmptySessionError, RangeError, ShapeError
from .tokenizer import SessionTokens, TokenBatch, assemble_from_patches

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class NetConfig:
    """Desk-scale defaults; encoder wider and deeper than the decoder."""

    d_e: int = 64
    d_d: int = 32
    layers_enc: int = 4
    layers_dec: int = 2
    heads: int = 4
    d_m: int = 64
    patch_size: tuple[int, int, int] = (16, 16, 16)
    max_grid: tuple[int, int, int] = (8, 8, 8)
    n_classes: int = 2
    n_labels: int = 1

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.max_grid = tuple(int(g) for g in self.max_grid)
        if self.d_e % self.heads or self.d_d % self.heads:
            raise ConfigError(
                f"d_e={self.d_e} and d_d={self.d_d} must divide into "
                f"{self.heads} heads"
            )

    @property
    def p3(self) -> int:
        return int(np.prod(self.patch_size))

    def to_dict(self) -> dict:
        return {
            "d_e": self.d_e, "d_d": self.d_d,
            "layers_enc": self.layers_enc, "layers_dec": self.layers_dec,
            "heads": self.heads, "d_m": self.d_m,
            "patch_size": list(self.patch_size),
            "max_grid": list(self.max_grid),
            "n_classes": self.n_classes, "n_labels": self.n_labels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetConfig":
        kwargs = dict(data)
        for key in ("patch_size", "max_grid"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std re-sampled."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (std * x).astype(dtype)


def init_params(
    cfg: NetConfig,
    seed: int = 0,
    scheme: str = "train",
    dtype=np.float32,
) -> dict[str, np.ndarray]:
    """Build the parameter tree.

    scheme "train": truncated-normal(0.02) projections, zero CLN generators
    and heads, unit-norm mask token.  scheme "dense": every tensor nonzero,
    used by gradient checking so no path is degenerate at init.
    """
    if scheme not in ("train", "dense"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    dense = scheme == "dense"
    p: dict[str, np.ndarray] = {}

    def proj(shape):
        return trunc_normal(rng, shape, 0.05 if dense else 0.02, dtype)

    def zeros(shape):
        if dense:
            return trunc_normal(rng, shape, 0.02, dtype)
        return np.zeros(shape, dtype=dtype)

    p["patch_proj.w"] = proj((cfg.p3, cfg.d_e))
    p["patch_proj.b"] = zeros((cfg.d_e,))
    for axis in range(3):
        p[f"pos_enc.{axis}"] = proj((cfg.max_grid[axis], cfg.d_e))
        p[f"pos_dec.{axis}"] = proj((cfg.max_grid[axis], cfg.d_d))
    p["mod_proj.enc"] = proj((cfg.d_m, cfg.d_e))
    p["mod_proj.dec"] = proj((cfg.d_m, cfg.d_d))

    def block(prefix: str, d: int):
        for site in ("cln1", "cln2"):
            p[f"{prefix}.{site}.wg"] = zeros((cfg.d_m, d))
            p[f"{prefix}.{site}.bg"] = zeros((d,))
            p[f"{prefix}.{site}.wb"] = zeros((cfg.d_m, d))
            p[f"{prefix}.{site}.bb"] = zeros((d,))
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.attn.{name}"] = proj((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            p[f"{prefix}.attn.{name}"] = zeros((d,))
        p[f"{prefix}.mlp.w1"] = proj((d, 4 * d))
        p[f"{prefix}.mlp.b1"] = zeros((4 * d,))
        p[f"{prefix}.mlp.w2"] = proj((4 * d, d))
        p[f"{prefix}.mlp.b2"] = zeros((d,))

    for i in range(cfg.layers_enc):
        block(f"enc.{i}", cfg.d_e)
    for i in range(cfg.layers_dec):
        block(f"dec.{i}", cfg.d_d)

    token = rng.standard_normal(cfg.d_d)
    p["mask_token"] = (token / np.linalg.norm(token)).astype(dtype)
    p["enc2dec.w"] = proj((cfg.d_e, cfg.d_d))
    p["enc2dec.b"] = zeros((cfg.d_d,))
    p["recon.w"] = zeros((cfg.d_d, cfg.p3))
    p["recon.b"] = zeros((cfg.p3,))
    p["head_cls.w"] = zeros((cfg.d_e, cfg.n_classes))
    p["head_cls.b"] = zeros((cfg.n_classes,))
    p["head_seg.w"] = zeros((cfg.d_e, cfg.p3 * cfg.n_labels))
    p["head_seg.b"] = zeros((cfg.p3 * cfg.n_labels,))
    return p


def _acc(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------- primitives

def cln(x, memb, wg, bg, wb, bb, eps: float = LN_EPS):
    """Conditional layer norm: gamma(m) * (x - mu) / sqrt(var + eps) + beta(m)."""
    x = np.atleast_2d(np.asarray(x))
    memb = np.atleast_2d(np.asarray(memb))
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    gamma = 1.0 + memb @ wg + bg
    beta = memb @ wb + bb
    out = gamma * xhat + beta
    return out[0] if out.shape[0] == 1 else out


def _cln_fwd(x, memb, p, name, eps=LN_EPS):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gamma = 1.0 + memb @ p[f"{name}.wg"] + p[f"{name}.bg"]
    beta = memb @ p[f"{name}.wb"] + p[f"{name}.bb"]
    return gamma * xhat + beta, (xhat, inv, gamma, memb, name)


def _cln_bwd(dy, cache, p, grads):
    xhat, inv, gamma, memb, name = cache
    dxg = dy * xhat
    _acc(grads, f"{name}.wg", memb.T @ dxg)
    _acc(grads, f"{name}.bg", dxg.sum(axis=0))
    _acc(grads, f"{name}.wb", memb.T @ dy)
    _acc(grads, f"{name}.bb", dy.sum(axis=0))
    dxhat = dy * gamma
    mean_d = dxhat.mean(axis=1, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=1, keepdims=True)
    return inv * (dxhat - mean_d - xhat * mean_dx)


def _gelu_fwd(x):
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * phi, (x, phi)


def _gelu_bwd(dy, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * (phi + x * pdf)


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _attn_fwd(u, p, name, heads):
    q = u @ p[f"{name}.wq"] + p[f"{name}.bq"]
    k = u @ p[f"{name}.wk"] + p[f"{name}.bk"]
    v = u @ p[f"{name}.wv"] + p[f"{name}.bv"]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = qh @ kh.transpose(0, 2, 1) * scale
    scores -= scores.max(axis=2, keepdims=True)  # shift-invariant, exact
    expo = np.exp(scores)
    attn = expo / expo.sum(axis=2, keepdims=True)
    ctx = _merge_heads(attn @ vh)
    out = ctx @ p[f"{name}.wo"] + p[f"{name}.bo"]
    return out, (u, qh, kh, vh, attn, ctx, scale, name, heads)


def _attn_bwd(dy, cache, p, grads):
    u, qh, kh, vh, attn, ctx, scale, name, heads = cache
    _acc(grads, f"{name}.wo", ctx.T @ dy)
    _acc(grads, f"{name}.bo", dy.sum(axis=0))
    dctx = _split_heads(dy @ p[f"{name}.wo"].T, heads)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 2, 1) @ qh * scale
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    du = np.zeros_like(u)
    for d_out, w, b in ((dq, "wq", "bq"), (dk, "wk", "bk"), (dv, "wv", "bv")):
        _acc(grads, f"{name}.{w}", u.T @ d_out)
        _acc(grads, f"{name}.{b}", d_out.sum(axis=0))
        du += d_out @ p[f"{name}.{w}"].T
    return du


def _mlp_fwd(x, p, name):
    pre = x @ p[f"{name}.w1"] + p[f"{name}.b1"]
    act, cg = _gelu_fwd(pre)
    out = act @ p[f"{name}.w2"] + p[f"{name}.b2"]
    return out, (x, cg, act, name)


def _mlp_bwd(dy, cache, p, grads):
    x, cg, act, name = cache
    _acc(grads, f"{name}.w2", act.T @ dy)
    _acc(grads, f"{name}.b2", dy.sum(axis=0))
    dact = dy @ p[f"{name}.w2"].T
    dpre = _gelu_bwd(dact, cg)
    _acc(grads, f"{name}.w1", x.T @ dpre)
    _acc(grads, f"{name}.b1", dpre.sum(axis=0))
    return dpre @ p[f"{name}.w1"].T


def _block_fwd(x, memb, p, name, heads):
    normed1, c_ln1 = _cln_fwd(x, memb, p, f"{name}.cln1")
    att, c_att = _attn_fwd(normed1, p, f"{name}.attn", heads)
    mid = x + att
    normed2, c_ln2 = _cln_fwd(mid, memb, p, f"{name}.cln2")
    ff, c_mlp = _mlp_fwd(normed2, p, f"{name}.mlp")
    return mid + ff, (c_ln1, c_att, c_ln2, c_mlp)


def _block_bwd(dy, cache, p, grads):
    c_ln1, c_att, c_ln2, c_mlp = cache
    dmid = dy + _cln_bwd(_mlp_bwd(dy, c_mlp, p, grads), c_ln2, p, grads)
    return dmid + _cln_bwd(_attn_bwd(dmid, c_att, p, grads), c_ln1, p, grads)


# ------------------------------------------------------------ session passes

def _session_inputs(tokens: SessionTokens, dtype):
    ps = tokens.patch_set
    memb_all = tokens.token_embeddings().astype(dtype)
    vis = tokens.visible_indices()
    hid = tokens.hidden_indices()
    return ps, memb_all, vis, hid


def _encode_session_fwd(p, cfg: NetConfig, x_vis, memb_vis, coords_vis):
    t = x_vis @ p["patch_proj.w"] + p["patch_proj.b"]
    for axis in range(3):
        if coords_vis[:, axis].max(initial=0) >= cfg.max_grid[axis]:
            raise RangeError(
                f"grid coordinate exceeds max_grid {cfg.max_grid} on axis {axis}"
            )
        t = t + p[f"pos_enc.{axis}"][coords_vis[:, axis]]
    t = t + memb_vis @ p["mod_proj.enc"]
    caches = []
    for i in range(cfg.layers_enc):
        t, cache = _block_fwd(t, memb_vis, p, f"enc.{i}", cfg.heads)
        caches.append(cache)
    pooled = t.mean(axis=0)
    return t, pooled, caches


def _encode_session_bwd(dlat, dpooled, p, cfg, grads,
                        x_vis, memb_vis, coords_vis, caches):
    dt = dlat + dpooled[None, :] / x_vis.shape[0]
    for i in reversed(range(cfg.layers_enc)):
        dt = _block_bwd(dt, caches[i], p, grads)
    _acc(grads, "patch_proj.w", x_vis.T @ dt)
    _acc(grads, "patch_proj.b", dt.sum(axis=0))
    for axis in range(3):
        key = f"pos_enc.{axis}"
        if key not in grads:
            grads[key] = np.zeros_like(p[key])
        np.add.at(grads[key], coords_vis[:, axis], dt)
    _acc(grads, "mod_proj.enc", memb_vis.T @ dt)


def _decode_session_fwd(p, cfg: NetConfig, latents,
                        vis_idx, vis_memb,
                        hid_idx, hid_coords, hid_memb):
    z_vis = latents @ p["enc2dec.w"] + p["enc2dec.b"]
    t_hid = np.broadcast_to(p["mask_token"], (len(hid_idx), cfg.d_d)).copy()
    for axis in range(3):
        t_hid += p[f"pos_dec.{axis}"][hid_coords[:, axis]]
    t_hid += hid_memb @ p["mod_proj.dec"]

    # interleave by global patch index so outputs are position-keyed
    order = np.argsort(np.concatenate([vis_idx, hid_idx]), kind="stable")
    seq = np.concatenate([z_vis, t_hid])[order]
    memb_seq = np.concatenate([vis_memb, hid_memb])[order]
    hidden_flag = np.concatenate([
        np.zeros(len(vis_idx), dtype=bool), np.ones(len(hid_idx), dtype=bool)
    ])[order]

    caches = []
    for i in range(cfg.layers_dec):
        seq, cache = _block_fwd(seq, memb_seq, p, f"dec.{i}", cfg.heads)
        caches.append(cache)
    h_hidden = seq[hidden_flag]
    recon = h_hidden @ p["recon.w"] + p["recon.b"]
    state = (latents, order, hidden_flag, h_hidden, caches)
    return recon, state


def _decode_session_bwd(drecon, state, p, cfg, grads,
                        vis_memb, hid_coords, hid_memb):
    latents, order, hidden_flag, h_hidden, caches = state
    _acc(grads, "recon.w", h_hidden.T @ drecon)
    _acc(grads, "recon.b", drecon.sum(axis=0))
    dseq = np.zeros((len(order), cfg.d_d), dtype=drecon.dtype)
    dseq[hidden_flag] = drecon @ p["recon.w"].T
    for i in reversed(range(cfg.layers_dec)):
        dseq = _block_bwd(dseq, caches[i], p, grads)
    dcat = np.empty_like(dseq)
    dcat[order] = dseq
    n_vis = latents.shape[0]
    dz_vis, dt_hid = dcat[:n_vis], dcat[n_vis:]

    _acc(grads, "enc2dec.w", latents.T @ dz_vis)
    _acc(grads, "enc2dec.b", dz_vis.sum(axis=0))
    _acc(grads, "mask_token", dt_hid.sum(axis=0))
    for axis in range(3):
        key = f"pos_dec.{axis}"
        if key not in grads:
            grads[key] = np.zeros_like(p[key])
        np.add.at(grads[key], hid_coords[:, axis], dt_hid)
    _acc(grads, "mod_proj.dec", hid_memb.T @ dt_hid)
    return dz_vis @ p["enc2dec.w"].T  # contribution to d latents


# ------------------------------------------------------------- batch passes

@dataclass
class ForwardState:
    """Everything model_backward needs, plus the user-facing outputs."""

    latents: list[np.ndarray]
    pooled: np.ndarray               # (B, d_e)
    recons: list[np.ndarray]         # per session, (n_hidden, p^3)
    _session_data: list = None
    _caches: list = None


def model_forward(params, cfg: NetConfig, batch: TokenBatch,
                  with_decoder: bool = True) -> ForwardState:
    """Full forward pass; attention never crosses session boundaries."""
    dtype = params["patch_proj.w"].dtype
    latents_list, pooled_rows, recons = [], [], []
    session_data, caches = [], []
    for tokens in batch.sessions:
        ps, memb_all, vis, hid = _session_inputs(tokens, dtype)
        if vis.size == 0:
            raise EmptySessionError(
                f"session {tokens.case_id!r} has no visible tokens"
            )
        x_vis = ps.patches[vis].astype(dtype)
        memb_vis = memb_all[vis]
        coords_vis = ps.coords[vis]
        lat, pooled, enc_caches = _encode_session_fwd(
            params, cfg, x_vis, memb_vis, coords_vis
        )
        dec_state = None
        recon = np.zeros((0, cfg.p3), dtype=dtype)
        if with_decoder and hid.size:
            recon, dec_state = _decode_session_fwd(
                params, cfg, lat, vis, memb_vis,
                hid, ps.coords[hid], memb_all[hid],
            )
        latents_list.append(lat)
        pooled_rows.append(pooled)
        recons.append(recon)
        session_data.append((x_vis, memb_vis, coords_vis, vis, hid,
                             memb_all, ps))
        caches.append((enc_caches, dec_state))
    return ForwardState(
        latents=latents_list,
        pooled=np.stack(pooled_rows),
        recons=recons,
        _session_data=session_data,
        _caches=caches,
    )


def model_backward(params, cfg: NetConfig, state: ForwardState,
                   d_pooled=None, d_recons=None,
                   d_latents=None) -> dict[str, np.ndarray]:
    """Accumulate gradients for the whole batch in fixed session order."""
    grads: dict[str, np.ndarray] = {}
    n = len(state.latents)
    for s in range(n):
        x_vis, memb_vis, coords_vis, vis, hid, memb_all, ps = \
            state._session_data[s]
        enc_caches, dec_state = state._caches[s]
        dlat = np.zeros_like(state.latents[s])
        if d_latents is not None and d_latents[s] is not None:
            dlat = dlat + d_latents[s]
        if d_recons is not None and dec_state is not None \
                and d_recons[s] is not None and d_recons[s].size:
            dlat += _decode_session_bwd(
                d_recons[s], dec_state, params, cfg, grads,
                memb_vis, ps.coords[hid], memb_all[hid],
            )
        dpool = (d_pooled[s] if d_pooled is not None
                 else np.zeros(cfg.d_e, dtype=dlat.dtype))
        _encode_session_bwd(dlat, dpool, params, cfg, grads,
                            x_vis, memb_vis, coords_vis, enc_caches)
    for key, value in params.items():
        if key not in grads:
            grads[key] = np.zeros_like(value)
        else:
            grads[key] = grads[key].astype(value.dtype, copy=False)
    return grads


# ------------------------------------------------------------------ wrappers

def encode(batch: TokenBatch, params, cfg: NetConfig):
    """Latents per visible token plus one mean-pooled vector per session."""
    state = model_forward(params, cfg, batch, with_decoder=False)
    return state.latents, state.pooled


def decode(latents, batch: TokenBatch, params, cfg: NetConfig):
    """Reconstructed voxel vectors for each hidden patch of each session."""
    dtype = params["patch_proj.w"].dtype
    out = []
    for s, tokens in enumerate(batch.sessions):
        ps, memb_all, vis, hid = _session_inputs(tokens, dtype)
        if hid.size == 0:
            out.append(np.zeros((0, cfg.p3), dtype=dtype))
            continue
        recon, _ = _decode_session_fwd(
            params, cfg, latents[s], vis, memb_all[vis],
            hid, ps.coords[hid], memb_all[hid],
        )
        out.append(recon)
    return out


def head_classify(pooled, params):
    """Affine map from pooled session features to class logits."""
    return np.asarray(pooled) @ params["head_cls.w"] + params["head_cls.b"]


def head_classify_bwd(d_logits, pooled, params, grads):
    pooled2d = np.atleast_2d(pooled)
    d2d = np.atleast_2d(d_logits)
    _acc(grads, "head_cls.w", pooled2d.T @ d2d)
    _acc(grads, "head_cls.b", d2d.sum(axis=0))
    d_pooled = d2d @ params["head_cls.w"].T
    return d_pooled[0] if np.ndim(pooled) == 1 else d_pooled


def head_segment(latents_grid, params, cfg: NetConfig):
    """Patch-wise projection to voxel logits, tiled into the full grid.

    `latents_grid` must cover every patch of the reference modality in
    row-major order; the caller zero-fills rows for patches that were not
    encoded.
    """
    n_expected = int(np.prod(cfg.max_grid))
    if latents_grid.shape != (n_expected, cfg.d_e):
        raise ShapeError(
            f"expected ({n_expected}, {cfg.d_e}) latents, "
            f"got {latents_grid.shape}"
        )
    flat = latents_grid @ params["head_seg.w"] + params["head_seg.b"]
    patches = flat.reshape(n_expected, cfg.p3, cfg.n_labels)
    vol = assemble_from_patches(patches, cfg.max_grid, cfg.patch_size)
    return vol[..., 0] if cfg.n_labels == 1 else vol


def head_segment_bwd(d_vol, latents_grid, params, cfg: NetConfig, grads):
    from .tokenizer import split_into_patches

    if cfg.n_labels == 1:
        d_vol = d_vol[..., None]
    d_patches = split_into_patches(d_vol, cfg.patch_size)
    d_flat = d_patches.reshape(latents_grid.shape[0], cfg.p3 * cfg.n_labels)
    _acc(grads, "head_seg.w", latents_grid.T @ d_flat)
    _acc(grads, "head_seg.b", d_flat.sum(axis=0))
    return d_flat @ params["head_seg.w"].T


def grid_latents(tokens: SessionTokens, latents: np.ndarray,
                 modality_id: int, cfg: NetConfig) -> np.ndarray:
    """Full row-major latent grid for one modality; non-encoded rows are zero."""
    ps = tokens.patch_set
    vis = tokens.visible_indices()
    n_grid = ps.patches_per_modality
    out = np.zeros((n_grid, cfg.d_e), dtype=latents.dtype)
    base = modality_id * n_grid
    rows = np.flatnonzero(
        (vis >= base) & (vis < base + n_grid)
    )
    out[vis[rows] - base] = latents[rows]
    return out


def scatter_grid_gradient(tokens: SessionTokens, d_grid: np.ndarray,
                          modality_id: int, n_visible: int) -> np.ndarray:
    """Adjoint of grid_latents: route grid-row gradients back to latent rows."""
    ps = tokens.patch_set
    vis = tokens.visible_indices()
    n_grid = ps.patches_per_modality
    base = modality_id * n_grid
    dlat = np.zeros((n_visible, d_grid.shape[1]), dtype=d_grid.dtype)
    rows = np.flatnonzero((vis >= base) & (vis < base + n_grid))
    dlat[rows] = d_grid[vis[rows] - base]
    return dlat

"""The denoiser: a block stack over multi-view video latents.

A latent grid is a float64 array [V, T, H, W, C] (views, frames, height,
width, channels). Each block applies view-inflated spatial attention,
temporal attention, cross-attention over the per-view condition rows
[L; I; P_v], and an MLP, all with pre-LayerNorm residuals. A sketch side
stack (same patch embedder, per-view spatial attention) feeds the first
``sketch_cells`` blocks through zero-initialized fusion projections, so an
untrained sketch path has exactly zero effect on the output.

Auxiliary guidance branches (see dive.mad) hook in at two sites: parallel
to each block's cross-attention, and parallel to each fusion projection.
"""

import math
from dataclasses import dataclass

import numpy as np

from .conditions import ConditionEncoder, ConditionSet, aggregate_conditions
from .nn import (
    LayerNorm,
    Linear,
    Mlp,
    Module,
    MultiHeadAttention,
    Parameter,
    ShapeError,
    check_finite,
    fourier_features,
)


def check_latent(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise ShapeError(f"latent grid must be [V,T,H,W,C], got {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"latent grid has an empty axis: {x.shape}")
    return x


@dataclass
class BackboneConfig:
    n_blocks: int = 4
    d_model: int = 32
    n_heads: int = 4
    sketch_cells: int = 2
    patch: int = 2
    c_latent: int = 4
    mlp_ratio: int = 4
    t_max: int = 8
    fourier_bands: int = 4

    def __post_init__(self):
        if self.sketch_cells > self.n_blocks:
            raise ValueError("sketch_cells must not exceed n_blocks")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 (2D positional split)")


_PE_CACHE: dict = {}


def spatial_pos_encoding(hp: int, wp: int, d: int) -> np.ndarray:
    """Sinusoidal 2D encoding on normalized coordinates, shape [hp, wp, d].

    Coordinates are (i+0.5)/extent, so one function serves every resolution
    bucket and encodings at different sizes sample the same surface.
    """
    key = (hp, wp, d)
    if key not in _PE_CACHE:
        y = fourier_features((np.arange(hp) + 0.5) / hp, d // 4)  # [hp, d/2]
        x = fourier_features((np.arange(wp) + 0.5) / wp, d // 4)  # [wp, d/2]
        pe = np.concatenate(
            [np.repeat(y[:, None, :], wp, axis=1), np.repeat(x[None, :, :], hp, axis=0)], axis=-1
        )
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


class PatchEmbed(Module):
    """Shared 3D patch embedder (p x p spatial, 1 temporal).

    Explicit-cache form (apply/apply_grad) because the main and sketch
    streams share these weights within a single forward pass.
    """

    def __init__(self, cfg: BackboneConfig, rng):
        p, c, d = cfg.patch, cfg.c_latent, cfg.d_model
        self.patch = p
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(p * p * c), size=(p * p * c, d)))
        self.bias = Parameter(np.zeros(d))

    def apply(self, x):
        v, t, h, w, c = x.shape
        p = self.patch
        pad_h, pad_w = (-h) % p, (-w) % p
        if pad_h or pad_w:
            x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w), (0, 0)))
        hp, wp = (h + pad_h) // p, (w + pad_w) // p
        patches = x.reshape(v, t, hp, p, wp, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
        patches = np.ascontiguousarray(patches).reshape(v, t, hp, wp, p * p * c)
        tokens = patches @ self.weight.value + self.bias.value
        return tokens, (patches, (v, t, h, w, c), (hp, wp))

    def apply_grad(self, cache, d_tokens):
        patches, (v, t, h, w, c), (hp, wp) = cache
        p = self.patch
        flat_p = patches.reshape(-1, p * p * c)
        flat_d = d_tokens.reshape(-1, d_tokens.shape[-1])
        self.weight.grad += flat_p.T @ flat_d
        self.bias.grad += flat_d.sum(axis=0)
        d_patches = (d_tokens @ self.weight.value.T).reshape(v, t, hp, wp, p, p, c)
        d_pad = np.ascontiguousarray(d_patches.transpose(0, 1, 2, 4, 3, 5, 6)).reshape(
            v, t, hp * p, wp * p, c
        )
        return d_pad[:, :, :h, :w, :]


class Unpatch(Module):
    """Tokens back to a latent grid; projection starts at zero."""

    def __init__(self, cfg: BackboneConfig, rng):
        p, c, d = cfg.patch, cfg.c_latent, cfg.d_model
        self.patch = p
        self.c_latent = c
        self.proj = Linear(d, p * p * c, rng, zero=True)
        self._dims = None

    def forward(self, tokens, out_hw):
        v, t, hp, wp, _ = tokens.shape
        p, c = self.patch, self.c_latent
        self._dims = (v, t, hp, wp, out_hw)
        flat = self.proj.forward(tokens).reshape(v, t, hp, wp, p, p, c)
        grid = np.ascontiguousarray(flat.transpose(0, 1, 2, 4, 3, 5, 6)).reshape(v, t, hp * p, wp * p, c)
        h, w = out_hw
        return grid[:, :, :h, :w, :]

    def backward(self, d_out):
        v, t, hp, wp, (h, w) = self._dims
        p, c = self.patch, self.c_latent
        d_grid = np.zeros((v, t, hp * p, wp * p, c))
        d_grid[:, :, :h, :w, :] = d_out
        d_flat = np.ascontiguousarray(
            d_grid.reshape(v, t, hp, p, wp, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
        ).reshape(v, t, hp, wp, p * p * c)
        return self.proj.backward(d_flat)


class SpatialAttention(Module):
    """Per-frame spatial attention; view-inflated mode concatenates all
    views' spatial tokens into one sequence (no extra parameters)."""

    def __init__(self, cfg: BackboneConfig, rng, view_inflated: bool = True):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.view_inflated = view_inflated
        self._shape = None

    def _to_seq(self, x):
        v, t, hp, wp, d = self._shape
        if self.view_inflated:
            return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(t, v * hp * wp, d)
        return x.reshape(v * t, hp * wp, d)

    def _from_seq(self, seq):
        v, t, hp, wp, d = self._shape
        if self.view_inflated:
            return np.ascontiguousarray(seq.reshape(t, v, hp, wp, d).transpose(1, 0, 2, 3, 4))
        return seq.reshape(v, t, hp, wp, d)

    def forward(self, x):
        self._shape = x.shape
        return self._from_seq(self.attn.forward(self._to_seq(x)))

    def backward(self, d_out):
        return self._from_seq(self.attn.backward(self._to_seq(np.ascontiguousarray(d_out))))


class TemporalAttention(Module):
    """Attention along T per (view, spatial position), with learned
    temporal position embeddings added to its input."""

    def __init__(self, cfg: BackboneConfig, rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.t_pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.t_max, cfg.d_model)))
        self._shape = None

    def forward(self, x):
        v, t, hp, wp, d = self._shape = x.shape
        if t > self.t_pos.value.shape[0]:
            raise ShapeError(f"T={t} exceeds temporal table {self.t_pos.shape}")
        seq = np.ascontiguousarray(x.transpose(0, 2, 3, 1, 4)).reshape(v * hp * wp, t, d)
        out = self.attn.forward(seq + self.t_pos.value[:t])
        return np.ascontiguousarray(out.reshape(v, hp, wp, t, d).transpose(0, 3, 1, 2, 4))

    def backward(self, d_out):
        v, t, hp, wp, d = self._shape
        d_seq = np.ascontiguousarray(d_out.transpose(0, 2, 3, 1, 4)).reshape(v * hp * wp, t, d)
        d_in = self.attn.backward(d_seq)
        self.t_pos.grad[:t] += d_in.sum(axis=0)
        return np.ascontiguousarray(d_in.reshape(v, hp, wp, t, d).transpose(0, 3, 1, 2, 4))


class CrossAttentionBlock(Module):
    """Latent tokens of view v attend to that view's condition rows."""

    def __init__(self, cfg: BackboneConfig, rng, zero_out: bool = False):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, zero_out=zero_out)
        self._shape = None

    def forward(self, x, ctx):
        v, t, hp, wp, d = self._shape = x.shape
        if ctx.shape[0] != v or ctx.shape[2] != d:
            raise ShapeError(f"condition stack {ctx.shape} vs latent {x.shape}")
        out = self.attn.forward(x.reshape(v, t * hp * wp, d), ctx=ctx)
        return out.reshape(v, t, hp, wp, d)

    def backward(self, d_out):
        v, t, hp, wp, d = self._shape
        dx, d_ctx = self.attn.backward(np.ascontiguousarray(d_out).reshape(v, t * hp * wp, d))
        return dx.reshape(v, t, hp, wp, d), d_ctx


class Block(Module):
    """spatial -> temporal -> (cross + aux branches) -> MLP, pre-LN residuals."""

    def __init__(self, cfg: BackboneConfig, rng, view_inflated: bool = True, cross: bool = True):
        d = cfg.d_model
        self.ln_spatial = LayerNorm(d)
        self.spatial = SpatialAttention(cfg, rng, view_inflated)
        self.ln_temporal = LayerNorm(d)
        self.temporal = TemporalAttention(cfg, rng)
        self.has_cross = cross
        if cross:
            self.ln_cross = LayerNorm(d)
            self.cross = CrossAttentionBlock(cfg, rng)
        self.ln_mlp = LayerNorm(d)
        self.mlp = Mlp(d, cfg.mlp_ratio * d, d, rng)

    def forward(self, x, ctx=None, auxes=()):
        x = x + self.spatial.forward(self.ln_spatial.forward(x))
        x = x + self.temporal.forward(self.ln_temporal.forward(x))
        if self.has_cross:
            res = self.cross.forward(self.ln_cross.forward(x), ctx)
            for aux in auxes:
                res = res + aux.forward(x)
            x = x + res
        return x + self.mlp.forward(self.ln_mlp.forward(x))

    def backward(self, d, auxes=()):
        d_ctx = None
        d = d + self.ln_mlp.backward(self.mlp.backward(d))
        if self.has_cross:
            d_res = d
            dq, d_ctx = self.cross.backward(d_res)
            d = d + self.ln_cross.backward(dq)
            for aux in auxes:
                d = d + aux.backward(d_res)
        d = d + self.ln_temporal.backward(self.temporal.backward(d))
        d = d + self.ln_spatial.backward(self.spatial.backward(d))
        return d, d_ctx


class Denoiser(Module):
    """Four-argument velocity model over (latent, noise level, conditions)."""

    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.patch = PatchEmbed(cfg, rng)
        self.noise_mlp = Mlp(2 * cfg.fourier_bands, d, d, rng)
        self.blocks = [Block(cfg, rng, view_inflated=True, cross=True) for _ in range(cfg.n_blocks)]
        self.sketch_blocks = [
            Block(cfg, rng, view_inflated=False, cross=False) for _ in range(cfg.sketch_cells)
        ]
        self.fuse = [Linear(d, d, rng, zero=True) for _ in range(cfg.sketch_cells)]
        self.ln_final = LayerNorm(d)
        self.unpatch = Unpatch(cfg, rng)
        self._fwd = None

    # -- helpers -------------------------------------------------------------
    def _condition_stack(self, cond: ConditionSet) -> np.ndarray:
        rows = [aggregate_conditions(cond.L, cond.I, cond.P[v]) for v in range(cond.n_views)]
        return np.stack(rows)

    def sketchformer_forward(self, sketch, s_emb):
        """Run the sketch side stack; returns per-cell features and caches."""
        raster = sketch.values
        tiled = np.repeat(raster, self.cfg.c_latent, axis=-1)
        tokens, cache = self.patch.apply(tiled)
        hp, wp = tokens.shape[2], tokens.shape[3]
        tokens = tokens + spatial_pos_encoding(hp, wp, self.cfg.d_model) + s_emb
        feats = []
        r = tokens
        for cell in self.sketch_blocks:
            r = cell.forward(r)
            feats.append(r)
        return feats, cache

    # -- main passes -----------------------------------------------------------
    def forward(self, x, s: float, cond: ConditionSet, branches=None, omegas=(None, None, None)):
        x = check_latent(x)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"noise level s={s} outside [0, 1]")
        v, t, h, w, c = x.shape
        if c != self.cfg.c_latent:
            raise ShapeError(f"latent channels {c} != configured {self.cfg.c_latent}")
        if cond.sketch.values.shape[2:4] != (h, w) or cond.sketch.values.shape[0] != v:
            raise ShapeError(
                f"sketch raster {cond.sketch.values.shape} incompatible with latent {x.shape}"
            )

        s_feats = fourier_features(np.array(float(s)), self.cfg.fourier_bands)[None, :]
        s_emb = self.noise_mlp.forward(s_feats)[0]
        tokens, main_cache = self.patch.apply(x)
        hp, wp = tokens.shape[2], tokens.shape[3]
        tokens = tokens + spatial_pos_encoding(hp, wp, self.cfg.d_model) + s_emb

        ctx = self._condition_stack(cond)
        sketch_feats, sketch_cache = self.sketchformer_forward(cond.sketch, s_emb)

        omega_l, omega_i, omega_r = omegas if omegas is not None else (None, None, None)
        aux_bound = []
        for k, block in enumerate(self.blocks):
            auxes = []
            if branches is not None:
                if omega_l is not None:
                    auxes.append(branches.bind_text(k, cond.L, omega_l))
                if omega_i is not None and cond.I.shape[0] > 0:
                    auxes.append(branches.bind_instance(k, cond.I, omega_i))
            aux_bound.append(auxes)
            if k < self.cfg.sketch_cells:
                tokens = tokens + self.fuse[k].forward(sketch_feats[k])
                if branches is not None and omega_r is not None:
                    tokens = tokens + branches.sketch[k].forward(sketch_feats[k], omega_r)
            tokens = block.forward(tokens, ctx, auxes)

        out = self.unpatch.forward(self.ln_final.forward(tokens), (h, w))
        check_finite(out, "denoiser output")
        self._fwd = {
            "main_cache": main_cache,
            "sketch_cache": sketch_cache,
            "aux_bound": aux_bound,
            "branches": branches,
            "omega_r": omega_r,
            "n_ins": cond.I.shape[0],
            "n_l": cond.L.shape[0],
            "n_views": v,
        }
        return out

    def backward(self, d_out):
        """Reverse the last forward. Returns dict with dx, dL, dI, dP."""
        fw = self._fwd
        d_tok = self.ln_final.backward(self.unpatch.backward(d_out))
        d_ctx_total = None
        d_sketch_feats = [None] * self.cfg.sketch_cells
        branches, omega_r = fw["branches"], fw["omega_r"]

        for k in reversed(range(len(self.blocks))):
            d_tok, d_ctx = self.blocks[k].backward(d_tok, fw["aux_bound"][k])
            d_ctx_total = d_ctx if d_ctx_total is None else d_ctx_total + d_ctx
            if k < self.cfg.sketch_cells:
                d_feat = self.fuse[k].backward(d_tok)
                if branches is not None and omega_r is not None:
                    d_feat = d_feat + branches.sketch[k].backward(d_tok)
                d_sketch_feats[k] = d_feat

        # sketch stack: cell k's output feeds fuse[k] and cell k+1
        d_carry = None
        for k in reversed(range(self.cfg.sketch_cells)):
            d_r = d_sketch_feats[k] if d_carry is None else d_sketch_feats[k] + d_carry
            d_carry, _ = self.sketch_blocks[k].backward(d_r)
        d_s_emb = 0.0
        if d_carry is not None:
            d_s_emb = d_carry.sum(axis=(0, 1, 2, 3))
            self.patch.apply_grad(fw["sketch_cache"], d_carry)

        d_s_emb = d_s_emb + d_tok.sum(axis=(0, 1, 2, 3))
        dx = self.patch.apply_grad(fw["main_cache"], d_tok)
        self.noise_mlp.backward(d_s_emb[None, :])

        n_l, n_ins = fw["n_l"], fw["n_ins"]
        d_L = d_ctx_total[:, :n_l, :].sum(axis=0)
        d_I = d_ctx_total[:, n_l : n_l + n_ins, :].sum(axis=0)
        d_P = d_ctx_total[:, n_l + n_ins :, :]
        return {"dx": dx, "dL": d_L, "dI": d_I, "dP": d_P}


def denoiser_forward(denoiser: Denoiser, x, s, cond, branches=None, omegas=(None, None, None)):
    """Functional alias for Denoiser.forward."""
    return denoiser.forward(x, s, cond, branches=branches, omegas=omegas)


class DiveModel(Module):
    """Condition encoder + denoiser, the unit that is trained and checkpointed."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.encoder = ConditionEncoder(cfg, rng)
        self.denoiser = Denoiser(cfg.backbone(), rng)

    def velocity(self, x, s, cond, branches=None, omegas=(None, None, None)):
        return self.denoiser.forward(x, s, cond, branches=branches, omegas=omegas)

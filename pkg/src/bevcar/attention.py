"""Multi-view, multi-scale deformable attention.

Each query carries reference points on one or more value maps (e.g. the
projections of a BEV cell's voxel column into the cameras that see it).  The
query predicts, per head, a small set of sampling offsets around every
reference at every scale plus a matching set of attention logits; values are
sampled bilinearly at the offset locations and blended with the softmaxed
weights.  Invalid references (cell not visible in a view) are masked out of
the softmax, so they contribute nothing and the remaining weights still sum
to one.  A query with no valid reference at all yields a zero output.

Coordinates follow the package-wide convention: reference points and sampling
locations are normalised to [0, 1] x [0, 1] over the full map extent (edge
based), which maps to ``grid_sample(..., align_corners=False)`` via
``2 * p - 1``.  Offsets are predicted in *cells of the sampled level* and
divided by that level's size.  Out-of-bounds samples read as zero.

The value and output projections are bias-free, which keeps the whole module
exactly linear in the value maps for fixed queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass(frozen=True)
class DeformableAttentionConfig:
    feature_width: int
    heads: int = 4
    points_per_ref: int = 4
    levels: int = 1
    refs_per_query: int = 1

    def __post_init__(self) -> None:
        if self.feature_width <= 0 or self.heads <= 0:
            raise ConfigurationError("feature_width and heads must be positive")
        if self.feature_width % self.heads:
            raise ConfigurationError(
                f"feature_width {self.feature_width} not divisible by heads {self.heads}")
        if self.points_per_ref <= 0 or self.levels <= 0 or self.refs_per_query <= 0:
            raise ConfigurationError("points_per_ref, levels, refs_per_query must be positive")


class DeformableAttention(nn.Module):

    def __init__(self, config: DeformableAttentionConfig):
        super().__init__()
        self.cfg = config
        Fw, H = config.feature_width, config.heads
        n = H * config.refs_per_query * config.levels * config.points_per_ref
        self.offset_proj = nn.Linear(Fw, n * 2)
        self.weight_proj = nn.Linear(Fw, n)
        self.value_proj = nn.Linear(Fw, Fw, bias=False)
        self.out_proj = nn.Linear(Fw, Fw, bias=False)
        # upper bound on head * query * ref * point * channel elements held
        # live per sampling chunk; keeps peak memory flat at large Q
        self.max_chunk_elements = 1 << 24
        self.reset_parameters()

    def reset_parameters(self) -> None:
        cfg = self.cfg
        nn.init.zeros_(self.offset_proj.weight)
        # start from a unit ring around each reference so the module looks at
        # a small neighbourhood before any training
        H, R, L, P = cfg.heads, cfg.refs_per_query, cfg.levels, cfg.points_per_ref
        angles = torch.arange(H * P, dtype=torch.float64) * (2.0 * math.pi / (H * P))
        ring = torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1).view(H, P, 2)
        bias = ring[:, None, None, :, :].expand(H, R, L, P, 2)
        with torch.no_grad():
            self.offset_proj.bias.copy_(bias.reshape(-1).to(self.offset_proj.bias.dtype))
        nn.init.zeros_(self.weight_proj.weight)
        nn.init.zeros_(self.weight_proj.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.xavier_uniform_(self.out_proj.weight)

    def _check_shapes(self, queries, values, refs, valid):
        cfg = self.cfg
        if queries.ndim != 3 or queries.shape[-1] != cfg.feature_width:
            raise ConfigurationError(
                f"queries must be (B, Q, {cfg.feature_width}), got {tuple(queries.shape)}")
        if len(values) != cfg.levels:
            raise ConfigurationError(f"expected {cfg.levels} value levels, got {len(values)}")
        B, Q = queries.shape[:2]
        V = values[0].shape[1]
        for l, v in enumerate(values):
            if v.ndim != 5 or v.shape[0] != B or v.shape[1] != V \
                    or v.shape[2] != cfg.feature_width:
                raise ConfigurationError(
                    f"value level {l} must be (B, V, F, h, w), got {tuple(v.shape)}")
        want = (B, Q, V, cfg.refs_per_query, 2)
        if tuple(refs.shape) != want:
            raise ConfigurationError(f"refs must be {want}, got {tuple(refs.shape)}")
        if valid is not None and tuple(valid.shape) != want[:-1]:
            raise ConfigurationError(f"valid must be {want[:-1]}, got {tuple(valid.shape)}")
        return B, Q, V

    def forward(self, queries: torch.Tensor, values: list[torch.Tensor],
                refs: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """
        Args:
            queries: (B, Q, F)
            values:  per level, (B, V, F, h_l, w_l)
            refs:    (B, Q, V, R, 2) normalised [0, 1] reference points
                     (x = width axis, y = height axis); shared across levels
            valid:   (B, Q, V, R) bool; None means all valid
        Returns:
            (B, Q, F)
        """
        B, Q, V = self._check_shapes(queries, values, refs, valid)
        cfg = self.cfg
        H, R, L, P = cfg.heads, cfg.refs_per_query, cfg.levels, cfg.points_per_ref
        ch = cfg.feature_width // H
        if valid is None:
            valid = refs.new_ones(B, Q, V, R, dtype=torch.bool)

        offsets = self.offset_proj(queries).view(B, Q, H, R, L, P, 2)
        logits = self.weight_proj(queries).view(B, Q, H, R, L, P)

        # softmax over every valid (view, ref, level, point) sample of a query.
        # Logits are view-independent, so instead of materialising the view
        # axis we weight each ref's exp-mass by its number of valid views.
        n_views = valid.sum(dim=2).to(logits.dtype)                    # (B, Q, R)
        e = torch.exp(logits - logits.amax(dim=(3, 4, 5), keepdim=True))
        denom = torch.einsum("bqhrlp,bqr->bqh", e, n_views)
        w = torch.where(denom[..., None, None, None] > 0,
                        e / denom.clamp_min(1e-38)[..., None, None, None],
                        torch.zeros_like(e))                           # (B, Q, H, R, L, P)

        # per-level value projection, split into heads
        proj = []
        for lv in values:
            flat = F.conv2d(lv.reshape(B * V, *lv.shape[2:]),
                            self.value_proj.weight[:, :, None, None])
            proj.append(flat.view(B, V, H, ch, *lv.shape[3:]))

        out = queries.new_zeros(B, Q, H, ch)
        refs_safe = torch.where(valid[..., None], refs.to(queries.dtype),
                                torch.full_like(refs, 0.5, dtype=queries.dtype))
        chunk = max(1, self.max_chunk_elements // max(1, H * ch * R * P))
        for v in range(V):
            vmask = valid[:, :, v]                                     # (B, Q, R)
            active = vmask.any(dim=2).any(dim=0)                       # (Q,)
            if not bool(active.any()):
                continue
            idx = active.nonzero(as_tuple=True)[0]
            for start in range(0, idx.numel(), chunk):
                sel = idx[start:start + chunk]
                q_loc = refs_safe[:, sel, v]                           # (B, q, R, 2)
                q_off = offsets[:, sel]                                # (B, q, H, R, L, P, 2)
                q_w = w[:, sel] * vmask[:, sel, None, :, None, None]   # (B, q, H, R, L, P)
                for l in range(L):
                    vm = proj[l][:, v]                                 # (B, H, ch, h, w)
                    h_l, w_l = vm.shape[-2:]
                    size = queries.new_tensor([w_l, h_l])
                    loc = q_loc[:, :, None, :, None, :] + q_off[..., l, :, :] / size
                    grid = (2.0 * loc - 1.0).permute(0, 2, 1, 3, 4, 5) \
                        .reshape(B * H, -1, 1, 2)                      # (B*H, q*R*P, 1, 2)
                    sampled = F.grid_sample(vm.reshape(B * H, ch, h_l, w_l), grid,
                                            mode="bilinear", padding_mode="zeros",
                                            align_corners=False)
                    sampled = sampled.view(B, H, ch, sel.numel(), R, P)
                    out[:, sel] += torch.einsum("bhcqrp,bqhrp->bqhc",
                                                sampled, q_w[..., l, :])
        return self.out_proj(out.reshape(B, Q, cfg.feature_width))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: deformable cross-attention then a 2x FFN."""

    def __init__(self, attn_config: DeformableAttentionConfig, ffn_expansion: int = 2):
        super().__init__()
        Fw = attn_config.feature_width
        self.norm_attn = nn.LayerNorm(Fw)
        self.attn = DeformableAttention(attn_config)
        self.norm_ffn = nn.LayerNorm(Fw)
        self.ffn = nn.Sequential(
            nn.Linear(Fw, ffn_expansion * Fw),
            nn.GELU(),
            nn.Linear(ffn_expansion * Fw, Fw),
        )

    def forward(self, queries: torch.Tensor, values: list[torch.Tensor],
                refs: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        queries = queries + self.attn(self.norm_attn(queries), values, refs, valid)
        return queries + self.ffn(self.norm_ffn(queries))

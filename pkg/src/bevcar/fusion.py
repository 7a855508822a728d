"""BEV-plane fusion of radar and lifted image features, plus the BEV encoder.

Fusion queries are composed as

    Q = f_rad + Q_pos + Q_bev

with fresh positional/content embeddings (not shared with the lifting stage).
Six transformer blocks run deformable attention in the BEV plane at full
resolution: every cell's query references its own location on the lifted
image map f_img_bev, which enters as values only and is never modified.
The fused map then passes through a small residual encoder-decoder that
widens the receptive field before the segmentation head.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .attention import DeformableAttentionConfig, TransformerBlock
from .backbone import ResidualBlock, _gn
from .errors import ConfigurationError
from .geometry import BevGrid
from .lifting import (bev_reference_points, compose_queries, map_from_tokens,
                      tokens_from_map)

compose_fusion_queries = compose_queries


class BevFusion(nn.Module):
    """Cross-attention from radar-initialised queries onto f_img_bev."""

    def __init__(self, feature_width: int, grid: BevGrid, heads: int = 4,
                 points_per_ref: int = 4, num_blocks: int = 6, ffn_expansion: int = 2):
        super().__init__()
        self.grid = grid
        self.q_pos = nn.Parameter(torch.empty(feature_width, grid.x_cells, grid.y_cells))
        self.q_bev = nn.Parameter(torch.empty(feature_width, grid.x_cells, grid.y_cells))
        nn.init.normal_(self.q_pos, std=0.02)
        nn.init.normal_(self.q_bev, std=0.02)
        cfg = DeformableAttentionConfig(
            feature_width=feature_width, heads=heads, points_per_ref=points_per_ref,
            levels=1, refs_per_query=1)
        self.blocks = nn.ModuleList(TransformerBlock(cfg, ffn_expansion)
                                    for _ in range(num_blocks))
        self.register_buffer(
            "self_refs",
            bev_reference_points(grid.x_cells, grid.y_cells).view(1, -1, 1, 1, 2),
            persistent=False)

    def forward(self, f_rad: torch.Tensor, f_img_bev: torch.Tensor) -> torch.Tensor:
        """(B, F, X, Y) x (B, F, X, Y) -> fused (B, F, X, Y)."""
        g = self.grid
        if f_rad.shape != f_img_bev.shape:
            raise ConfigurationError(
                f"f_rad {tuple(f_rad.shape)} and f_img_bev {tuple(f_img_bev.shape)} disagree")
        if f_rad.shape[-2:] != (g.x_cells, g.y_cells):
            raise ConfigurationError(f"fusion input {tuple(f_rad.shape)} does not match grid")
        B = f_rad.shape[0]
        queries = compose_fusion_queries(f_rad, self.q_pos, self.q_bev)
        tok = tokens_from_map(queries)
        values = [f_img_bev.unsqueeze(1)]                     # single view, single level
        refs = self.self_refs.expand(B, -1, -1, -1, -1).to(tok.dtype)
        for block in self.blocks:
            tok = block(tok, values, refs)
        return map_from_tokens(tok, g.x_cells, g.y_cells)


class BevEncoder(nn.Module):
    """Residual encoder-decoder over the fused BEV map (downsamples to 1/4).

    Requires the grid plane dimensions to be divisible by 4.
    """

    def __init__(self, feature_width: int, out_width: int | None = None):
        super().__init__()
        Fw = feature_width
        out_width = out_width or Fw
        self.down1 = nn.Sequential(nn.Conv2d(Fw, 2 * Fw, 3, stride=2, padding=1, bias=False),
                                   _gn(2 * Fw), nn.ReLU(inplace=True))
        self.block1 = ResidualBlock(2 * Fw)
        self.down2 = nn.Sequential(nn.Conv2d(2 * Fw, 4 * Fw, 3, stride=2, padding=1, bias=False),
                                   _gn(4 * Fw), nn.ReLU(inplace=True))
        self.block2 = ResidualBlock(4 * Fw)
        self.up1 = nn.Conv2d(4 * Fw, 2 * Fw, 3, padding=1, bias=False)
        self.up1_norm = _gn(2 * Fw)
        self.up2 = nn.Conv2d(2 * Fw, Fw, 3, padding=1, bias=False)
        self.up2_norm = _gn(Fw)
        self.out = nn.Conv2d(Fw, out_width, 3, padding=1)
        self.act = nn.ReLU(inplace=True)
        self.out_width = out_width

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.ndim != 4:
            raise ConfigurationError(f"expected (B, F, X, Y), got {tuple(fused.shape)}")
        X, Y = fused.shape[-2:]
        if X % 4 or Y % 4:
            raise ConfigurationError(
                f"BEV encoder needs plane dims divisible by 4, got {X}x{Y}")
        d1 = self.block1(self.down1(fused))                   # (B, 2F, X/2, Y/2)
        d2 = self.block2(self.down2(d1))                      # (B, 4F, X/4, Y/4)
        u1 = nn.functional.interpolate(d2, scale_factor=2, mode="nearest")
        u1 = self.act(self.up1_norm(self.up1(u1)) + d1)       # lateral skip at 1/2
        u2 = nn.functional.interpolate(u1, scale_factor=2, mode="nearest")
        u2 = self.act(self.up2_norm(self.up2(u2)) + fused)    # lateral skip at 1/1
        return self.out(u2)

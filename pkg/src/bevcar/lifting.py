"""Lifting image features into the BEV plane with deformable attention.

The lifting queries are composed as

    Q = Q_img + Q_pos + Q_bev

where Q_img comes from the radar-guided initializer below, Q_pos is a learned
positional embedding and Q_bev a learned content embedding, both per BEV cell.
Six cascaded transformer blocks then let every cell attend to the four image
pyramid scales of the cameras that see it, sampling around the projections of
its voxel column.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .attention import DeformableAttention, DeformableAttentionConfig, TransformerBlock
from .errors import ConfigurationError
from .geometry import BevGrid


def bev_reference_points(x_cells: int, y_cells: int) -> torch.Tensor:
    """Normalised self-locations of BEV cells, shape (x_cells * y_cells, 2).

    Flattening matches tensor layout (B, F, X, Y) -> (B, X * Y, F): cell
    (i, j) is token i * y_cells + j.  BEV maps treat X as the height axis and
    Y as the width axis, so the point is ((j + .5) / Y, (i + .5) / X).
    """
    ii = torch.arange(x_cells, dtype=torch.float64)
    jj = torch.arange(y_cells, dtype=torch.float64)
    gi, gj = torch.meshgrid(ii, jj, indexing="ij")
    pts = torch.stack([(gj + 0.5) / y_cells, (gi + 0.5) / x_cells], dim=-1)
    return pts.reshape(-1, 2)


def tokens_from_map(bev: torch.Tensor) -> torch.Tensor:
    """(B, F, X, Y) -> (B, X*Y, F)."""
    B, Fw = bev.shape[:2]
    return bev.flatten(2).transpose(1, 2)


def map_from_tokens(tokens: torch.Tensor, x_cells: int, y_cells: int) -> torch.Tensor:
    """(B, X*Y, F) -> (B, F, X, Y)."""
    B, _, Fw = tokens.shape
    return tokens.transpose(1, 2).reshape(B, Fw, x_cells, y_cells)


def compose_queries(q_img: torch.Tensor, q_pos: torch.Tensor,
                    q_bev: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the three query components (shapes must match)."""
    if q_img.shape[-3:] != q_pos.shape[-3:] or q_img.shape[-3:] != q_bev.shape[-3:]:
        raise ConfigurationError(
            f"query components disagree: {tuple(q_img.shape)}, "
            f"{tuple(q_pos.shape)}, {tuple(q_bev.shape)}")
    return q_img + q_pos + q_bev


class QueryInitializer(nn.Module):
    """Turn the splatted image volume + radar occupancy into initial queries.

    The voxel volume is collapsed along height by a 1x1 convolution over the
    stacked Z * F channels.  One deformable-attention pass then runs over the
    collapsed map, with each cell's query formed from its collapsed feature
    plus a learned embedding of its radar occupancy bit, referenced at its own
    location.  The pass is residual on the collapsed features, so with all
    weights zeroed the initial queries are exactly zero.
    """

    def __init__(self, feature_width: int, grid: BevGrid, heads: int = 4,
                 points_per_ref: int = 4):
        super().__init__()
        self.grid = grid
        self.collapse = nn.Conv2d(grid.z_cells * feature_width, feature_width, 1)
        self.occupancy_embed = nn.Embedding(2, feature_width)
        nn.init.normal_(self.occupancy_embed.weight, std=0.02)
        self.attn = DeformableAttention(DeformableAttentionConfig(
            feature_width=feature_width, heads=heads, points_per_ref=points_per_ref,
            levels=1, refs_per_query=1))
        self.register_buffer(
            "self_refs",
            bev_reference_points(grid.x_cells, grid.y_cells).view(1, -1, 1, 1, 2),
            persistent=False)

    def forward(self, splat: torch.Tensor, occupancy: torch.Tensor) -> torch.Tensor:
        """
        Args:
            splat: (B, F, X, Y, Z) splatted image features.
            occupancy: (B, X, Y) bool radar occupancy (any height bin).
        Returns:
            Q_img: (B, F, X, Y)
        """
        g = self.grid
        if splat.ndim != 5 or splat.shape[2:] != (g.x_cells, g.y_cells, g.z_cells):
            raise ConfigurationError(f"splat shape {tuple(splat.shape)} does not match grid")
        if occupancy.shape[-2:] != (g.x_cells, g.y_cells):
            raise ConfigurationError(f"occupancy shape {tuple(occupancy.shape)} "
                                     f"does not match grid")
        B, Fw = splat.shape[:2]
        stacked = splat.permute(0, 4, 1, 2, 3).reshape(B, g.z_cells * Fw,
                                                       g.x_cells, g.y_cells)
        collapsed = self.collapse(stacked)                     # (B, F, X, Y)
        tok = tokens_from_map(collapsed)                       # (B, Q, F)
        occ = self.occupancy_embed(occupancy.reshape(B, -1).long())
        refs = self.self_refs.expand(B, -1, -1, -1, -1).to(tok.dtype)
        out = tok + self.attn(tok + occ, [collapsed.unsqueeze(1)], refs)
        return map_from_tokens(out, g.x_cells, g.y_cells)


class ViewLifting(nn.Module):
    """Six deformable-attention blocks lifting image pyramids into BEV."""

    def __init__(self, feature_width: int, grid: BevGrid, heads: int = 4,
                 points_per_ref: int = 4, num_blocks: int = 6, ffn_expansion: int = 2,
                 num_levels: int = 4):
        super().__init__()
        self.grid = grid
        self.feature_width = feature_width
        self.initializer = QueryInitializer(feature_width, grid, heads, points_per_ref)
        self.q_pos = nn.Parameter(torch.empty(feature_width, grid.x_cells, grid.y_cells))
        self.q_bev = nn.Parameter(torch.empty(feature_width, grid.x_cells, grid.y_cells))
        nn.init.normal_(self.q_pos, std=0.02)
        nn.init.normal_(self.q_bev, std=0.02)
        cfg = DeformableAttentionConfig(
            feature_width=feature_width, heads=heads, points_per_ref=points_per_ref,
            levels=num_levels, refs_per_query=grid.z_cells)
        self.blocks = nn.ModuleList(TransformerBlock(cfg, ffn_expansion)
                                    for _ in range(num_blocks))

    def lift(self, queries: torch.Tensor, pyramids: list[torch.Tensor],
             refs: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Run the transformer blocks only.

        Args:
            queries: (B, F, X, Y) composed queries.
            pyramids: per level, (B, N, F, h_l, w_l) camera features.
            refs: (B, XY, N, Z, 2) normalised projections of each cell's voxel
                column into each camera.
            valid: (B, XY, N, Z) bool column-to-camera visibility.
        Returns:
            f_img_bev: (B, F, X, Y)
        """
        g = self.grid
        tok = tokens_from_map(queries)
        for block in self.blocks:
            tok = block(tok, pyramids, refs, valid)
        return map_from_tokens(tok, g.x_cells, g.y_cells)

    def forward(self, splat: torch.Tensor, occupancy: torch.Tensor,
                pyramids: list[torch.Tensor], refs: torch.Tensor,
                valid: torch.Tensor) -> torch.Tensor:
        q_img = self.initializer(splat, occupancy)
        queries = compose_queries(q_img, self.q_pos, self.q_bev)
        return self.lift(queries, pyramids, refs, valid)

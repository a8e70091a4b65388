"""Block-pair correlation maps and their top-down fusion.

For every same-index block pair in the two feature pyramids, each query
position scores the maximum cosine similarity against support foreground
positions (resized binarized mask); negatives clamp to zero, so maps live
in [0, 1]. Matching runs off-tape (no gradient through the cosine); only
the fusion convs train. Fusion goes top-down: high and mid stacks are
projected by 1x1 convs, merged by a 3x3 conv, then merged with the
projected low stack by a final 3x3 conv, ReLU after every conv.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FeaturePyramid
from .kernels import conv2d
from .tensor import Tensor, concat, eps_norm, relu
from .nn import he_conv, zeros_param

__all__ = ["CorrelationStack", "correlation_maps", "TopDownFuse"]


@dataclass
class CorrelationStack:
    """Per-level stacks of correlation maps, channels last, values [0, 1]."""
    low: np.ndarray    # (H, W, N1)
    mid: np.ndarray    # (H, W, N2)
    high: np.ndarray   # (H, W, N3)

    @property
    def total_maps(self) -> int:
        return self.low.shape[2] + self.mid.shape[2] + self.high.shape[2]

    @classmethod
    def zeros(cls, height: int, width: int, counts=(3, 6, 4),
              dtype=np.float32) -> "CorrelationStack":
        n1, n2, n3 = counts
        return cls(low=np.zeros((height, width, n1), dtype=dtype),
                   mid=np.zeros((height, width, n2), dtype=dtype),
                   high=np.zeros((height, width, n3), dtype=dtype))


def _block_correlation(query: np.ndarray, support: np.ndarray,
                       fg: np.ndarray, reduce: str) -> np.ndarray:
    h, w, c = query.shape
    out = np.zeros((h, w), dtype=query.dtype)
    if not fg.any():
        return out
    q = query.reshape(-1, c)
    s = support.reshape(-1, c)[fg.reshape(-1)]
    eps = eps_norm(q.dtype)
    nq = np.sqrt((q * q).sum(axis=1))
    ns = np.sqrt((s * s).sum(axis=1))
    dots = q @ s.T
    denom = nq[:, None] * ns[None, :]
    valid = (nq >= eps)[:, None] & (ns >= eps)[None, :]
    cos = np.zeros_like(dots)
    np.divide(dots, denom, out=cos, where=valid)
    red = cos.max(axis=1) if reduce == "max" else cos.mean(axis=1)
    return np.maximum(red, 0.0).reshape(h, w)


def correlation_maps(support_pyramid: FeaturePyramid,
                     query_pyramid: FeaturePyramid,
                     support_mask: np.ndarray,
                     reduce: str = "max") -> CorrelationStack:
    """One correlation map per block pair, stacked per level.

    support_mask is a boolean (H, W) foreground selection at feature
    resolution. Runs on raw arrays; the result carries no tape.
    """
    if reduce not in ("max", "mean"):
        raise ValueError(f"unknown correlation reduce '{reduce}'")
    fg = np.asarray(support_mask, dtype=bool)
    levels = []
    for sup_blocks, qry_blocks in zip(support_pyramid.levels(),
                                      query_pyramid.levels()):
        if len(sup_blocks) != len(qry_blocks):
            raise ValueError("pyramids have mismatched block counts")
        maps = []
        for sb, qb in zip(sup_blocks, qry_blocks):
            if sb.shape != qb.shape:
                raise ValueError(f"block shapes differ: {sb.shape} vs "
                                 f"{qb.shape}")
            if fg.shape != sb.shape[:2]:
                raise ValueError(f"mask {fg.shape} vs features "
                                 f"{sb.shape[:2]}")
            maps.append(_block_correlation(qb.data, sb.data, fg, reduce))
        levels.append(np.stack(maps, axis=2))
    return CorrelationStack(low=levels[0], mid=levels[1], high=levels[2])


def average_stacks(stacks: list[CorrelationStack]) -> CorrelationStack:
    """Element-wise mean; identity for a single stack."""
    if not stacks:
        raise ValueError("average_stacks: empty list")
    if len(stacks) == 1:
        return stacks[0]
    return CorrelationStack(
        low=np.mean([s.low for s in stacks], axis=0),
        mid=np.mean([s.mid for s in stacks], axis=0),
        high=np.mean([s.high for s in stacks], axis=0))


class TopDownFuse:
    """Trainable top-down merge of the three correlation stacks."""

    def __init__(self, rng: np.random.Generator, counts=(3, 6, 4),
                 out_channels: int = 48, dtype=np.float32):
        n1, n2, n3 = (int(n) for n in counts)
        m = int(out_channels)
        self.out_channels = m
        dt = np.dtype(dtype).type
        self.proj_low_w = he_conv(rng, 1, n1, m, dt)
        self.proj_low_b = zeros_param((m,), dt)
        self.proj_mid_w = he_conv(rng, 1, n2, m, dt)
        self.proj_mid_b = zeros_param((m,), dt)
        self.proj_high_w = he_conv(rng, 1, n3, m, dt)
        self.proj_high_b = zeros_param((m,), dt)
        self.merge_hi_w = he_conv(rng, 3, 2 * m, m, dt)
        self.merge_hi_b = zeros_param((m,), dt)
        self.merge_lo_w = he_conv(rng, 3, 2 * m, m, dt)
        self.merge_lo_b = zeros_param((m,), dt)
        self.dtype = dt

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{k}": v for k, v in (
            ("proj_low_w", self.proj_low_w), ("proj_low_b", self.proj_low_b),
            ("proj_mid_w", self.proj_mid_w), ("proj_mid_b", self.proj_mid_b),
            ("proj_high_w", self.proj_high_w),
            ("proj_high_b", self.proj_high_b),
            ("merge_hi_w", self.merge_hi_w), ("merge_hi_b", self.merge_hi_b),
            ("merge_lo_w", self.merge_lo_w), ("merge_lo_b", self.merge_lo_b),
        )}

    def __call__(self, stack: CorrelationStack) -> Tensor:
        t_high = relu(conv2d(Tensor(stack.high.astype(self.dtype)),
                             self.proj_high_w, self.proj_high_b))
        t_mid = relu(conv2d(Tensor(stack.mid.astype(self.dtype)),
                            self.proj_mid_w, self.proj_mid_b))
        merged = relu(conv2d(concat([t_high, t_mid], axis=2),
                             self.merge_hi_w, self.merge_hi_b))
        t_low = relu(conv2d(Tensor(stack.low.astype(self.dtype)),
                            self.proj_low_w, self.proj_low_b))
        return relu(conv2d(concat([merged, t_low], axis=2),
                           self.merge_lo_w, self.merge_lo_b))

"""Self-activation prior mask: parameter-free query/support matching.

For each pooling window, support features are masked by the (continuous)
resized support mask and box-pooled into per-position region descriptors;
query features are pooled unmasked. The score between query position i and
support position j is cosine similarity scaled by the query position's
self-activation (its unnormalized self inner product, or its L2 norm under
the ``l2`` kernel). Row means over support positions give one map per
window; each map is min-max normalized and the window maps are averaged.

Everything here is plain numpy: no parameters, no gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import avg_pool_np, resize_map_np
from .tensor import Tensor, eps_norm

__all__ = ["PriorMask", "region_features", "self_activation_scores",
           "similarity_map", "prior_mask", "DEFAULT_WINDOWS"]

DEFAULT_WINDOWS = ((5, 5), (7, 1), (1, 7))


@dataclass
class PriorMask:
    """Averaged prior map plus the per-window maps it came from."""
    map: np.ndarray                  # (H, W) in [0, 1]
    per_window: list[np.ndarray]
    windows: tuple

    @classmethod
    def uniform(cls, height: int, width: int, windows=DEFAULT_WINDOWS,
                value: float = 0.5) -> "PriorMask":
        """Flat prior used when the module is ablated."""
        flat = np.full((height, width), value, dtype=np.float64)
        return cls(map=flat.copy(),
                   per_window=[flat.copy() for _ in windows],
                   windows=tuple(windows))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_mask(mask: np.ndarray) -> None:
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")


def region_features(features, window, mask=None) -> np.ndarray:
    """Box-pooled region descriptors, flattened to (H*W, C).

    With a mask, features are scaled by it (continuous values are kept,
    matching the prior-mask definition) before pooling.
    """
    f = _as_array(features)
    if f.ndim != 3:
        raise ValueError(f"region_features expects (H, W, C), got {f.shape}")
    if mask is not None:
        m = _as_array(mask)
        _check_mask(m)
        if m.shape != f.shape[:2]:
            m = resize_map_np(m.astype(f.dtype), f.shape[:2])
        f = f * m.astype(f.dtype)[:, :, None]
    pooled = avg_pool_np(f, window)
    return pooled.reshape(-1, f.shape[2])


def self_activation_scores(query_regions: np.ndarray,
                           support_regions: np.ndarray,
                           kernel: str = "inner") -> np.ndarray:
    """Pairwise scores (query rows x support columns).

    score[i, j] = cos(q_i, s_j) * activation(q_i), where activation is the
    self inner product (default) or the L2 norm (kernel='l2'). Zero-norm
    vectors contribute cosine 0.
    """
    q = np.asarray(query_regions)
    s = np.asarray(support_regions)
    if q.ndim != 2 or s.ndim != 2 or q.shape[1] != s.shape[1]:
        raise ValueError(f"region shapes {q.shape} vs {s.shape}")
    if kernel not in ("inner", "l2"):
        raise ValueError(f"unknown self-activation kernel '{kernel}'")
    eps = eps_norm(q.dtype)
    q_sq = (q * q).sum(axis=1)
    s_sq = (s * s).sum(axis=1)
    nq = np.sqrt(q_sq)
    ns = np.sqrt(s_sq)
    dots = q @ s.T
    denom = nq[:, None] * ns[None, :]
    valid = (nq >= eps)[:, None] & (ns >= eps)[None, :]
    cos = np.zeros_like(dots)
    np.divide(dots, denom, out=cos, where=valid)
    activation = nq if kernel == "l2" else q_sq
    return cos * activation[:, None]


def similarity_map(scores: np.ndarray, size) -> np.ndarray:
    """Row means of a square score matrix, min-max normalized to a map."""
    scores = np.asarray(scores)
    h, w = int(size[0]), int(size[1])
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"score matrix must be square, got {scores.shape}")
    if scores.shape[0] != h * w:
        raise ValueError(f"score matrix side {scores.shape[0]} != {h}*{w}")
    row_mean = scores.mean(axis=1)
    lo, hi = row_mean.min(), row_mean.max()
    if hi - lo < eps_norm(row_mean.dtype):
        return np.zeros((h, w), dtype=row_mean.dtype)
    return ((row_mean - lo) / (hi - lo)).reshape(h, w)


def prior_mask(support_high, query_high, support_mask,
               windows=DEFAULT_WINDOWS, kernel: str = "inner") -> PriorMask:
    """Averaged multi-window prior map for one support/query pair.

    support_mask may be at image or feature resolution; it is bilinearly
    resized (continuous) to the feature grid. Output values are in [0, 1].
    """
    sup = _as_array(support_high)
    qry = _as_array(query_high)
    if sup.shape != qry.shape or sup.ndim != 3:
        raise ValueError(f"feature shapes must match: {sup.shape} vs "
                         f"{qry.shape}")
    if not windows:
        raise ValueError("need at least one pooling window")
    h, w = qry.shape[:2]
    mask = _as_array(support_mask)
    _check_mask(mask)
    per_window = []
    for win in windows:
        rs = region_features(sup, win, mask=mask)
        rq = region_features(qry, win)
        scores = self_activation_scores(rq, rs, kernel=kernel)
        per_window.append(similarity_map(scores, (h, w)))
    return PriorMask(map=np.mean(per_window, axis=0),
                     per_window=per_window, windows=tuple(windows))

"""Fusion head: multi-scale decoding, losses, K-shot averaging.

The decoder input concatenates the query's mid-stage features, the hybrid
prototype broadcast to every position, the prior map, and the fused
correlation features. Four branches process block-pooled copies at scales
{1, 1/2, 1/4, 1/8}; each emits a 2-channel intermediate prediction at its
own scale and contributes its (upsampled) features to a final trunk that
predicts at feature resolution, bilinearly upsampled to image size.
The decoder stays norm-free: its inputs are already bounded (normalized
encoder features, a prior in [0, 1], clamped correlations), and spatial
standardization would amplify the K-shot averaging noise of the
broadcast prototype channels, which are constant over space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import CorrelationStack, average_stacks
from .kernels import bilinear_resize, block_pool, conv2d, resize_map_np
from .prior import PriorMask
from .prototypes import PrototypeBundle, average_bundles
from .tensor import (Tensor, add, broadcast_hw, concat, mean_tensors, relu,
                     reshape, softmax_cross_entropy)
from .nn import he_conv, zeros_param

__all__ = ["PredictionSet", "FusionDecoder", "fuse_and_predict",
           "segmentation_loss", "total_loss", "kshot_average"]

SCALES = (1, 2, 4, 8)


@dataclass
class PredictionSet:
    """2-channel logits: one per pyramid branch plus the final upsample."""
    intermediates: list[Tensor]   # scales H/1, H/2, H/4, H/8
    final: Tensor                 # (image_h, image_w, 2)


class FusionDecoder:

    def __init__(self, rng: np.random.Generator, in_channels: int,
                 width: int = 64, dtype=np.float32):
        dt = np.dtype(dtype).type
        self.in_channels = int(in_channels)
        self.width = int(width)
        self.branches = []
        for _ in SCALES:
            self.branches.append({
                "a_w": he_conv(rng, 3, self.in_channels, self.width, dt),
                "a_b": zeros_param((self.width,), dt),
                "b_w": he_conv(rng, 3, self.width, self.width, dt),
                "b_b": zeros_param((self.width,), dt),
                "head_w": he_conv(rng, 1, self.width, 2, dt),
                "head_b": zeros_param((2,), dt),
            })
        self.trunk = {
            "a_w": he_conv(rng, 3, len(SCALES) * self.width, self.width, dt),
            "a_b": zeros_param((self.width,), dt),
            "b_w": he_conv(rng, 3, self.width, self.width, dt),
            "b_b": zeros_param((self.width,), dt),
            "head_w": he_conv(rng, 1, self.width, 2, dt),
            "head_b": zeros_param((2,), dt),
        }

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, br in enumerate(self.branches):
            for k, v in br.items():
                out[f"{prefix}branch{i}.{k}"] = v
        for k, v in self.trunk.items():
            out[f"{prefix}trunk.{k}"] = v
        return out

    def __call__(self, features: Tensor, image_size) -> PredictionSet:
        h, w, c = features.shape
        if c != self.in_channels:
            raise ValueError(f"decoder expects {self.in_channels} channels, "
                             f"got {c}")
        for f in SCALES:
            if h % f or w % f:
                raise ValueError(f"feature extents ({h}, {w}) must be "
                                 f"divisible by {SCALES[-1]}")
        inters, trunk_feats = [], []
        for factor, br in zip(SCALES, self.branches):
            x = features if factor == 1 else block_pool(features, factor)
            x = relu(conv2d(x, br["a_w"], br["a_b"]))
            x = relu(conv2d(x, br["b_w"], br["b_b"]))
            inters.append(conv2d(x, br["head_w"], br["head_b"]))
            trunk_feats.append(x if factor == 1
                               else bilinear_resize(x, (h, w)))
        t = concat(trunk_feats, axis=2)
        t = relu(conv2d(t, self.trunk["a_w"], self.trunk["a_b"]))
        t = relu(conv2d(t, self.trunk["b_w"], self.trunk["b_b"]))
        logits = conv2d(t, self.trunk["head_w"], self.trunk["head_b"])
        final = bilinear_resize(logits, image_size)
        return PredictionSet(intermediates=inters, final=final)


def fuse_and_predict(query_features: Tensor, prior_map: np.ndarray,
                     hybrid: Tensor, hyper_features: Tensor,
                     decoder: FusionDecoder, image_size) -> PredictionSet:
    """Concatenate the four evidence sources and decode."""
    h, w, _ = query_features.shape
    prior = np.asarray(prior_map, dtype=query_features.data.dtype)
    if prior.shape != (h, w):
        raise ValueError(f"prior {prior.shape} vs features ({h}, {w})")
    stacked = concat([
        query_features,
        broadcast_hw(hybrid, h, w),
        reshape(Tensor(prior), (h, w, 1)),
        hyper_features,
    ], axis=2)
    return decoder(stacked, image_size)


def _binarize(mask: np.ndarray, size) -> np.ndarray:
    resized = mask if mask.shape == tuple(size) else \
        resize_map_np(mask.astype(np.float64), size)
    return (resized > 0.5).astype(np.int64)


def segmentation_loss(predictions: PredictionSet,
                      query_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """(intermediate, final) cross-entropy terms.

    The intermediate term averages the per-scale losses; ground truth is
    bilinearly resized to each scale and binarized at 0.5. The final term
    scores the upsampled logits against the full-resolution mask.
    """
    mask = np.asarray(query_mask)
    if mask.shape != predictions.final.shape[:2]:
        raise ValueError(f"mask {mask.shape} vs final prediction "
                         f"{predictions.final.shape[:2]}")
    inter_terms = []
    for logits in predictions.intermediates:
        target = _binarize(mask, logits.shape[:2])
        inter_terms.append(softmax_cross_entropy(logits, target))
    inter = mean_tensors(inter_terms)
    final = softmax_cross_entropy(predictions.final,
                                  _binarize(mask, mask.shape))
    return inter, final


def total_loss(segmentation: Tensor, co_triplet: Tensor) -> Tensor:
    """Unweighted sum of the segmentation and co-triplet terms."""
    return add(segmentation, co_triplet)


def kshot_average(per_shot: list[tuple[PriorMask, PrototypeBundle,
                                       CorrelationStack]]) \
        -> tuple[PriorMask, PrototypeBundle, CorrelationStack]:
    """Element-wise mean of per-shot triples; K=1 is the identity."""
    if not per_shot:
        raise ValueError("kshot_average: empty input")
    priors = [p for p, _, _ in per_shot]
    bundles = [b for _, b, _ in per_shot]
    stacks = [s for _, _, s in per_shot]
    if len(per_shot) == 1:
        return priors[0], bundles[0], stacks[0]
    n_win = {len(p.per_window) for p in priors}
    if len(n_win) != 1:
        raise ValueError("prior masks disagree on window count")
    prior = PriorMask(
        map=np.mean([p.map for p in priors], axis=0),
        per_window=[np.mean([p.per_window[i] for p in priors], axis=0)
                    for i in range(n_win.pop())],
        windows=priors[0].windows)
    return prior, average_bundles(bundles), average_stacks(stacks)

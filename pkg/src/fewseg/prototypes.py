"""Prototype extraction, text-aligned refinement, and triplet mining.

Support and query branches run the same alignment function: a prototype is
concatenated with the class embedding, projected to a query vector, and
attended over 1x1-conv keys/values computed from weighted feature maps
(query branch weights by the prior map, support branch by the resized
binarized mask). A two-layer FFN output is added residually to the
original prototype. Positive/negative features for the co-triplet loss are
mined from prior-map bands (query) and from the mask (support); the
discrete selections are gradient stops, the selected values stay on tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import conv2d
from .tensor import (Tensor, add, add_scalar, concat, euclidean, matmul,
                     masked_mean_rows, relu, reshape, scale, softmax, sub,
                     take_row, mean_tensors)
from .nn import he_conv, he_linear, zeros_param

__all__ = ["EmptyForegroundError", "AlignmentParams", "PrototypeBundle",
           "masked_average_prototype", "query_prototype", "visual_text_align",
           "hybrid_prototype", "mine_query_triplet", "mine_support_triplet",
           "co_triplet_loss", "average_bundles"]


class EmptyForegroundError(ValueError):
    """Support mask has no foreground at feature resolution."""


class AlignmentParams:
    """Parameters of one alignment branch.

    query_proj maps the (c + d_text) concat to c; key/value are 1x1 convs
    over the weighted feature map; the FFN widens to ffn_factor * c.
    """

    def __init__(self, rng: np.random.Generator, feat_dim: int, text_dim: int,
                 d_scale: int = 256, ffn_factor: int = 4, dtype=np.float32):
        c, d = int(feat_dim), int(text_dim)
        self.feat_dim, self.text_dim = c, d
        self.d_scale = int(d_scale)
        hidden = int(ffn_factor) * c
        dt = np.dtype(dtype).type
        self.query_proj = he_linear(rng, c + d, c, dt)
        self.key_w = he_conv(rng, 1, c, c, dt)
        self.key_b = zeros_param((c,), dt)
        self.value_w = he_conv(rng, 1, c, c, dt)
        self.value_b = zeros_param((c,), dt)
        self.ffn_w1 = he_linear(rng, c, hidden, dt)
        self.ffn_b1 = zeros_param((hidden,), dt)
        self.ffn_w2 = he_linear(rng, hidden, c, dt)
        self.ffn_b2 = zeros_param((c,), dt)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{k}": v for k, v in (
            ("query_proj", self.query_proj),
            ("key_w", self.key_w), ("key_b", self.key_b),
            ("value_w", self.value_w), ("value_b", self.value_b),
            ("ffn_w1", self.ffn_w1), ("ffn_b1", self.ffn_b1),
            ("ffn_w2", self.ffn_w2), ("ffn_b2", self.ffn_b2),
        )}


@dataclass
class PrototypeBundle:
    """Everything the prototype stage produces for one episode."""
    support_proto: Tensor
    query_proto: Tensor
    support_aug: Tensor
    query_aug: Tensor
    hybrid: Tensor
    query_pos: Tensor
    query_neg: Tensor
    support_pos: Tensor
    support_neg: Tensor

    def fields(self) -> dict[str, Tensor]:
        return self.__dict__.copy()


def _flat(features: Tensor) -> Tensor:
    if features.ndim != 3:
        raise ValueError(f"expected (H, W, C) features, got {features.shape}")
    h, w, c = features.shape
    return reshape(features, (h * w, c))


def masked_average_prototype(features: Tensor, mask: np.ndarray) -> Tensor:
    """Mean feature vector over mask-true positions.

    mask is a boolean (H, W) selection (already resized and binarized).
    Raises EmptyForegroundError when nothing is selected, so callers can
    skip the episode.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != features.shape[:2]:
        raise ValueError(f"mask {mask.shape} vs features {features.shape}")
    if not mask.any():
        raise EmptyForegroundError(
            "support mask has no foreground at feature resolution")
    return masked_mean_rows(_flat(features), mask.reshape(-1))


def query_prototype(features: Tensor, prior_map: np.ndarray,
                    threshold: float) -> Tensor:
    """Mean feature where the prior exceeds the threshold.

    Falls back to the single highest-prior position when the threshold
    selects nothing.
    """
    prior = np.asarray(prior_map)
    if prior.shape != features.shape[:2]:
        raise ValueError(f"prior {prior.shape} vs features {features.shape}")
    flat = _flat(features)
    sel = (prior > threshold).reshape(-1)
    if sel.any():
        return masked_mean_rows(flat, sel)
    return take_row(flat, int(np.argmax(prior.reshape(-1))))


def visual_text_align(prototype: Tensor, text: Tensor,
                      weighted_features: Tensor,
                      params: AlignmentParams) -> Tensor:
    """Attention-refined prototype with a residual to the original.

    The concat [prototype, text] forms the attention query; keys and values
    are 1x1 convs of the weighted feature map; scores are scaled by
    1/sqrt(d_scale). The FFN output is added to the original prototype
    (not to the concatenated vector).
    """
    if prototype.ndim != 1 or text.ndim != 1:
        raise ValueError("prototype and text must be vectors")
    if prototype.shape[0] != params.feat_dim:
        raise ValueError(f"prototype dim {prototype.shape[0]} != "
                         f"{params.feat_dim}")
    if text.shape[0] != params.text_dim:
        raise ValueError(f"text dim {text.shape[0]} != {params.text_dim}")
    h, w, c = weighted_features.shape
    if c != params.feat_dim:
        raise ValueError(f"feature channels {c} != {params.feat_dim}")

    q = matmul(concat([prototype, text]), params.query_proj)
    keys = reshape(conv2d(weighted_features, params.key_w, params.key_b),
                   (h * w, c))
    values = reshape(conv2d(weighted_features, params.value_w,
                            params.value_b), (h * w, c))
    scores = scale(matmul(keys, q), 1.0 / np.sqrt(params.d_scale))
    attended = matmul(softmax(scores), values)
    hid = relu(add(matmul(attended, params.ffn_w1), params.ffn_b1))
    out = add(matmul(hid, params.ffn_w2), params.ffn_b2)
    return add(out, prototype)


def hybrid_prototype(query_aug: Tensor, support_aug: Tensor,
                     query_weight: float = 0.5,
                     support_weight: float = 0.5) -> Tensor:
    return add(scale(query_aug, query_weight),
               scale(support_aug, support_weight))


def mine_query_triplet(features: Tensor, prior_map: np.ndarray,
                       negative_max: float, positive_low: float,
                       positive_high: float) -> tuple[Tensor, Tensor]:
    """(positive, negative) query features from prior-map bands.

    Negative: mean feature where prior < negative_max (fallback: the single
    lowest-prior position). Positive: mean feature in the ambiguous band
    positive_low < prior < positive_high (fallback: the position whose
    prior is closest to the band midpoint).
    """
    prior = np.asarray(prior_map)
    if prior.shape != features.shape[:2]:
        raise ValueError(f"prior {prior.shape} vs features {features.shape}")
    if not positive_low < positive_high:
        raise ValueError("positive band must satisfy low < high")
    flat = _flat(features)
    pf = prior.reshape(-1)

    neg_sel = pf < negative_max
    if neg_sel.any():
        negative = masked_mean_rows(flat, neg_sel)
    else:
        negative = take_row(flat, int(np.argmin(pf)))

    pos_sel = (pf > positive_low) & (pf < positive_high)
    if pos_sel.any():
        positive = masked_mean_rows(flat, pos_sel)
    else:
        mid = 0.5 * (positive_low + positive_high)
        positive = take_row(flat, int(np.argmin(np.abs(pf - mid))))
    return positive, negative


def mine_support_triplet(features: Tensor, mask: np.ndarray,
                         anchor: Tensor) -> tuple[Tensor, Tensor]:
    """(positive, negative) support features relative to an anchor.

    Positive: the foreground feature farthest (Euclidean) from the anchor,
    ties broken by lowest row-major index. Negative: mean background
    feature. A missing side falls back to the whole-image mean.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != features.shape[:2]:
        raise ValueError(f"mask {mask.shape} vs features {features.shape}")
    flat = _flat(features)
    fg = mask.reshape(-1)

    if fg.any():
        diff = flat.data - anchor.data[None, :]
        d2 = (diff * diff).sum(axis=1)
        cand = np.flatnonzero(fg)
        positive = take_row(flat, int(cand[np.argmax(d2[cand])]))
    else:
        positive = masked_mean_rows(flat, np.ones_like(fg))

    bg = ~fg
    if bg.any():
        negative = masked_mean_rows(flat, bg)
    else:
        negative = masked_mean_rows(flat, np.ones_like(fg))
    return positive, negative


def co_triplet_loss(query_anchor: Tensor, query_pos: Tensor,
                    query_neg: Tensor, support_anchor: Tensor,
                    support_pos: Tensor, support_neg: Tensor,
                    margin: float = 0.5) -> Tensor:
    """Sum of the two hinge triplet terms with plain Euclidean distances."""
    term_q = relu(add_scalar(sub(euclidean(query_anchor, query_pos),
                                 euclidean(query_anchor, query_neg)), margin))
    term_s = relu(add_scalar(sub(euclidean(support_anchor, support_pos),
                                 euclidean(support_anchor, support_neg)),
                             margin))
    return add(term_q, term_s)


def average_bundles(bundles: list[PrototypeBundle]) -> PrototypeBundle:
    """Field-wise arithmetic mean; identity for a single bundle."""
    if not bundles:
        raise ValueError("average_bundles: empty list")
    if len(bundles) == 1:
        return bundles[0]
    keys = bundles[0].fields().keys()
    return PrototypeBundle(**{
        k: mean_tensors([b.fields()[k] for b in bundles]) for k in keys})

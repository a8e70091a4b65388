"""Full episodic model: encoder, prior, prototypes, correlation, fusion.

One forward pass per episode. Support and query images share the encoder
parameters; the prior mask and correlation stacks are computed off-tape;
prototypes, fused correlation features, and the decoder carry gradients.
K-shot episodes compute per-shot (prior, prototype bundle, correlation)
triples independently and average them element-wise before decoding.

Ablation flags (config `disable`): "spm" replaces the prior with a uniform
0.5 map, "apa" uses the masked-average support prototype alone (no
alignment, no triplet loss), "tdc" zeroes the fused correlation features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .correlation import (CorrelationStack, TopDownFuse, average_stacks,
                          correlation_maps)
from .data import Episode
from .encoder import ClassEmbeddings, Encoder
from .fusion import (FusionDecoder, PredictionSet, fuse_and_predict,
                     kshot_average, segmentation_loss, total_loss)
from .kernels import resize_map_np
from .prior import PriorMask, prior_mask
from .prototypes import (AlignmentParams, EmptyForegroundError,
                         PrototypeBundle, co_triplet_loss, hybrid_prototype,
                         masked_average_prototype, mine_query_triplet,
                         mine_support_triplet, query_prototype,
                         visual_text_align)
from .tensor import Tensor, add, mean_tensors, mul_map

__all__ = ["FewShotModel", "EpisodeOutput", "predicted_mask"]

ABLATABLE = ("spm", "apa", "tdc")


@dataclass
class EpisodeOutput:
    predictions: PredictionSet
    prior: PriorMask
    bundle: PrototypeBundle | None
    loss_co: Tensor | None = None
    loss_inter: Tensor | None = None
    loss_final: Tensor | None = None
    loss_total: Tensor | None = None


def predicted_mask(predictions: PredictionSet) -> np.ndarray:
    """Argmax foreground decision at image resolution."""
    logits = predictions.final.data
    return logits[:, :, 1] > logits[:, :, 0]


class FewShotModel:

    def __init__(self, config: Config, embeddings: ClassEmbeddings,
                 rng: np.random.Generator):
        self.config = config
        self.dtype = config.dtype
        self.embeddings = embeddings
        if embeddings.dim != config.d_text:
            raise ValueError(f"embedding dim {embeddings.dim} != config "
                             f"d_text {config.d_text}")
        self.encoder = Encoder(
            rng,
            channels=(config.channels_low, config.channels_mid,
                      config.channels_high),
            blocks=(config.n1, config.n2, config.n3),
            dtype=self.dtype, freeze=config.freeze_backbone)
        self.align_query = AlignmentParams(
            rng, config.channels_mid, config.d_text, d_scale=config.d_scale,
            ffn_factor=config.ffn_factor, dtype=self.dtype)
        if config.share_align_params:
            self.align_support = self.align_query
        else:
            self.align_support = AlignmentParams(
                rng, config.channels_mid, config.d_text,
                d_scale=config.d_scale, ffn_factor=config.ffn_factor,
                dtype=self.dtype)
        self.fuse = TopDownFuse(rng, counts=(config.n1, config.n2, config.n3),
                                out_channels=config.n_hyper, dtype=self.dtype)
        decoder_in = (config.channels_mid + config.channels_mid + 1
                      + config.n_hyper)
        self.decoder = FusionDecoder(rng, decoder_in,
                                     width=config.decoder_width,
                                     dtype=self.dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v
               for k, v in self.encoder.named_parameters().items()}
        if self.config.share_align_params:
            out.update(self.align_query.named_parameters("align."))
        else:
            out.update(self.align_query.named_parameters("align_q."))
            out.update(self.align_support.named_parameters("align_s."))
        out.update(self.fuse.named_parameters("tdc."))
        out.update(self.decoder.named_parameters("decoder."))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def _check_disable(self, disable) -> set:
        disable = set(disable)
        bad = disable - set(ABLATABLE)
        if bad:
            raise ValueError(f"unknown ablation flags: {sorted(bad)}")
        return disable

    def forward_episode(self, episode: Episode, disable=(),
                        with_loss: bool = True) -> EpisodeOutput:
        cfg = self.config
        disable = self._check_disable(disable)
        if episode.k < 1:
            raise ValueError("episode needs at least one support shot")
        size = episode.query_image.shape[0]
        fs = size // Encoder.STRIDE

        qry_pyr = self.encoder.encode(Tensor(episode.query_image,
                                             dtype=self.dtype))
        qry_mid = qry_pyr.mid_top

        shot_priors, shot_stacks, shot_bundles, shot_protos = [], [], [], []
        for sup_img, sup_mask in episode.supports:
            sup_pyr = self.encoder.encode(Tensor(sup_img, dtype=self.dtype))
            mask_bin = resize_map_np(
                sup_mask.astype(np.float64), (fs, fs)) > 0.5
            if not mask_bin.any():
                raise EmptyForegroundError(
                    "support mask vanished at feature resolution")

            if "spm" in disable:
                pm = PriorMask.uniform(fs, fs, windows=cfg.windows)
            else:
                pm = prior_mask(sup_pyr.high_top, qry_pyr.high_top, sup_mask,
                                windows=tuple(map(tuple, cfg.windows)),
                                kernel=cfg.sa_kernel)
            shot_priors.append(pm)

            if "tdc" in disable:
                shot_stacks.append(CorrelationStack.zeros(
                    fs, fs, counts=(cfg.n1, cfg.n2, cfg.n3),
                    dtype=self.dtype))
            else:
                shot_stacks.append(correlation_maps(
                    sup_pyr, qry_pyr, mask_bin, reduce=cfg.corr_reduce))

            sup_proto = masked_average_prototype(sup_pyr.mid_top, mask_bin)
            if "apa" in disable:
                shot_protos.append(sup_proto)
                continue

            prior_t = Tensor(pm.map.astype(self.dtype))
            text = Tensor(np.asarray(episode.text, dtype=self.dtype))
            qry_proto = query_prototype(qry_mid, pm.map, cfg.tau1)
            weighted_q = mul_map(qry_mid, prior_t)
            weighted_s = mul_map(sup_pyr.mid_top,
                                 Tensor(mask_bin.astype(self.dtype)))
            qry_aug = visual_text_align(qry_proto, text, weighted_q,
                                        self.align_query)
            sup_aug = visual_text_align(sup_proto, text, weighted_s,
                                        self.align_support)
            hybrid = hybrid_prototype(qry_aug, sup_aug, cfg.alpha, cfg.beta)
            q_pos, q_neg = mine_query_triplet(qry_mid, pm.map, cfg.tau2,
                                              cfg.tau3, cfg.tau4)
            s_pos, s_neg = mine_support_triplet(sup_pyr.mid_top, mask_bin,
                                                sup_aug)
            shot_bundles.append(PrototypeBundle(
                support_proto=sup_proto, query_proto=qry_proto,
                support_aug=sup_aug, query_aug=qry_aug, hybrid=hybrid,
                query_pos=q_pos, query_neg=q_neg,
                support_pos=s_pos, support_neg=s_neg))

        if "apa" in disable:
            prior = _average_priors(shot_priors)
            stack = average_stacks(shot_stacks)
            bundle = None
            hybrid = mean_tensors(shot_protos)
        else:
            prior, bundle, stack = kshot_average(
                list(zip(shot_priors, shot_bundles, shot_stacks)))
            hybrid = bundle.hybrid

        if "tdc" in disable:
            hyper = Tensor(np.zeros((fs, fs, cfg.n_hyper), dtype=self.dtype))
        else:
            hyper = self.fuse(stack)

        predictions = fuse_and_predict(qry_mid, prior.map.astype(self.dtype),
                                       hybrid, hyper, self.decoder,
                                       (size, size))

        out = EpisodeOutput(predictions=predictions, prior=prior,
                            bundle=bundle)
        if with_loss:
            inter, final = segmentation_loss(predictions, episode.query_mask)
            if bundle is None:
                co = Tensor(np.asarray(0.0, dtype=self.dtype))
            else:
                co = co_triplet_loss(bundle.query_aug, bundle.query_pos,
                                     bundle.query_neg, bundle.support_aug,
                                     bundle.support_pos, bundle.support_neg,
                                     margin=cfg.triplet_margin)
            out.loss_co = co
            out.loss_inter = inter
            out.loss_final = final
            out.loss_total = total_loss(add(inter, final), co)
        return out


def _average_priors(priors: list[PriorMask]) -> PriorMask:
    if len(priors) == 1:
        return priors[0]
    n_win = len(priors[0].per_window)
    return PriorMask(
        map=np.mean([p.map for p in priors], axis=0),
        per_window=[np.mean([p.per_window[i] for p in priors], axis=0)
                    for i in range(n_win)],
        windows=priors[0].windows)

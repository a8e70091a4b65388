"""Trainable convolutional encoder and frozen class-name embeddings.

The encoder is a plain conv stack: a stride-4 stem (two 3x3 convs, each
followed by a per-channel norm, ReLU, and a 2x block mean), then three
stages of conv+norm+ReLU blocks at a single spatial size. The norm keeps
activation scale bounded through a from-scratch training run, standing in
for the batch statistics a full-size backbone would carry. Every block's
output is recorded so the correlation module can match per-block
features; the last block of each stage doubles as that stage's
representative feature map. Support and query images go through the same
parameter set (weight sharing is parameter identity, not copies).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import block_pool, channel_norm, conv2d
from .tensor import Tensor, relu
from .nn import he_conv, ones_param, zeros_param

__all__ = ["FeaturePyramid", "Encoder", "ClassEmbeddings"]


@dataclass
class FeaturePyramid:
    """Per-block feature maps at one spatial size, channels last."""
    low: list[Tensor] = field(default_factory=list)
    mid: list[Tensor] = field(default_factory=list)
    high: list[Tensor] = field(default_factory=list)

    @property
    def mid_top(self) -> Tensor:
        return self.mid[-1]

    @property
    def high_top(self) -> Tensor:
        return self.high[-1]

    def levels(self) -> list[list[Tensor]]:
        return [self.low, self.mid, self.high]


class Encoder:
    STRIDE = 4

    def __init__(self, rng: np.random.Generator, channels=(32, 64, 128),
                 blocks=(3, 6, 4), dtype=np.float32, freeze: bool = False):
        if min(blocks) < 1:
            raise ValueError(f"every stage needs at least one block: {blocks}")
        self.channels = tuple(int(c) for c in channels)
        self.blocks = tuple(int(b) for b in blocks)
        self.dtype = np.dtype(dtype).type
        cl, cm, ch = self.channels

        def conv_block(k, cin, cout):
            # no conv bias: the norm's shift would cancel it anyway
            return (he_conv(rng, k, cin, cout, self.dtype),
                    ones_param((cout,), self.dtype),
                    zeros_param((cout,), self.dtype))

        self.stem = [conv_block(3, 3, cl), conv_block(3, cl, cl)]
        self.stages = []
        for n, cin, cout in ((self.blocks[0], cl, cl),
                             (self.blocks[1], cl, cm),
                             (self.blocks[2], cm, ch)):
            stage = [conv_block(3, cin if i == 0 else cout, cout)
                     for i in range(n)]
            self.stages.append(stage)
        if freeze:
            for _, p in self.named_parameters().items():
                p.requires_grad = False

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, g, b) in enumerate(self.stem):
            out[f"stem.{i}.w"] = w
            out[f"stem.{i}.g"] = g
            out[f"stem.{i}.b"] = b
        for s, stage in enumerate(self.stages):
            for i, (w, g, b) in enumerate(stage):
                out[f"stage{s}.{i}.w"] = w
                out[f"stage{s}.{i}.g"] = g
                out[f"stage{s}.{i}.b"] = b
        return out

    def encode(self, image: Tensor) -> FeaturePyramid:
        """Image (H, W, 3) in [0, 1] to a per-block feature pyramid."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"encode expects (H, W, 3) image, got "
                             f"{image.shape}")
        h, w = image.shape[:2]
        if h % self.STRIDE or w % self.STRIDE:
            raise ValueError(
                f"image extents ({h}, {w}) must be divisible by the "
                f"downsampling factor {self.STRIDE}")
        x = image
        for wgt, gain, shift in self.stem:
            x = block_pool(relu(channel_norm(conv2d(x, wgt), gain, shift)), 2)
        pyr = FeaturePyramid()
        for stage, sink in zip(self.stages, pyr.levels()):
            for wgt, gain, shift in stage:
                x = relu(channel_norm(conv2d(x, wgt), gain, shift))
                sink.append(x)
        return pyr


class ClassEmbeddings:
    """Frozen per-class text-style embedding vectors.

    File format: one line per class, ``<class_name> <dim reals>`` separated
    by single spaces, full-precision reprs.
    """

    def __init__(self, names: list[str], table: np.ndarray):
        table = np.asarray(table)
        if table.ndim != 2 or table.shape[0] != len(names):
            raise ValueError(f"embedding table {table.shape} vs "
                             f"{len(names)} names")
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in embedding table")
        self.names = list(names)
        self.table = table
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def random(cls, names: list[str], dim: int,
               seed: int) -> "ClassEmbeddings":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        table = rng.normal(0.0, 1.0, (len(names), dim))
        return cls(names, table)

    @classmethod
    def from_file(cls, path) -> "ClassEmbeddings":
        names, rows = [], []
        with open(path, "r", encoding="ascii") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(" ")
                if len(parts) < 2:
                    raise ValueError(f"{path}:{ln}: malformed embedding line")
                names.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
        if not rows:
            raise ValueError(f"{path}: empty embedding table")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError(f"{path}: inconsistent embedding dims {widths}")
        return cls(names, np.asarray(rows, dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            for name, row in zip(self.names, self.table):
                vals = " ".join(repr(float(v)) for v in row)
                fh.write(f"{name} {vals}\n")

    def embed(self, name: str, dtype=np.float32) -> Tensor:
        """Frozen embedding vector for a class name (never trainable)."""
        if name not in self._index:
            raise KeyError(f"unknown class name '{name}'")
        row = self.table[self._index[name]].astype(dtype)
        return Tensor(row, requires_grad=False)

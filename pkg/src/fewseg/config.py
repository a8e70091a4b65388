"""Run configuration: one flat JSON object, strict keys.

Desk-scale defaults below; full-scale reference values from the source
protocol, for when someone swaps in a real backbone and datasets:

    images 473x473 (here 64x64), ResNet50 stages (here a small conv stack
    with per-stage blocks 3/6/4), word-vector dim 300, SGD lr 0.005,
    momentum 0.9, weight decay 1e-4, batch 8 (here 1 episode/step),
    training epochs in the hundreds (here `steps` episodes), evaluation
    5 rounds x (1000 episodes full scale, 200 here).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

__all__ = ["Config"]


@dataclass
class Config:
    # data and episodes
    dataset: str = "data"
    image_size: int = 64
    k_shot: int = 1
    n_folds: int = 4
    test_fold: int = 0
    seed: int = 0
    precision: str = "float32"

    # encoder
    channels_low: int = 32
    channels_mid: int = 64
    channels_high: int = 128
    n1: int = 3
    n2: int = 6
    n3: int = 4
    d_text: int = 300
    freeze_backbone: bool = False

    # prior mask
    windows: list = field(default_factory=lambda: [[5, 5], [7, 1], [1, 7]])
    sa_kernel: str = "inner"

    # prototypes
    tau1: float = 0.7
    tau2: float = 0.4
    tau3: float = 0.40
    tau4: float = 0.55
    alpha: float = 0.5
    beta: float = 0.5
    d_scale: int = 256
    ffn_factor: int = 4
    share_align_params: bool = False
    triplet_margin: float = 0.5

    # correlation fusion
    n_hyper: int = 48
    corr_reduce: str = "max"

    # decoder
    decoder_width: int = 64

    # optimization
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 1000
    checkpoint_every: int = 0

    # evaluation
    rounds: int = 5
    episodes_per_round: int = 200

    # ablation: subset of {"spm", "apa", "tdc"}
    disable: list = field(default_factory=list)

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got "
                             f"'{self.precision}'")
        if self.sa_kernel not in ("inner", "l2"):
            raise ValueError(f"unknown sa_kernel '{self.sa_kernel}'")
        if self.corr_reduce not in ("max", "mean"):
            raise ValueError(f"unknown corr_reduce '{self.corr_reduce}'")
        bad = set(self.disable) - {"spm", "apa", "tdc"}
        if bad:
            raise ValueError(f"unknown ablation flags: {sorted(bad)}")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by 32 (stride 4 "
                             "encoder, 8x decoder pyramid)")
        if not 0 <= self.test_fold < self.n_folds:
            raise ValueError(f"test_fold {self.test_fold} outside "
                             f"[0, {self.n_folds})")
        if not self.tau3 < self.tau4:
            raise ValueError("tau3 must be < tau4")
        self.windows = [list(map(int, w)) for w in self.windows]
        self.disable = list(self.disable)

    @property
    def dtype(self):
        import numpy as np
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def feature_size(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

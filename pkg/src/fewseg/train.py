"""Episodic training loop.

One episode per optimizer step. The episode-sampling generator is separate
from the weight-init generator and its state rides along in every
checkpoint, so a resumed run consumes the exact same episode sequence as an
uninterrupted one and lands on a byte-identical final checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import Config
from .data import Dataset, SplitConfig, sample_episode
from .model import FewShotModel
from .nn import SGD
from .prototypes import EmptyForegroundError
from .tensor import NonFiniteError

__all__ = ["TrainingDiverged", "TrainResult", "train"]

LOG_HEADER = "step,loss_total,loss_co,loss_inter,loss_final\n"
MAX_RESAMPLES = 64


class TrainingDiverged(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    skipped_episodes: int
    final_loss: float
    seconds: float


def _collect_arrays(model: FewShotModel, opt: SGD) -> dict[str, np.ndarray]:
    arrays = {n: p.data for n, p in model.named_parameters().items()}
    arrays["embeddings/table"] = model.embeddings.table
    arrays.update(opt.state_arrays())
    return arrays


def _save(path, config, model, opt, rng, step) -> None:
    save_checkpoint(path, config, model.embeddings.names,
                    rng.bit_generator.state, step,
                    _collect_arrays(model, opt))


def _dump_episode(path, episode, step) -> None:
    np.savez(path, step=step, class_id=episode.class_id,
             query_image=episode.query_image, query_mask=episode.query_mask,
             text=episode.text,
             **{f"support_image_{i}": img
                for i, (img, _) in enumerate(episode.supports)},
             **{f"support_mask_{i}": msk
                for i, (_, msk) in enumerate(episode.supports)})


def train(config: Config, out_dir, resume=None) -> TrainResult:
    """Run (or continue) a training job; returns paths and final stats.

    resume: path to a checkpoint written by this function with an identical
    config. Training continues from its recorded step.
    """
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = Dataset(config.dataset)
    split = SplitConfig(ds.n_classes, config.n_folds, config.test_fold)
    train_ids = split.train_classes()

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config.to_dict() != config.to_dict():
            raise ValueError("resume checkpoint was written with a "
                             "different config")
        model, velocity = restore_model(ckpt)
        opt = SGD(model.named_parameters(), lr=config.lr,
                  momentum=config.momentum, weight_decay=config.weight_decay)
        opt.load_state_arrays(velocity)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.step
    else:
        model = FewShotModel(config, ds.embeddings,
                             np.random.default_rng(config.seed))
        opt = SGD(model.named_parameters(), lr=config.lr,
                  momentum=config.momentum, weight_decay=config.weight_decay)
        # stream 1 of the run seed; stream 0 is weight init
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        start = 0

    log_path = out / "train_log.csv"
    write_header = not (log_path.exists() and log_path.stat().st_size > 0)
    skipped = 0
    disable = tuple(config.disable)
    final_loss = float("nan")

    with open(log_path, "a", encoding="utf-8") as log:
        if write_header:
            log.write(LOG_HEADER)
        for step in range(start + 1, config.steps + 1):
            for _ in range(MAX_RESAMPLES):
                episode = sample_episode(ds, train_ids, config.k_shot, rng)
                try:
                    result = model.forward_episode(episode, disable=disable)
                    break
                except EmptyForegroundError:
                    skipped += 1
                except NonFiniteError as exc:
                    dump = out / "diverged_episode.npz"
                    _dump_episode(dump, episode, step)
                    raise TrainingDiverged(
                        f"non-finite value in forward pass at step {step}; "
                        f"episode saved to {dump}") from exc
            else:
                raise RuntimeError(f"{MAX_RESAMPLES} degenerate episodes in "
                                   f"a row at step {step}")
            try:
                result.loss_total.backward()
                opt.step()
            except NonFiniteError as exc:
                dump = out / "diverged_episode.npz"
                _dump_episode(dump, episode, step)
                raise TrainingDiverged(
                    f"non-finite value in update at step {step}; episode "
                    f"saved to {dump}") from exc
            opt.zero_grad()
            final_loss = float(result.loss_total.data)
            log.write(f"{step},{final_loss!r},"
                      f"{float(result.loss_co.data)!r},"
                      f"{float(result.loss_inter.data)!r},"
                      f"{float(result.loss_final.data)!r}\n")
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                _save(out / f"checkpoint_{step:06d}.symn", config, model,
                      opt, rng, step)

    final_path = out / "checkpoint_final.symn"
    _save(final_path, config, model, opt, rng, config.steps)
    return TrainResult(checkpoint_path=final_path, log_path=log_path,
                       steps=config.steps, skipped_episodes=skipped,
                       final_loss=final_loss, seconds=time.time() - t0)

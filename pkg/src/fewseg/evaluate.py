"""Multi-round episodic evaluation on held-out classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, sample_episode
from .metrics import IoUAccumulator
from .model import FewShotModel, predicted_mask
from .prototypes import EmptyForegroundError
from .tensor import no_grad

__all__ = ["RoundReport", "EvalReport", "round_seed", "evaluate"]

MAX_RESAMPLES = 64


@dataclass
class RoundReport:
    index: int
    seed: int
    episodes: int
    skipped: int
    miou: float
    per_class: dict
    flagged: list


@dataclass
class EvalReport:
    rounds: list
    mean_miou: float
    class_ids: list
    k: int
    disable: tuple = ()

    def round_mious(self) -> list:
        return [r.miou for r in self.rounds]


def round_seed(base_seed: int, index: int) -> int:
    """Single reproducible integer seed for one evaluation round.

    Stream 2 of the run seed (0 = weight init, 1 = training episodes).
    """
    ss = np.random.SeedSequence([int(base_seed), 2, int(index)])
    return int(ss.generate_state(1)[0])


def evaluate(model: FewShotModel, dataset: Dataset, class_ids,
             k: int, rounds: int, episodes_per_round: int,
             base_seed: int, disable=(), on_episode=None) -> EvalReport:
    """Score `rounds` independent batches of episodes; IoU on foreground.

    Episodes whose support foreground vanishes at feature resolution are
    skipped, counted, and replaced. `on_episode(round, index, episode, pred)`
    is called after each scored episode; handy for dumping masks.
    """
    class_ids = [int(c) for c in class_ids]
    if not class_ids:
        raise ValueError("no evaluation classes")
    if rounds < 1 or episodes_per_round < 1:
        raise ValueError("need at least one round and one episode")
    disable = tuple(disable)
    reports = []
    for r in range(rounds):
        seed = round_seed(base_seed, r)
        rng = np.random.default_rng(seed)
        acc = IoUAccumulator()
        done = skipped = streak = 0
        while done < episodes_per_round:
            episode = sample_episode(dataset, class_ids, k, rng)
            try:
                with no_grad():
                    out = model.forward_episode(episode, disable=disable,
                                                with_loss=False)
            except EmptyForegroundError:
                skipped += 1
                streak += 1
                if streak >= MAX_RESAMPLES:
                    raise RuntimeError(f"{MAX_RESAMPLES} degenerate episodes "
                                       f"in a row in round {r}")
                continue
            streak = 0
            pred = predicted_mask(out.predictions)
            acc.update(episode.class_id, pred, episode.query_mask > 0.5)
            if on_episode is not None:
                on_episode(r, done, episode, pred)
            done += 1
        mean, per_class, flagged = acc.result()
        reports.append(RoundReport(index=r, seed=seed, episodes=done,
                                   skipped=skipped, miou=mean,
                                   per_class=per_class, flagged=flagged))
    mean_miou = float(np.mean([rep.miou for rep in reports]))
    return EvalReport(rounds=reports, mean_miou=mean_miou,
                      class_ids=class_ids, k=k, disable=disable)

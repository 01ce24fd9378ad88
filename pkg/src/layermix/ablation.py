"""Mode ablation on phantoms: every training mode across several seeds, mean held-out Dice per mode."""

from __future__ import annotations

import dataclasses
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .phantom import layered_spec
from .trainer import MODES, TrainConfig, heldout_dice, phantom_dataset, run_training

ORDER = ("baseline", "aug", "sbs", "cgd", "full")


@dataclass(frozen=True)
class AblationConfig:
    size: int = 24
    n_train: int = 10
    labeled_fraction: float = 0.2
    n_heldout: int = 8
    iters: int = 2000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    modes: tuple[str, ...] = ORDER
    # optimizer constants stay at their defaults; batch and ramp are scaled to the short run
    train: dict = field(default_factory=lambda: {"p": 2, "batch_size": 1, "rampup_iters": 600})
    data_seed: int = 1000
    workers: int | None = None  # None uses every available core

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        return TrainConfig(max_iters=self.iters, mode=mode, seed=seed, **self.train)

    def dataset(self, seed: int):
        return phantom_dataset(layered_spec(self.size), self.n_train, self.labeled_fraction,
                               self.n_heldout, seed=self.data_seed + seed)


@dataclass
class AblationResult:
    config: AblationConfig
    dice: dict  # mode -> per-seed held-out Dice
    seconds: float

    def mean(self, mode: str) -> float:
        return float(np.mean(self.dice[mode]))

    def table(self) -> str:
        lines = [f"{'mode':<9} {'mean':>7}  per-seed"]
        for mode in self.config.modes:
            seeds = " ".join(f"{d:.4f}" for d in self.dice[mode])
            lines.append(f"{mode:<9} {self.mean(mode):>7.4f}  {seeds}")
        lines.append(f"wall time {self.seconds:.1f} s")
        return "\n".join(lines)


def run_arm(config: AblationConfig, mode: str, seed: int) -> float:
    data = config.dataset(seed)
    state, _, _ = run_training(config.train_config(mode, seed), data)
    return heldout_dice(state.student, data.heldout, data.num_classes)


def _arm(args):
    return run_arm(*args)


def run_ablation(config: AblationConfig) -> AblationResult:
    for mode in config.modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    jobs = [(config, mode, seed) for mode in config.modes for seed in config.seeds]
    workers = config.workers or len(os.sched_getaffinity(0))
    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            scores = list(pool.map(_arm, jobs))
    else:
        scores = [_arm(job) for job in jobs]
    seconds = time.perf_counter() - start
    dice = {mode: [] for mode in config.modes}
    for (_, mode, _), score in zip(jobs, scores):
        dice[mode].append(score)
    return AblationResult(config, dice, seconds)


def trend_checks(result: AblationResult, margin: float = 0.02, budget: float = 600.0) -> dict:
    """The directional claims the ablation has to reproduce, each mapped to pass/fail."""
    m = result.mean
    return {
        "baseline < aug": m("baseline") < m("aug"),
        "full >= aug": m("full") >= m("aug"),
        "full >= sbs": m("full") >= m("sbs"),
        "full >= cgd": m("full") >= m("cgd"),
        f"full - baseline >= {margin}": m("full") - m("baseline") >= margin,
        f"wall time < {budget:.0f} s": result.seconds < budget,
    }


def replace(config: AblationConfig, **changes) -> AblationConfig:
    return dataclasses.replace(config, **changes)

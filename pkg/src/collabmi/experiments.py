"""The fixed occlusion suite: train every model per seed, then compare collaboration modes."""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .bench import CollabMode, run_benchmark
from .network import NetworkParams
from .scene import GridConfig, SceneConfig, SensorConfig, build_dataset
from .train import LossConfig, TrainConfig, train


@dataclass(frozen=True)
class SuiteConfig:
    n_train: int = 200
    n_test: int = 50
    n_agents: int = 3
    train_seed: int = 0
    test_seed: int = 100_000
    epochs: int = 30
    batch_size: int = 4
    seeds: tuple = (0, 1, 2, 3, 4)
    noise_stds: tuple = (0.0, 0.2, 0.4)
    loss: LossConfig = LossConfig()
    sensor: SensorConfig = SensorConfig()
    grid: GridConfig = GridConfig()

    def scene_config(self) -> SceneConfig:
        return SceneConfig(agent_count=(self.n_agents, self.n_agents))

    def train_config(self, alpha: float | None = None) -> TrainConfig:
        loss = self.loss if alpha is None else replace(self.loss, alpha=alpha)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, loss=loss, grid=self.grid)

    def modes(self) -> list:
        modes = [CollabMode("none"), CollabMode("late"), CollabMode("early")]
        modes += [CollabMode("intermediate", noise_std=s) for s in self.noise_stds]
        modes.append(CollabMode("intermediate", variant="alpha0"))
        return modes


def suite_datasets(cfg: SuiteConfig):
    sc = cfg.scene_config()
    train_set = build_dataset(cfg.n_train, cfg.train_seed, sc, cfg.sensor, cfg.grid, occlusion_only=True)
    test_set = build_dataset(cfg.n_test, cfg.test_seed, sc, cfg.sensor, cfg.grid, occlusion_only=True)
    return train_set, test_set


MODEL_KEYS = ("none", "early", "intermediate", "intermediate-alpha0")


def train_model(cfg: SuiteConfig, seed: int, key: str, train_set=None):
    """Train the model behind one checkpoint key."""
    train_set = suite_datasets(cfg)[0] if train_set is None else train_set
    if key in ("none", "early"):
        return train(train_set, cfg.train_config(), seed, key).params
    alpha = 0.0 if key.endswith("alpha0") else None
    return train(train_set, cfg.train_config(alpha=alpha), seed, "intermediate").params


def train_seed_models(cfg: SuiteConfig, seed: int, train_set) -> dict:
    """``{checkpoint_key: params}`` for every model the suite's modes need."""
    return {key: train_model(cfg, seed, key, train_set) for key in MODEL_KEYS}


def evaluate_seed(cfg: SuiteConfig, seed: int, models: dict, test_set=None) -> list:
    test_set = suite_datasets(cfg)[1] if test_set is None else test_set
    _, rows = run_benchmark({k: {seed: v} for k, v in models.items()}, cfg.modes(), test_set, [seed], cfg.grid)
    return rows


def run_seed(cfg: SuiteConfig, seed: int) -> list:
    train_set, test_set = suite_datasets(cfg)
    return evaluate_seed(cfg, seed, train_seed_models(cfg, seed, train_set), test_set)


def _train_task(cfg, seed, key) -> bytes:
    return train_model(cfg, seed, key).to_bytes()


def _eval_task(cfg, seed, blobs) -> list:
    return evaluate_seed(cfg, seed, {k: NetworkParams.from_bytes(b) for k, b in blobs.items()})


def run_suite(cfg: SuiteConfig = SuiteConfig(), workers: int | None = None) -> dict:
    """Rows for every (mode, seed), ordered by seed then mode, plus the wall time.

    Every (seed, model) training run is independent, so with several workers
    they are spread over processes; results do not depend on the worker count.
    """
    start = time.perf_counter()
    tasks = [(seed, key) for seed in cfg.seeds for key in MODEL_KEYS]
    workers = workers or min(len(tasks), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blobs = list(pool.map(_train_task, [cfg] * len(tasks), *zip(*tasks)))
            by_seed = [{k: blobs[tasks.index((s, k))] for k in MODEL_KEYS} for s in cfg.seeds]
            per_seed = list(pool.map(_eval_task, [cfg] * len(cfg.seeds), cfg.seeds, by_seed))
    else:
        per_seed = [run_seed(cfg, s) for s in cfg.seeds]
    rows = [r for chunk in per_seed for r in chunk]
    return {"rows": rows, "seconds": time.perf_counter() - start, "workers": workers}


def mean_ap(rows, label: str, noise_std: float = 0.0, key: str = "ap50") -> float:
    return float(np.mean([r[key] for r in rows if r["mode"] == label and r["noise_std"] == noise_std]))


def seed_ap(rows, label: str, seed: int, noise_std: float = 0.0, key: str = "ap50") -> float:
    (value,) = [r[key] for r in rows if r["mode"] == label and r["seed"] == seed and r["noise_std"] == noise_std]
    return value

"""The desk-scale training protocol shared by the acceptance suite and scripts/.

Training set: pairs 0..199 of the seed-7 stream (N=256, half outliers,
sigma=1e-3).  Held-out set: pairs 200..249 of the same stream.  Both pass
through the f32 storage quantization so they match what a dataset file holds.
"""

from __future__ import annotations

import dataclasses
import functools
import time
from dataclasses import dataclass

from . import evaluation, synthdata
from .network import NetworkConfig, build_model
from .training import LossConfig, LrSchedule, train

DESK_DATA = synthdata.DatasetSpec(num_pairs=200, n=256, outlier_rate=0.5, noise=1e-3, seed=7)
DESK_HOLDOUT = 50
DESK_NET = NetworkConfig(d=32, L=3, H=4, po=2, num_modules=2)
# the full-scale warmup/decay constants are sized for 10^5 iterations; at 2000
# iterations a short warmup and a larger base rate are used instead
DESK_SCHEDULE = LrSchedule(base=3e-3, warmup=100, decay_factor=0.4, decay_interval=100_000)
DESK_ITERATIONS = 2000
DESK_BATCH = 8


@functools.lru_cache(maxsize=1)
def desk_datasets():
    train_pairs = synthdata.quantize(synthdata.generate_dataset(DESK_DATA))
    held = dataclasses.replace(DESK_DATA, num_pairs=DESK_HOLDOUT)
    held_pairs = synthdata.quantize(synthdata.generate_dataset(held, start=DESK_DATA.num_pairs))
    return train_pairs, held_pairs


@dataclass
class DeskRun:
    variant: str
    seed: int
    untrained: evaluation.MetricsReport
    trained: evaluation.MetricsReport
    losses: list
    train_seconds: float
    total_seconds: float
    skipped: int


def desk_run(variant: str = "S-then-C", seed: int = 0, iterations: int = DESK_ITERATIONS,
             net: NetworkConfig = DESK_NET, schedule: LrSchedule = DESK_SCHEDULE) -> DeskRun:
    t0 = time.perf_counter()
    train_pairs, held_pairs = desk_datasets()
    cfg = dataclasses.replace(net, block_variant=variant)
    untrained = evaluation.evaluate(build_model(cfg, seed), held_pairs, method=f"{variant} untrained")
    t1 = time.perf_counter()
    res = train(train_pairs, cfg, LossConfig(), schedule, iterations=iterations, seed=seed,
                batch_size=DESK_BATCH, log_every=0)
    t2 = time.perf_counter()
    trained = evaluation.evaluate(res.model, held_pairs, method=variant)
    return DeskRun(variant, seed, untrained, trained, res.losses, t2 - t1,
                   time.perf_counter() - t0, res.skipped)

"""Seeded night-localization benchmark: routed vs shared network, single vs multi-scale."""

from __future__ import annotations

import logging
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .config import RunConfig
from .pipeline import errors_by_condition, localize_queries, make_dataset, make_index, random_baseline
from .evaluation import threshold_accuracy
from .training import train

log = logging.getLogger(__name__)

COARSE = 2  # index of the (5, 10) bin


@dataclass
class BenchmarkResult:
    seeds: list
    accuracy: dict = field(default_factory=dict)  # run name -> per-seed coarse night accuracy
    random_pose: list = field(default_factory=list)
    seconds: float = 0.0

    def median(self, name: str) -> float:
        return statistics.median(self.accuracy[name])

    @property
    def random_median(self) -> float:
        return statistics.median(self.random_pose)

    def claims(self) -> dict[str, bool]:
        r4, r4ms, b0 = self.median("ns4"), self.median("ns4_ms"), self.median("ns0")
        floor = 3.0 * self.random_median
        return {
            "routed >= shared": bool(r4 >= b0),
            "routed >= 3x random": bool(r4 >= floor),
            "shared >= 3x random": bool(b0 >= floor),
            "routed multi-scale >= single-scale": bool(r4ms >= r4),
        }


def _night_coarse(cfg: RunConfig, ds, params, multiscale: bool) -> float:
    run = cfg.with_overrides(retrieval={"multiscale": multiscale})
    index = make_index(ds, params, run.network, run)
    preds = localize_queries(ds, index, params, run.network, run.retrieval)
    errors = [e for errs in errors_by_condition(ds, preds).values() for e in errs]
    return threshold_accuracy(errors, run.evaluation.bins)[COARSE]


def _one(job: tuple[dict, int, int]) -> tuple[int, int, dict, float]:
    base, seed, n_s = job
    cfg = RunConfig().with_overrides(**base).with_overrides(seed=seed, network={"N_S": n_s})
    ds = make_dataset(cfg)
    state = train(ds, cfg.network, cfg.training, cfg.mining, seed)
    acc = {f"ns{n_s}": _night_coarse(cfg, ds, state.params, False)}
    if n_s > 0:
        acc[f"ns{n_s}_ms"] = _night_coarse(cfg, ds, state.params, True)
    rnd = random_baseline(ds, cfg.evaluation.bins)[COARSE]
    log.info("seed %d N_S=%d: %s (random %.2f)", seed, n_s, acc, rnd)
    return seed, n_s, acc, rnd


def run_benchmark(base: RunConfig | None = None, seeds=(0, 1, 2), workers: int | None = None) -> BenchmarkResult:
    """Train N_S=4 and N_S=0 for every seed and score coarse-bin night accuracy.

    Jobs run in a process pool sized to the machine; results do not depend
    on the pool size.
    """
    base_dict = (base or RunConfig().validate()).to_dict()
    base_dict.pop("seed")
    jobs = [(base_dict, s, n) for s in seeds for n in (4, 0)]
    workers = workers or min(len(jobs), os.cpu_count() or 1)
    t0 = time.perf_counter()
    if workers == 1:
        outs = [_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_one, jobs))
    res = BenchmarkResult(list(seeds))
    rnd = {}
    for seed, _, acc, r in sorted(outs):
        for name, v in acc.items():
            res.accuracy.setdefault(name, []).append(v)
        rnd[seed] = r
    res.random_pose = [rnd[s] for s in seeds]
    res.seconds = time.perf_counter() - t0
    return res

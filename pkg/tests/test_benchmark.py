from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from condloc.benchmark import BenchmarkResult, run_benchmark
from condloc.config import parse_config

SMALL = Path(__file__).resolve().parents[1] / "configs" / "small.json"


def test_claims_use_medians():
    res = BenchmarkResult([0, 1, 2], {"ns4": [9.0, 1.0, 8.0], "ns4_ms": [8.0, 9.0, 9.0], "ns0": [7.0, 8.0, 0.0]},
                          [2.0, 2.5, 3.0])
    assert res.median("ns4") == 8.0 and res.random_median == 2.5
    assert res.claims() == {
        "routed >= shared": True,
        "routed >= 3x random": True,
        "shared >= 3x random": False,
        "routed multi-scale >= single-scale": True,
    }


def test_small_run_serializes():
    res = run_benchmark(parse_config(SMALL), seeds=(0,), workers=1)
    assert set(res.accuracy) == {"ns4", "ns4_ms", "ns0"}
    assert all(0.0 <= v <= 100.0 for accs in res.accuracy.values() for v in accs)
    json.dumps({**asdict(res), "claims": res.claims()})

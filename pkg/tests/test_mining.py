from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condloc.errors import MiningError
from condloc.geometry import CameraPose, axis_angle_quat
from condloc.mining import (
    MiningConfig,
    TrainingTuple,
    build_training_tuples,
    condition_balanced_positives,
    covisibility_positives,
    covisibility_ratio,
    hard_negative_mine,
    negatives_of,
    pose_positives,
    read_tuples,
    resample_reference,
    write_tuples,
)
from condloc.synthworld import CapturedImage, DatasetConfig, WorldConfig, generate_dataset

PIX = np.zeros((4, 4, 3))


def img(iid, visible, condition="reference-day", yaw=0.0, t=(0.0, 0.0, 0.0), split="reference"):
    q = tuple(float(v) for v in axis_angle_quat([0, 0, 1], yaw))
    return CapturedImage(PIX, condition, CameraPose(q, t), frozenset(visible), iid, split)


def angle_between(a: CameraPose, b: CameraPose) -> float:
    """Geodesic angle from rotation matrices, independent of the quaternion formula."""
    c = (np.trace(a.matrix.T @ b.matrix) - 1.0) / 2.0
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


@pytest.fixture(scope="module")
def sixty():
    cfg = DatasetConfig(
        loop_radius=15.0, reference_count=30, mixed_per_condition=5, query_count=2,
        mixed_arcs=[[0.0, 150.0]], query_arcs=[[230.0, 300.0]], lateral_jitter=0.5, yaw_jitter=2.0,
    )
    world = WorldConfig(num_landmarks=300, extent=[[-40.0, -40.0, 0.0], [40.0, 40.0, 5.0]])
    ds = generate_dataset(world, cfg, seed=11)
    pool = ds.split("reference") + ds.split("mixed")
    assert len(pool) == 60
    return ds, pool


class TestCovisibility:
    def test_identical_sets(self):
        q = img("q", {1, 2, 3})
        assert covisibility_positives(q, [q, img("a", {1, 2, 3})]) == {"a"}

    def test_disjoint(self):
        assert covisibility_positives(img("q", {1, 2}), [img("a", {3, 4})]) == set()

    def test_half_overlap_excluded(self):
        q = img("q", range(10))
        assert covisibility_ratio(q, img("a", range(5))) == 0.5
        assert covisibility_positives(q, [img("a", range(5))], 0.6) == set()

    def test_asymmetric(self):
        q = img("q", range(10))
        big = img("big", [*range(7), *range(100, 120)])
        assert "big" in covisibility_positives(q, [big], 0.6)
        assert "q" not in covisibility_positives(big, [q], 0.6)

    def test_empty_query(self):
        with pytest.raises(MiningError):
            covisibility_positives(img("q", set()), [img("a", {1})])

    def test_brute_force(self, sixty):
        _, pool = sixty
        for q in pool:
            if not q.visible_ids:
                continue
            expected = {c.image_id for c in pool if c is not q
                        and len(q.visible_ids & c.visible_ids) / len(q.visible_ids) > 0.6}
            assert covisibility_positives(q, pool, 0.6) == expected


class TestPosePositives:
    def test_identical_pose(self):
        assert pose_positives(img("q", {1}), [img("a", {2})], 10, 8, "reference-day") == {"a"}

    def test_rotation_fifteen_excluded(self):
        assert pose_positives(img("q", {1}), [img("a", {1}, yaw=15.0)], 10, 8) == set()

    def test_rotation_either_side_of_threshold(self):
        assert pose_positives(img("q", {1}), [img("a", {1}, yaw=10.001)], 10, 8) == set()
        assert pose_positives(img("q", {1}), [img("a", {1}, yaw=9.999)], 10, 8) == {"a"}

    def test_translation_ten_excluded(self):
        assert pose_positives(img("q", {1}), [img("a", {1}, t=(10.0, 0.0, 0.0))], 10, 8) == set()

    def test_condition_filter(self):
        a = img("a", {1}, condition="night")
        assert pose_positives(img("q", {1}), [a], 10, 8, "dawn") == set()
        assert pose_positives(img("q", {1}), [a], 10, 8, "night") == {"a"}

    def test_brute_force(self, sixty):
        _, pool = sixty
        for q in pool:
            for cond in {c.condition for c in pool}:
                expected = {
                    c.image_id for c in pool
                    if c is not q and c.condition == cond and angle_between(q.pose, c.pose) < 10.0
                    and np.linalg.norm(q.pose.center - c.pose.center) < 8.0
                }
                assert pose_positives(q, pool, 10.0, 8.0, cond) == expected


class TestNegatives:
    def test_shared_landmark_excluded(self):
        q = img("q", {1, 2})
        far = img("a", {2, 9}, yaw=90.0, t=(50.0, 0.0, 0.0))
        assert negatives_of(q, [far]) == set()

    def test_query_never_returned(self):
        q = img("q", {1})
        assert negatives_of(q, [q]) == set()

    def test_brute_force(self, sixty):
        _, pool = sixty
        for q in pool:
            if not q.visible_ids:
                continue
            positives = covisibility_positives(q, pool) | pose_positives(q, pool)
            overlapping = {c.image_id for c in pool if c.visible_ids & q.visible_ids}
            near = {c.image_id for c in pool if angle_between(q.pose, c.pose) < 10.0
                    or np.linalg.norm(q.pose.center - c.pose.center) < 8.0}
            expected = {c.image_id for c in pool} - {q.image_id} - positives - overlapping - near
            got = negatives_of(q, pool)
            assert got == expected
            assert not got & positives


class TestBalanced:
    def test_three_each(self):
        pools = {"a": [f"a{i}" for i in range(10)], "b": ["b0", "b1", "b2"], "c": [f"c{i}" for i in range(7)]}
        out = condition_balanced_positives(pools, 3, 0)
        assert sum(x.startswith("a") for x in out) == 3
        assert sum(x.startswith("b") for x in out) == 3
        assert sum(x.startswith("c") for x in out) == 3
        assert len(set(out)) == 9

    def test_empty_pool_contributes_nothing(self):
        out = condition_balanced_positives({"a": ["a0", "a1"], "b": []}, 2, 0)
        assert sorted(out) == ["a0", "a1"]

    def test_deterministic(self):
        pools = {"a": [f"a{i}" for i in range(20)]}
        assert condition_balanced_positives(pools, 4, 5) == condition_balanced_positives(pools, 4, 5)

    def test_all_empty(self):
        with pytest.raises(MiningError):
            condition_balanced_positives({"a": [], "b": []}, 2, 0)


class TestHardNegatives:
    def test_whole_pool_sorted(self):
        pool = np.array([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])
        assert hard_negative_mine(np.array([1.0, 0.0]), pool, ["x", "y", "z"], 5) == ["y", "z", "x"]

    def test_basis(self):
        assert hard_negative_mine(np.array([1.0, 0.0]), np.eye(2), ["e1", "e2"], 1) == ["e1"]

    def test_tie_to_smaller_id(self):
        pool = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert hard_negative_mine(np.array([1.0, 0.0]), pool, ["b", "a"], 1) == ["a"]

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        r = np.random.default_rng(seed)
        pool = r.normal(size=(20, 6))
        pool /= np.linalg.norm(pool, axis=1, keepdims=True)
        q = pool[0] + 0.1 * r.normal(size=6)
        ids = [f"n{i:02d}" for i in range(20)]
        sims = pool @ q
        expected = [ids[i] for i in sorted(range(20), key=lambda i: (-sims[i], ids[i]))][:7]
        assert hard_negative_mine(q, pool, ids, 7) == expected

    def test_empty(self):
        with pytest.raises(MiningError):
            hard_negative_mine(np.ones(2), np.zeros((0, 2)), [], 3)


class TestResample:
    ids = [f"r{i:03d}" for i in range(50)]

    def test_full(self):
        assert resample_reference(self.ids, 50, 0, 3) == self.ids

    def test_epochs_differ(self):
        assert resample_reference(self.ids, 20, 0, 0) != resample_reference(self.ids, 20, 0, 1)

    def test_deterministic(self):
        assert resample_reference(self.ids, 20, 4, 2) == resample_reference(self.ids, 20, 4, 2)

    def test_too_many(self):
        with pytest.raises(MiningError):
            resample_reference(self.ids, 51, 0, 0)


class TestTuples:
    def test_query_inside_rejected(self):
        with pytest.raises(MiningError):
            TrainingTuple("q", ("q",), ("n",))

    def test_overlap_rejected(self):
        with pytest.raises(MiningError):
            TrainingTuple("q", ("a",), ("a",))

    def test_build_default_lengths_and_labels(self, sixty):
        ds, pool = sixty
        cfg = MiningConfig(P=4, N=4, reference_resample_count=30)
        tuples = build_training_tuples(ds, cfg, epoch=0, seed=1)
        assert tuples
        by_id = ds.by_id
        for t in tuples:
            assert len(t.image_ids) == 9
            q = by_id[t.query]
            for p in t.positives:
                c = by_id[p]
                cov = len(q.visible_ids & c.visible_ids) / len(q.visible_ids) > 0.6
                close = angle_between(q.pose, c.pose) < 10.0 and np.linalg.norm(q.pose.center - c.pose.center) < 8.0
                assert cov or close
            for n in t.negatives:
                c = by_id[n]
                assert not q.visible_ids & c.visible_ids
                assert angle_between(q.pose, c.pose) >= 10.0 - 1e-9
                assert np.linalg.norm(q.pose.center - c.pose.center) >= 8.0

    def test_default_tuple_length(self):
        ds = generate_dataset(WorldConfig(), DatasetConfig(reference_count=400, mixed_per_condition=6,
                                                           query_count=2), seed=0)
        tuples = build_training_tuples(ds, MiningConfig(), 0, 0)
        assert tuples and all(len(t.image_ids) == 17 for t in tuples)

    def test_strict_skips_short_queries(self, sixty):
        ds, _ = sixty
        big = MiningConfig(P=40, N=2, reference_resample_count=30)
        with pytest.raises(MiningError):
            build_training_tuples(ds, big, 0, 0)
        lenient = build_training_tuples(ds, MiningConfig(P=40, N=2, reference_resample_count=30, strict=False), 0, 0)
        assert all(len(t.positives) == 40 for t in lenient)

    def test_reproducible(self, sixty):
        ds, _ = sixty
        cfg = MiningConfig(P=3, N=3, reference_resample_count=20)
        assert build_training_tuples(ds, cfg, 2, 9) == build_training_tuples(ds, cfg, 2, 9)

    def test_round_trip(self, sixty, tmp_path):
        ds, _ = sixty
        tuples = build_training_tuples(ds, MiningConfig(P=3, N=3, reference_resample_count=20), 0, 0)
        write_tuples(tuples, tmp_path / "t.jsonl", {"config_hash": "h"})
        header, back = read_tuples(tmp_path / "t.jsonl")
        assert header == {"config_hash": "h"} and back == tuples


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(0, 30), min_size=1), st.sets(st.integers(0, 30)), st.floats(0.05, 1.0))
def test_covisibility_matches_definition(q_ids, c_ids, t_i):
    q, c = img("q", q_ids), img("c", c_ids)
    expected = len(q_ids & c_ids) / len(q_ids) > t_i
    assert ("c" in covisibility_positives(q, [c], t_i)) == expected

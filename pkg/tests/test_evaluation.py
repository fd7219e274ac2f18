import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_scene
from corrprune import evaluation as ev
from corrprune import geometry as geo
from corrprune import network as nw
from corrprune import synthdata as sd


class TestPrf:
    def test_perfect(self):
        assert ev.prf([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0)

    def test_counting_example(self):
        assert ev.prf([1, 1, 0, 0], [1, 0, 1, 0]) == (0.5, 0.5, 0.5)

    def test_zero_convention(self):
        assert ev.prf([0, 0, 0], [1, 1, 0]) == (0.0, 0.0, 0.0)

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=80))
    def test_confusion_matrix_oracle(self, rows):
        pred = [a for a, _ in rows]
        lab = [b for _, b in rows]
        tp = sum(a and b for a, b in rows)
        fp = sum(a and not b for a, b in rows)
        fn = sum(b and not a for a, b in rows)
        p, r, f = ev.prf(pred, lab)
        assert p == (tp / (tp + fp) if tp + fp else 0.0)
        assert r == (tp / (tp + fn) if tp + fn else 0.0)
        if p + r:
            assert abs(f - 2 * p * r / (p + r)) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ev.prf([1, 0], [1])


class TestPoseMap:
    def test_perfect(self):
        assert ev.pose_map([(0, 0)] * 4, 5) == 1.0

    def test_max_rule(self):
        assert ev.pose_map([(3, 2), (6, 1), (4, 10)], 5) == pytest.approx(1 / 3)

    @given(st.lists(st.tuples(st.floats(0, 90), st.floats(0, 90)), min_size=1, max_size=30),
           st.floats(0, 45), st.floats(0, 45))
    def test_monotone(self, errs, a, b):
        lo, hi = sorted((a, b))
        assert ev.pose_map(errs, lo) <= ev.pose_map(errs, hi)
        assert ev.pose_map_binned(errs, max(lo, 1)) <= ev.pose_map_binned(errs, max(hi, 1)) + 1e-12

    def test_binned_example(self):
        # worst errors 0.5, 2.5, 7: bins 1..5 see 1, 1, 2, 2, 2 of 3
        got = ev.pose_map_binned([(0.5, 0.1), (2.5, 2.0), (1.0, 7.0)], 5)
        assert got == pytest.approx(np.mean([1, 1, 2, 2, 2]) / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            ev.pose_map([], 5)


def mixed_set(seed, n=200, inlier_frac=0.3):
    """Noise-free inliers mixed with rejection-sampled outliers."""
    spec = sd.DatasetSpec(num_pairs=1, n=n, outlier_rate=1 - inlier_frac, noise=0.0, seed=seed)
    return sd.generate_dataset(spec)[0]


class TestRansac:
    def test_mask_is_consensus_of_returned_model(self):
        pair = mixed_set(0)
        res = ev.ransac_baseline(pair.corrs, 300, rng=np.random.default_rng(0))
        d = geo.symmetric_epipolar_distance(res.E, pair.corrs)
        np.testing.assert_array_equal(res.mask, (d < geo.DEFAULT_EPS).astype(np.uint8))
        assert res.mask.sum() >= 8

    def test_single_iteration_all_inliers(self):
        pose, corrs = random_scene(3, 40)
        res = ev.ransac_baseline(corrs, 1, rng=np.random.default_rng(1))
        E = geo.essential_from_pose(pose)
        np.testing.assert_allclose(res.E, geo.canonical_sign(np.sqrt(2) * E / np.linalg.norm(E)), atol=1e-8)
        assert res.mask.all()

    def test_minimal_set(self):
        _, corrs = random_scene(4, 8)
        res = ev.ransac_baseline(corrs, 5, rng=np.random.default_rng(0))
        assert res.mask.sum() == 8

    def test_high_inlier_recovery(self):
        pair = mixed_set(2, inlier_frac=0.7)
        res = ev.ransac_baseline(pair.corrs, 300, rng=np.random.default_rng(5))
        pose = geo.decompose_essential(res.E, pair.corrs[res.mask.astype(bool)])
        assert max(geo.pose_error(pose, pair.pose)) < 1.0
        np.testing.assert_array_equal(res.mask, pair.labels)

    def test_seeded(self):
        pair = mixed_set(1, inlier_frac=0.6)
        a = ev.ransac_baseline(pair.corrs, 50, rng=np.random.default_rng(3))
        b = ev.ransac_baseline(pair.corrs, 50, rng=np.random.default_rng(3), chunk=7)
        assert np.array_equal(a.E, b.E) and np.array_equal(a.mask, b.mask)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            ev.ransac_baseline(np.zeros((7, 4)), 10)
        with pytest.raises(ValueError):
            ev.ransac_baseline(random_scene(0, 20)[1], 0)


@pytest.fixture(scope="module")
def small_eval():
    pairs = sd.generate_dataset(sd.DatasetSpec(num_pairs=4, n=64, outlier_rate=0.5, noise=0.0, seed=3))
    model = nw.build_model(nw.NetworkConfig(d=16, L=2, H=2, po=1), 0).eval()
    return model, pairs


class TestEvaluate:
    def test_oracle_is_perfect(self, small_eval):
        model, pairs = small_eval
        rep = ev.evaluate(model, pairs, oracle=True)
        assert (rep.precision, rep.recall, rep.f_score, rep.map5) == (1.0, 1.0, 1.0, 1.0)
        assert all(max(r.rot_err, r.trans_err) < 1e-3 for r in rep.pairs)

    def test_untrained_is_poor(self, small_eval):
        model, pairs = small_eval
        rep = ev.evaluate(model, pairs)
        assert rep.f_score < 0.5
        for r in rep.pairs:
            if r.precision + r.recall:
                assert abs(r.f_score - 2 * r.precision * r.recall / (r.precision + r.recall)) < 1e-9

    def test_deterministic(self, small_eval):
        model, pairs = small_eval
        a, b = ev.evaluate(model, pairs), ev.evaluate(model, pairs)
        strip = lambda rep: [(r.rot_err, r.trans_err, r.f_score) for r in rep.pairs]
        assert strip(a) == strip(b)

    def test_failures_count_in_denominator(self, small_eval):
        model, pairs = small_eval
        bad = sd.ScenePair(**{**pairs[0].__dict__, "corrs": pairs[0].corrs[:20], "labels": pairs[0].labels[:20]})
        rep = ev.evaluate(model, [pairs[0], bad], oracle=True)
        assert rep.failures == 1 and rep.map5 == 0.5
        with pytest.raises(ValueError):
            ev.evaluate(model, [bad], strict=True)

    def test_ransac_report(self, small_eval):
        _, pairs = small_eval
        rep = ev.evaluate_ransac(pairs, 200)
        assert rep.method == "RANSAC" and len(rep.pairs) == 4


class TestReports:
    def make(self):
        recs = [ev.PairRecord(i, 0.1 * i, 0.2 * i, 0.9, 0.8, 2 * 0.72 / 1.7, 1.5 + i) for i in range(3)]
        return ev._aggregate("LeCoT", recs)

    def test_csv_roundtrip(self):
        rep = self.make()
        rows = ev.parse_csv_report(ev.render_report([rep], "csv"))
        assert len(rows) == 4
        for rec, row in zip(rep.pairs, rows):
            assert float(row["rot_err"]) == pytest.approx(rec.rot_err, rel=1e-8)
            assert float(row["f_score"]) == pytest.approx(rec.f_score, rel=1e-8)
        assert rows[-1]["kind"] == "aggregate"
        assert float(rows[-1]["map5"]) == pytest.approx(rep.map5, rel=1e-8)

    def test_empty_report(self):
        rows = ev.parse_csv_report(ev.render_report([ev._aggregate("LeCoT", [])], "csv"))
        assert len(rows) == 1 and float(rows[0]["f_score"]) == 0.0

    def test_jsonl_line_count(self):
        lines = ev.render_report(self.make(), "jsonl").splitlines()
        assert len(lines) == 4
        assert json.loads(lines[-1])["kind"] == "aggregate"

    def test_text_table(self):
        text = ev.render_report([self.make(), ev._aggregate("RANSAC", [])], "text")
        lines = text.splitlines()
        assert "mAP5" in lines[0] and "mAP20" in lines[0]
        assert lines[1].split()[0] == "LeCoT" and lines[2].split()[0] == "RANSAC"

    def test_deterministic_and_file(self, tmp_path):
        rep = self.make()
        ev.emit_report(rep, tmp_path / "r.csv", "csv")
        assert (tmp_path / "r.csv").read_text() == ev.render_report(rep, "csv")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            ev.render_report(self.make(), "xml")

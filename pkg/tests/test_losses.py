import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcontrast import autodiff as ad
from seqcontrast.autodiff import Var
from seqcontrast.errors import LossUndefinedError
from seqcontrast.losses import (
    LossReport,
    LossWeights,
    loss_3d,
    loss_3d4d,
    loss_4d,
    loss_total,
    simsiam_pair,
)


def neg_cos(a, b):
    return -float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))


def make_feats(rng, t, n, c, as_param=False):
    mk = ad.parameter if as_param else Var
    return [mk(rng.normal(size=(n, c))) for _ in range(t)]


def pairwise_maps(rng, t, n, m):
    maps = {}
    for i in range(t):
        for j in range(i + 1, t):
            maps[(i, j)] = (
                rng.integers(0, n, size=m),
                rng.integers(0, n, size=m),
            )
    return maps


def oracle_pair_loss(p, z, pair_maps, normalize):
    """Nested-loop reference for the inter-frame losses."""
    terms = []
    for (i, j) in sorted(pair_maps):
        ia, ib = pair_maps[(i, j)]
        if len(ia) == 0:
            continue
        vals = []
        for a, b in zip(ia, ib):
            vals.append(0.5 * neg_cos(p[i].value[a], z[j].value[b])
                        + 0.5 * neg_cos(p[j].value[b], z[i].value[a]))
        terms.append(np.mean(vals) if normalize else np.sum(vals))
    return np.mean(terms) if normalize else np.sum(terms)


def oracle_frame_loss(p3, z3, p4, z4, per_frame, normalize):
    terms = []
    for i, idx in enumerate(per_frame):
        if len(idx) == 0:
            continue
        vals = []
        for a in idx:
            vals.append(0.5 * neg_cos(p3[i].value[a], z4[i].value[a])
                        + 0.5 * neg_cos(p4[i].value[a], z3[i].value[a]))
        terms.append(np.mean(vals) if normalize else np.sum(vals))
    return np.mean(terms) if normalize else np.sum(terms)


class TestSimsiamPair:
    def test_identical_views_hit_minimum(self):
        v = np.random.default_rng(0).normal(size=8)
        out = simsiam_pair(Var(v), Var(v), Var(v), Var(v))
        assert out.value == pytest.approx(-1.0)

    def test_z_side_receives_no_gradient(self):
        rng = np.random.default_rng(1)
        p1, z2 = ad.parameter(rng.normal(size=6)), ad.parameter(rng.normal(size=6))
        p2, z1 = ad.parameter(rng.normal(size=6)), ad.parameter(rng.normal(size=6))
        g = ad.grad(simsiam_pair(p1, z2, p2, z1), {"p1": p1, "z2": z2, "p2": p2, "z1": z1})
        np.testing.assert_array_equal(g["z1"], 0.0)
        np.testing.assert_array_equal(g["z2"], 0.0)
        assert np.any(g["p1"] != 0.0) and np.any(g["p2"] != 0.0)


class TestLoss3D:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), normalize=st.booleans())
    def test_matches_bruteforce(self, seed, normalize):
        rng = np.random.default_rng(seed)
        t, n, c = 3, 7, 5
        p, z = make_feats(rng, t, n, c), make_feats(rng, t, n, c)
        maps = pairwise_maps(rng, t, n, 4)
        got, used = loss_3d(p, z, maps, normalize=normalize)
        assert used == 4 * len(maps)
        assert abs(float(got.value) - oracle_pair_loss(p, z, maps, normalize)) <= 1e-12

    def test_bounds_when_normalized(self):
        rng = np.random.default_rng(2)
        p, z = make_feats(rng, 2, 5, 4), make_feats(rng, 2, 5, 4)
        val, _ = loss_3d(p, z, pairwise_maps(rng, 2, 5, 3))
        assert -1.0 - 1e-12 <= float(val.value) <= 1.0 + 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        p, z = make_feats(rng, 2, 5, 4), make_feats(rng, 2, 5, 4)
        maps = pairwise_maps(rng, 2, 5, 3)
        a, _ = loss_3d(p, z, maps)
        b, _ = loss_3d([Var(x.value * 37.0) for x in p], [Var(x.value * 0.01) for x in z], maps)
        assert abs(float(a.value) - float(b.value)) <= 1e-12

    def test_empty_pairs_skipped_all_empty_raises(self):
        rng = np.random.default_rng(4)
        p, z = make_feats(rng, 2, 5, 4), make_feats(rng, 2, 5, 4)
        empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        maps = pairwise_maps(rng, 2, 5, 3)
        maps[(0, 1)] = empty
        with pytest.raises(LossUndefinedError):
            loss_3d(p, z, maps)

    def test_gradient_stops_on_z(self):
        rng = np.random.default_rng(5)
        p = make_feats(rng, 2, 5, 4, as_param=True)
        z = make_feats(rng, 2, 5, 4, as_param=True)
        val, _ = loss_3d(p, z, pairwise_maps(rng, 2, 5, 3))
        g = ad.grad(val, {"p0": p[0], "z0": z[0]})
        np.testing.assert_array_equal(g["z0"], 0.0)
        assert np.any(g["p0"] != 0.0)

    def test_loss_4d_shares_semantics(self):
        rng = np.random.default_rng(6)
        p, z = make_feats(rng, 3, 6, 4), make_feats(rng, 3, 6, 4)
        maps = pairwise_maps(rng, 3, 6, 2)
        a, ua = loss_3d(p, z, maps)
        b, ub = loss_4d(p, z, maps)
        assert float(a.value) == float(b.value) and ua == ub


class TestLoss3D4D:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), normalize=st.booleans())
    def test_matches_bruteforce(self, seed, normalize):
        rng = np.random.default_rng(seed)
        t, n, c = 3, 6, 4
        p3, z3 = make_feats(rng, t, n, c), make_feats(rng, t, n, c)
        p4, z4 = make_feats(rng, t, n, c), make_feats(rng, t, n, c)
        per_frame = [rng.integers(0, n, size=5) for _ in range(t)]
        got, used = loss_3d4d(p3, z3, p4, z4, per_frame, normalize=normalize)
        assert used == 5 * t
        assert abs(float(got.value) - oracle_frame_loss(p3, z3, p4, z4, per_frame, normalize)) <= 1e-12

    def test_predictors_get_no_gradient_by_default(self):
        rng = np.random.default_rng(7)
        t, n, c = 2, 5, 4
        p3 = make_feats(rng, t, n, c, as_param=True)
        z3 = make_feats(rng, t, n, c, as_param=True)
        p4 = make_feats(rng, t, n, c, as_param=True)
        z4 = make_feats(rng, t, n, c, as_param=True)
        per_frame = [rng.integers(0, n, size=4) for _ in range(t)]
        val, _ = loss_3d4d(p3, z3, p4, z4, per_frame)
        g = ad.grad(val, {"p3": p3[0], "z3": z3[0], "p4": p4[0], "z4": z4[0]})
        np.testing.assert_array_equal(g["p3"], 0.0)
        np.testing.assert_array_equal(g["p4"], 0.0)
        assert np.any(g["z3"] != 0.0) and np.any(g["z4"] != 0.0)

    def test_swap_flag_moves_stop_gradient_to_z(self):
        rng = np.random.default_rng(8)
        t, n, c = 2, 5, 4
        p3 = make_feats(rng, t, n, c, as_param=True)
        z3 = make_feats(rng, t, n, c, as_param=True)
        p4 = make_feats(rng, t, n, c, as_param=True)
        z4 = make_feats(rng, t, n, c, as_param=True)
        per_frame = [rng.integers(0, n, size=4) for _ in range(t)]
        val, _ = loss_3d4d(p3, z3, p4, z4, per_frame, sg_on_predictor=False)
        g = ad.grad(val, {"p3": p3[0], "z3": z3[0], "p4": p4[0], "z4": z4[0]})
        np.testing.assert_array_equal(g["z3"], 0.0)
        np.testing.assert_array_equal(g["z4"], 0.0)
        assert np.any(g["p3"] != 0.0) and np.any(g["p4"] != 0.0)

    def test_forward_value_unchanged_by_flag(self):
        rng = np.random.default_rng(9)
        t, n, c = 2, 5, 4
        feats = [make_feats(rng, t, n, c) for _ in range(4)]
        per_frame = [rng.integers(0, n, size=4) for _ in range(t)]
        a, _ = loss_3d4d(*feats, per_frame, sg_on_predictor=True)
        b, _ = loss_3d4d(*feats, per_frame, sg_on_predictor=False)
        assert float(a.value) == pytest.approx(float(b.value), abs=1e-15)


class TestTotals:
    def test_weighted_sum(self):
        w = LossWeights(0.5, 2.0, 3.0)
        total = loss_total(Var(np.asarray(-0.4)), Var(np.asarray(-0.6)), Var(np.asarray(-0.8)), w)
        assert float(total.value) == pytest.approx(0.5 * -0.4 + 2.0 * -0.6 + 3.0 * -0.8)

    def test_identical_unit_features_reach_minus_three(self):
        """Perfectly aligned features drive every normalized term to -1."""
        rng = np.random.default_rng(10)
        t, n, c = 3, 6, 5
        base = [Var(rng.normal(size=(n, c))) for _ in range(t)]
        shared = [Var(base[0].value.copy()) for _ in range(t)]
        maps = {
            (i, j): (np.arange(n), np.arange(n))
            for i in range(t) for j in range(i + 1, t)
        }
        per_frame = [np.arange(n) for _ in range(t)]
        l3, _ = loss_3d(shared, shared, maps)
        l34, _ = loss_3d4d(shared, shared, shared, shared, per_frame)
        l4, _ = loss_4d(shared, shared, maps)
        total = loss_total(l3, l34, l4)
        assert float(l3.value) == pytest.approx(-1.0, abs=1e-12)
        assert float(l34.value) == pytest.approx(-1.0, abs=1e-12)
        assert float(l4.value) == pytest.approx(-1.0, abs=1e-12)
        assert float(total.value) == pytest.approx(-3.0, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0, 1.0)

    def test_report_check(self):
        rep = LossReport(l_3d=-0.5, l_3d4d=-0.25, l_4d=-0.75, total=-1.5)
        assert rep.check()
        rep.total = -1.4
        assert not rep.check()

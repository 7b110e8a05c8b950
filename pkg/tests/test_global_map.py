import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isacslam import ContractError
from isacslam import global_map as gm
from isacslam.local_slam import LocalFeature

pos = st.floats(-20, 20)
var = st.floats(1e-3, 10)


def lf(mean, v, r, legacy=False, idx=None, payload=None):
    return LocalFeature(np.asarray(mean, float), np.diag(np.broadcast_to(np.asarray(v, float), 2)), r,
                        legacy, idx, payload)


def gf(mean, v, vis, t=0, contribs=None):
    vis = np.asarray(vis, float)
    return gm.GlobalFeature(np.asarray(mean, float), np.broadcast_to(np.asarray(v, float), 2).copy(),
                            vis, float(vis.max()), t, contribs or {})


def test_build_pool_threshold_is_inclusive():
    ups = [[lf([0, 0], 1, 0.2), lf([1, 0], 1, 0.3), lf([2, 0], 1, 0.9)]]
    assert [p.confidence for _, p in gm.build_pool(ups, 0.3)] == [0.3, 0.9]
    assert gm.build_pool([[lf([0, 0], 1, 0.1)]], 0.3) == []
    assert len(gm.build_pool([[lf([0, 0], 1, 0.5)], [lf([5, 0], 1, 0.5)]], 0.3)) == 2


def test_fuse_feature_examples():
    g = gm.fuse_feature(gf([1.0, 1.0], 1.0, [0.0, 0.0]), lf([3.0, 3.0], 1.0, 0.5), 0, 4)
    assert np.allclose(g.mean, 2.0) and np.allclose(g.var, 0.5)
    g = gm.fuse_feature(gf([0.0, 0.0], 1.0, [0.0, 0.0]), lf([3.0, 3.0], 0.5, 0.5), 1, 4)
    assert np.allclose(g.mean, 2.0) and np.allclose(g.var, 1 / 3)
    g = gm.fuse_feature(gf([0, 0], 1.0, [0.4, 0.0]), lf([0, 0], 1.0, 0.9), 1, 7)
    assert np.allclose(g.visibility, [0.4, 0.9]) and g.confidence == 0.9 and g.timestamp == 7


def test_fuse_feature_replaces_own_contribution():
    g = gm.feature_from_local(lf([0, 0], 1.0, 0.5), 0, 2, 1)
    g = gm.fuse_feature(g, lf([2, 2], 1.0, 0.6), 1, 2)
    assert np.allclose(g.mean, 1.0)
    again = gm.fuse_feature(g, lf([2, 2], 1.0, 0.6), 1, 3)
    assert np.allclose(again.mean, g.mean) and np.allclose(again.var, g.var)


def test_init_stage_examples():
    q = gm.init_stage_update(gm.GlobalRadioMap(2), [(0, lf([1, 1], 0.5, 0.6))], 1.0, 0.3, 1)
    assert len(q) == 1 and q.features[0].confidence == 0.6
    q2 = gm.init_stage_update(q, [(1, lf([1.1, 1], 0.5, 0.7))], 1.0, 0.3, 2)
    assert len(q2) == 1 and np.allclose(q2.features[0].visibility, [0.6, 0.7])
    q3 = gm.init_stage_update(gm.GlobalRadioMap(2), [(0, lf([0, 0], 1, 0.5)), (1, lf([10, 0], 1, 0.5))],
                              1.0, 0.3, 1)
    assert len(q3) == 2


def test_split_pools_examples():
    ups = [[lf([0, 0], 1, 0.2, True, 0), lf([5, 5], 1, 0.5, True, 1), lf([9, 9], 1, 0.1), lf([7, 7], 1, 0.4)]]
    legacy, new = gm.split_pools(ups, 2, 0.3, 0.3)
    assert [p.confidence for p in legacy[0]] == [0.0, 0.5]
    assert [p.confidence for _, p in new] == [0.4]
    with pytest.raises(ContractError):
        gm.split_pools([[lf([0, 0], 1, 0.5, True, 0)]], 2, 0.3, 0.3)


def test_refine_stage_examples():
    q = gm.GlobalRadioMap(2, [gf([0, 0], 1.0, [0.5, 0.5], t=1)], 1)
    own = (np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    legacy = [[lf([1, 1], 1.0, 0.6, True, 0, own)], [lf([1, 1], 1.0, 0.7, True, 0, own)]]
    out = gm.refine_stage_update(q, legacy, [], 1.0, 0.3, 2)
    assert len(out) == 1
    # prior and both UEs fused: precision 3, mean 2/3
    assert np.allclose(out.features[0].mean, 2 / 3) and np.allclose(out.features[0].var, 1 / 3)
    assert out.features[0].timestamp == 2 and out.features[0].confidence == 0.7
    legacy = [[lf([4, 4], 1.0, 0.0, True, 0, (np.array([4.0, 4.0]), np.ones(2)))],
              [lf([1, 1], 1.0, 0.6, True, 0, own)]]
    out = gm.refine_stage_update(q, legacy, [], 1.0, 0.3, 2)
    assert out.features[0].visibility[0] == 0.0
    assert np.allclose(out.features[0].mean, 0.5)
    with pytest.raises(ContractError):
        gm.refine_stage_update(q, [[]], [], 1.0, 0.3, 2)


def test_refine_without_new_features_keeps_legacy_only():
    q = gm.GlobalRadioMap(1, [gf([0, 0], 1.0, [0.9], t=1), gf([8, 0], 1.0, [0.9], t=1)], 1)
    out = gm.refine_stage_update(q, [[lf([0, 0], 1, 0.9, True, 0), lf([8, 0], 1, 0.9, True, 1)]], [], 1.0, 0.3, 2)
    assert len(out) == 2


def test_refine_untouched_feature_keeps_timestamp():
    q = gm.GlobalRadioMap(1, [gf([0, 0], 1.0, [0.9], t=5)], 5)
    out = gm.refine_stage_update(q, [[lf([0, 0], 1, 0.0, True, 0)]], [], 1.0, -1.0, 6)
    assert out.features[0].timestamp == 5


def test_prune_examples():
    def one(r, ti, t):
        return len(gm.prune(gm.GlobalRadioMap(1, [gf([0, 0], 1.0, [r], t=ti)], t), t, 0.3))
    assert one(0.5, 5, 5) == 1
    assert one(0.5, 4, 5) == 0
    assert one(0.61, 4, 5) == 1


@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 10)), max_size=8), st.floats(0.05, 0.95))
def test_prune_idempotent(specs, r_cut):
    q = gm.GlobalRadioMap(1, [gf([i, 0], 1.0, [r], t=10 - dt) for i, (r, dt) in enumerate(specs)], 10)
    once = gm.prune(q, 10, r_cut)
    assert [f.mean[0] for f in gm.prune(once, 10, r_cut).features] == [f.mean[0] for f in once.features]


@given(pos, var, pos, var)
def test_fusion_is_gaussian_product(m1, v1, m2, v2):
    mean, v = gm.fuse_gaussians(m1, v1, m2, v2)
    assert float(v) == pytest.approx(v1 * v2 / (v1 + v2), rel=1e-12)
    assert float(mean) == pytest.approx((m1 / v1 + m2 / v2) / (1 / v1 + 1 / v2), rel=1e-12, abs=1e-12)
    assert float(v) < min(v1, v2)


@given(st.lists(st.tuples(pos, var), min_size=2, max_size=5), st.randoms())
def test_fusion_order_independent(contribs, rnd):
    items = [(np.array([m, m]), np.array([v, v])) for m, v in contribs]
    a = gm.fuse_all(items)
    rnd.shuffle(items)
    b = gm.fuse_all(items)
    assert np.allclose(a[0], b[0], rtol=1e-10, atol=1e-10) and np.allclose(a[1], b[1], rtol=1e-10)


@given(st.lists(st.tuples(st.integers(0, 2), pos, pos, st.floats(0.0, 0.99)), max_size=10))
def test_confidence_is_max_visibility(ops):
    q = gm.GlobalRadioMap(3)
    for t, (j, x, y, r) in enumerate(ops, 1):
        q = gm.init_stage_update(q, [(j, lf([x, y], 1.0, r))], 1.0, -1.0, t)
        for f in q.features:
            assert f.confidence == pytest.approx(float(f.visibility.max()))


def test_reobserved_feature_survives():
    q = gm.GlobalRadioMap(1)
    for t in range(1, 30):
        q = gm.init_stage_update(q, [(0, lf([2, 2], 0.5, 0.8))], 1.0, 0.3, t)
        assert len(q) == 1


def test_two_ue_fusion_beats_each_ue():
    r = np.random.default_rng(5)
    truth = np.array([10.0, 0.0])
    err = np.zeros((3, 1000))
    for k in range(1000):
        a, b = truth + r.normal(0, 0.4, 2), truth + r.normal(0, 0.4, 2)
        g = gm.feature_from_local(lf(a, 0.16, 0.9), 0, 2, 1)
        g = gm.fuse_feature(g, lf(b, 0.16, 0.9), 1, 1)
        err[:, k] = [np.sum((a - truth) ** 2), np.sum((b - truth) ** 2), np.sum((g.mean - truth) ** 2)]
    mse = err.mean(axis=1)
    assert mse[2] < mse[0] and mse[2] < mse[1]


def test_merge_close_unions_contributions():
    a = gm.feature_from_local(lf([0, 0], 1.0, 0.5), 0, 2, 1)
    b = gm.feature_from_local(lf([0.5, 0], 1.0, 0.6), 1, 2, 1)
    far = gm.feature_from_local(lf([30, 0], 1.0, 0.6), 1, 2, 1)
    out = gm.merge_close(gm.GlobalRadioMap(2, [a, b, far], 1), 1.0)
    assert len(out) == 2
    assert set(out.features[0].contributions) == {0, 1}
    assert np.allclose(out.features[0].mean, [0.25, 0])
    # the Mahalanobis gate merges wide features that the distance test misses
    wide = gm.feature_from_local(lf([0, 0], 25.0, 0.5), 0, 2, 1)
    wide2 = gm.feature_from_local(lf([6, 0], 25.0, 0.5), 1, 2, 1)
    assert len(gm.merge_close(gm.GlobalRadioMap(2, [wide, wide2]), 1.0)) == 2
    assert len(gm.merge_close(gm.GlobalRadioMap(2, [wide, wide2]), 1.0, gate=13.8)) == 1


def test_legacy_upload_without_payload_only_updates_visibility():
    g = gm.feature_from_local(lf([1, 1], 1.0, 0.5), 0, 2, 1)
    out = gm.fuse_feature(g, lf([9, 9], 1.0, 0.7, True, 0), 1, 2)
    assert np.allclose(out.mean, g.mean) and out.visibility[1] == 0.7


def test_upload_records_round_trip():
    ups = [[lf([1.5, -2.0], [0.1, 0.2], 0.7), lf([3, 4], 1.0, 0.4, True, 0, (np.array([3.1, 4.1]), np.array([0.5, 0.6])))],
           []]
    back = gm.load_uploads(gm.dump_uploads(ups))
    assert len(back) == 2 and back[1] == []
    for a, b in zip(ups[0], back[0]):
        assert np.allclose(a.mean, b.mean) and np.allclose(a.var, b.var)
        assert (a.confidence, a.legacy, a.global_index) == (b.confidence, b.legacy, b.global_index)
    assert np.allclose(back[0][1].payload[1], [0.5, 0.6])

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objdrive import objectcentric as oc
from objdrive.diffcore import Tensor
from objdrive.objectcentric import RepresentationConfig, Variant
from objdrive.perception import BackboneConfig, BoundingBox, init_attention, init_backbone

SMALL = BackboneConfig(widths=(4, 4, 4, 4))


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def params_for(cfg, seed=0):
    rng = np.random.default_rng(seed)
    p = init_backbone(cfg.backbone, rng)
    if cfg.variant.learned_selector:
        p.update(oc.init_selector(cfg, rng))
    if cfg.variant is Variant.PIXEL_ATTENTION:
        p.update(init_attention(cfg.backbone, rng))
    return {k: Tensor(v) for k, v in p.items()}


def random_boxes(rng, n):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 90, 2)
        w, h = rng.uniform(1, 30, 2)
        out.append(BoundingBox(("vehicle", "pedestrian")[rng.integers(2)], x, y, min(96, x + w), min(96, y + h)))
    return out


def test_variant_properties():
    assert not Variant.GLOBAL_ONLY.uses_objects and not Variant.PIXEL_ATTENTION.uses_objects
    assert Variant.HEURISTIC_SPARSE_SUM.sparse and not Variant.HEURISTIC_SPARSE_SUM.learned_selector
    assert not Variant.DENSE_SUM.sparse
    assert len({v.label for v in Variant}) == 6


def test_output_dims():
    g = RepresentationConfig(Variant.GLOBAL_ONLY)
    c = RepresentationConfig(Variant.SPARSE_CONCAT, k=5)
    assert g.output_dim == 64
    assert c.output_dim == 64 + 5 * 256


def test_rejects_bad_k():
    with pytest.raises(ValueError):
        RepresentationConfig(k=0)


def test_zero_selector_scores_equal_bias():
    s = oc.score_objects(T(np.ones((3, 4))), T(np.ones(2)), T(np.zeros((6, 1))), T([0.7]))
    np.testing.assert_array_equal(s.data, [0.7, 0.7, 0.7])


def test_duplicate_objects_equal_scores():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((1, 4))
    s = oc.score_objects(T(np.vstack([f, f])), T(rng.standard_normal(3)), T(rng.standard_normal((7, 1))), T([0.1]))
    assert s.data[0] == s.data[1]


def test_scores_hand_computed():
    f = np.array([[1.0, 2.0], [3.0, -1.0]])
    g = np.array([0.5])
    w = np.ones((3, 1))
    s = oc.score_objects(T(f), T(g), T(w), T([0.0]))
    np.testing.assert_allclose(s.data, [1 + 2 + 0.5, 3 - 1 + 0.5])
    s = oc.score_objects(T(f), T(g), T(np.ones((2, 1))), T([0.0]), use_global=False)
    np.testing.assert_allclose(s.data, [3.0, 2.0])


def test_normalize_examples():
    np.testing.assert_allclose(oc.normalize(T([1.0, 1.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(oc.normalize(T([4.2])).data, [1.0])
    np.testing.assert_allclose(oc.normalize(T([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_weight_features():
    f = np.array([[2.0, 4.0]])
    np.testing.assert_array_equal(oc.weight_features(T(f), T([1.0])).data, f)
    np.testing.assert_array_equal(oc.weight_features(T(f), T([0.5])).data, [[1.0, 2.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_weighted_sum_is_convex(n, seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n, 3))
    w = oc.normalize(T(rng.standard_normal(n) * 3))
    s = oc.aggregate_sum(oc.weight_features(T(f), w)).data
    assert np.all(s >= f.min(axis=0) - 1e-12) and np.all(s <= f.max(axis=0) + 1e-12)


def test_top_k_examples():
    np.testing.assert_array_equal(oc.top_k(np.array([0.4, 0.3, 0.2, 0.1]), 2), [0, 1])
    np.testing.assert_array_equal(oc.top_k(np.array([0.1, 0.6, 0.3]), 5), [1, 2, 0])
    np.testing.assert_array_equal(oc.top_k(np.array([0.5, 0.5]), 1), [0])


def test_aggregate_sum_examples():
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = T([0.75, 0.25])
    np.testing.assert_array_equal(oc.aggregate_sum(oc.weight_features(T(f), w)).data, [0.75, 0.25])
    np.testing.assert_array_equal(oc.aggregate_sum(T([[3.0, 1.0]])).data, [3.0, 1.0])
    np.testing.assert_array_equal(oc.aggregate_sum(T(np.zeros((0, 2)))).data, [0.0, 0.0])


def test_aggregate_concat_padding():
    assert not oc.aggregate_concat(T(np.zeros((0, 4))), 5).data.any()
    assert oc.aggregate_concat(T(np.zeros((0, 4))), 5).shape == (20,)
    out = oc.aggregate_concat(T(np.ones((2, 4))), 5).data
    assert np.all(out[:8] == 1) and not out[8:].any()
    np.testing.assert_array_equal(oc.aggregate_concat(T([[1.0, 2.0], [3.0, 4.0]]), 1).data, [1.0, 2.0])


def test_heuristic_scores():
    a = BoundingBox("vehicle", 0, 0, 4, 4)
    b = BoundingBox("vehicle", 10, 10, 14, 14)
    c = BoundingBox("vehicle", 0, 0, 8, 4)
    s = oc.heuristic_scores([a, b, c], 96, 96)
    assert s[0] == s[1] and s[2] == 2 * s[0]
    full = oc.heuristic_scores([BoundingBox("vehicle", 0, 0, 96, 96), BoundingBox("vehicle", 0, 0, 1, 1)], 96, 96)
    assert full[0] == 1.0 and full[1] == pytest.approx(0.0, abs=2e-4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=1, max_size=10), st.floats(-50, 50, allow_nan=False))
def test_softmax_weights_properties(scores, shift):
    w = oc.normalize(T(scores)).data
    assert abs(w.sum() - 1.0) <= 1e-9 and np.all(w >= 0)
    ws = oc.normalize(T(np.asarray(scores) + shift)).data
    np.testing.assert_allclose(ws, w, atol=1e-9)


# ---------------------------------------------------------------------------
# batched representation


IMG = np.random.default_rng(11).random((3, 3, 96, 96))
BOXES = [random_boxes(np.random.default_rng(12), n) for n in (4, 0, 2)]


def rep(variant, boxes=BOXES, images=IMG, k=5, seed=0, params=None):
    cfg = RepresentationConfig(variant, k=k, backbone=SMALL)
    return oc.represent_batch(cfg, Tensor(images), boxes, params or params_for(cfg, seed))


def test_sparse_large_k_equals_dense_bitwise():
    dense = RepresentationConfig(Variant.DENSE_SUM, backbone=SMALL)
    params = params_for(dense)
    a, _ = oc.represent_batch(dense, Tensor(IMG), BOXES, params)
    b, _ = oc.represent_batch(RepresentationConfig(Variant.SPARSE_SUM, k=4, backbone=SMALL), Tensor(IMG), BOXES, params)
    assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("variant", [v for v in Variant if v.uses_objects])
def test_empty_detections_give_zero_object_part(variant):
    x, _ = rep(variant, boxes=[[], [], []])
    assert not x.data[:, 4:].any()


@pytest.mark.parametrize("variant", list(Variant))
def test_finite_and_right_width(variant):
    x, info = rep(variant)
    assert x.shape == (3, RepresentationConfig(variant, backbone=SMALL).output_dim)
    assert np.all(np.isfinite(x.data))
    assert len(info.objects) == 3


def test_global_only_ignores_boxes():
    a, _ = rep(Variant.GLOBAL_ONLY)
    b, _ = rep(Variant.GLOBAL_ONLY, boxes=[[], [], []])
    assert a.data.tobytes() == b.data.tobytes()


def test_dense_invariant_to_duplicated_detections():
    cfg = RepresentationConfig(Variant.DENSE_SUM, backbone=SMALL)
    params = params_for(cfg)
    boxes = [BOXES[0][:2]]
    a, ia = oc.represent_batch(cfg, Tensor(IMG[:1]), boxes, params)
    b, ib = oc.represent_batch(cfg, Tensor(IMG[:1]), [boxes[0] * 2], params)
    np.testing.assert_allclose(ib.objects[0].weights, np.tile(ia.objects[0].weights / 2, 2), atol=1e-15)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_per_frame_segments_are_independent():
    x, _ = rep(Variant.SPARSE_SUM)
    for i in range(3):
        xi, _ = rep(Variant.SPARSE_SUM, boxes=[BOXES[i]], images=IMG[i:i + 1])
        np.testing.assert_allclose(xi.data[0], x.data[i], atol=1e-12)


def test_info_orders_and_weights():
    _, info = rep(Variant.SPARSE_SUM, k=2)
    obj = info.objects[0]
    assert len(obj.order) == 2
    assert obj.weights[obj.order[0]] >= obj.weights[obj.order[1]]
    assert abs(obj.weights.sum() - 1) < 1e-12
    assert info.objects[1].weights.size == 0


@settings(max_examples=15, deadline=None)
@given(st.randoms(use_true_random=False), st.sampled_from([Variant.SPARSE_SUM, Variant.DENSE_SUM,
                                                          Variant.HEURISTIC_SPARSE_SUM]))
def test_permutation_invariance(rnd, variant):
    boxes = list(BOXES[0])
    rnd.shuffle(boxes)
    a, _ = rep(variant, boxes=[BOXES[0]], images=IMG[:1])
    b, _ = rep(variant, boxes=[boxes], images=IMG[:1])
    # ties aside, the kept set is the same, and the sum is order-free
    assert a.data.tobytes() == b.data.tobytes()


def test_selector_width_mismatch():
    cfg = RepresentationConfig(Variant.SPARSE_SUM, backbone=SMALL)
    params = params_for(cfg)
    params["selector.w"] = Tensor(np.zeros((3, 1)))
    with pytest.raises(Exception):
        oc.represent_batch(cfg, Tensor(IMG), BOXES, params)

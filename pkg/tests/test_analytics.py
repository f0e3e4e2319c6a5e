import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainterp.analytics import (
    PCA3,
    WeightSet,
    distance_table,
    emit_sunburst,
    inference_centroid,
    inter_set_distance,
    intra_set_distance,
    pca3_project,
)
from chainterp.chain import ChainNode, ChainTree, aggregate_class_chain
from chainterp.inference import InferenceWeights
from oracles import brute_centroid, brute_inter, brute_intra


def wset(W, sid="a", cid="c"):
    W = np.atleast_2d(np.asarray(W, float))
    return WeightSet(sid, cid, [f"{sid}{i}" for i in range(len(W))], W)


def iw(w, cid="c", layer="S"):
    return InferenceWeights(cid, "object", "D", layer, np.asarray(w, float), 0.0)


def test_centroid_examples(rng):
    w = rng.normal(size=5)
    assert np.array_equal(inference_centroid(wset([w])), w)
    assert np.allclose(inference_centroid(wset([w, -w])), 0.0)
    W = rng.normal(size=(20, 6))
    assert np.allclose(inference_centroid(wset(W)), brute_centroid(W), atol=1e-12)


def test_intra_examples(rng):
    w = rng.normal(size=4)
    assert intra_set_distance(wset([w, w, w])) == 0.0
    d = rng.normal(size=4)
    assert intra_set_distance(wset([w + d, w - d])) == pytest.approx(np.linalg.norm(d), abs=1e-12)


def test_inter_examples(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    s = wset([a, b])
    assert inter_set_distance(s, s) == 0.0
    assert inter_set_distance(wset([a]), wset([b])) == pytest.approx(np.linalg.norm(a - b), abs=1e-12)
    with pytest.raises(ValueError):
        inter_set_distance(wset([a]), wset([np.ones(3)]))
    with pytest.raises(ValueError):
        intra_set_distance(WeightSet("e", "c", [], np.zeros((0, 3))))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 15), m=st.integers(1, 15), d=st.integers(1, 12))
def test_distances_match_brute_force(seed, n, m, d):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(n, d)), r.normal(size=(m, d))
    assert abs(intra_set_distance(wset(A)) - brute_intra(A)) <= 1e-12
    assert abs(inter_set_distance(wset(A), wset(B)) - brute_inter(A, B)) <= 1e-12
    assert inter_set_distance(wset(A), wset(B)) == inter_set_distance(wset(B), wset(A))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_triangle_inequality_and_translation(seed):
    r = np.random.default_rng(seed)
    A, B, C = (wset(r.normal(size=(r.integers(1, 6), 4))) for _ in range(3))
    assert inter_set_distance(A, C) <= inter_set_distance(A, B) + inter_set_distance(B, C) + 1e-12
    shift = r.normal(size=4) * 10
    moved = wset(A.weights + shift)
    assert abs(intra_set_distance(moved) - intra_set_distance(A)) <= 1e-12 * (1 + np.abs(shift).max())


def test_weight_set_from_inference():
    s = WeightSet.from_inference("s", [("i1", iw([1, 2, 3])), ("i2", iw([3, 2, 1]))])
    assert s.label == "s/c" and s.weights.shape == (2, 3)
    with pytest.raises(ValueError):
        WeightSet.from_inference("s", [("i1", iw([1, 2, 3])), ("i2", iw([1, 2, 3], cid="other"))])
    with pytest.raises(ValueError):
        WeightSet.from_inference("s", [("i1", iw([1, 2, 3])), ("i2", iw([1, 2]))])
    with pytest.raises(ValueError):
        WeightSet.from_inference("s", [])


def test_distance_table_csv(rng):
    one = distance_table([wset(rng.normal(size=(4, 3)))])
    assert one.values.shape == (1, 1)
    assert one.to_csv().splitlines() == ["set,a/c", f"a/c,{one.values[0, 0]:.4f}"]
    A = wset(rng.normal(size=(4, 3)), "a")
    dup = distance_table([A, wset(A.weights, "b")])
    assert dup.values[0, 1] == 0.0 and dup.values[0, 0] == dup.values[1, 1]
    assert np.allclose(dup.values, dup.values.T) and (dup.values >= 0).all()
    row = dup.to_csv().splitlines()[1].split(",")
    assert all(len(v.split(".")[1]) == 4 for v in row[1:])


def test_pca_rank3_reconstruction(rng):
    basis = rng.normal(size=(3, 8))
    W = rng.normal(size=(30, 3)) @ basis + rng.normal(size=8)
    pca = PCA3().fit(W)
    recon = pca.transform(W) @ pca.components_ + pca.mean_
    assert np.max(np.abs(recon - W)) <= 1e-9
    assert not pca.degenerate_ and pca.rank_ == 3


def test_pca_isotropic_ratios():
    r = np.random.default_rng(0)
    I = 10
    pca = PCA3().fit(r.normal(size=(20_000, I)))
    assert np.allclose(pca.explained_variance_ratio_, 1 / I, atol=0.01)
    assert pca.explained_variance_ratio_.sum() == pytest.approx(3 / I, abs=0.02)


def test_pca_duplicated_data_same_projection(rng):
    W = rng.normal(size=(12, 5))
    a = PCA3().fit(W).transform(W)
    b = PCA3().fit(np.vstack([W, W])).transform(W)
    for k in range(3):
        assert np.allclose(a[:, k], b[:, k], atol=1e-9) or np.allclose(a[:, k], -b[:, k], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pca_ordering_and_sign_convention(seed):
    r = np.random.default_rng(seed)
    W = r.normal(size=(15, 6)) * r.uniform(0.1, 3, 6)
    pca = PCA3().fit(W)
    ratios = pca.explained_variance_ratio_
    assert all(b <= a + 1e-15 for a, b in zip(ratios, ratios[1:]))
    for comp in pca.components_:
        assert comp[np.argmax(np.abs(comp))] > 0


def test_pca_degenerate_rank(rng):
    v = rng.normal(size=6)
    W = np.outer(rng.normal(size=10), v) + 1.0
    pca = PCA3().fit(W)
    assert pca.degenerate_ and pca.rank_ == 1
    coords = pca.transform(W)
    assert np.all(coords[:, 1:] == 0.0) and pca.explained_variance_ratio_[0] == pytest.approx(1.0)


def test_pca3_project_pooling_and_csv(rng):
    sets = [wset(rng.normal(size=(3, 5)), "a"), wset(rng.normal(size=(2, 5)) + 4, "b")]
    proj = pca3_project(sets)
    assert proj.coords.shape == (5, 3) and proj.set_ids == ["a", "a", "a", "b", "b"]
    lines = proj.to_csv().splitlines()
    assert lines[0] == "instance_id,set_id,pc1,pc2,pc3" and len(lines) == 6
    with pytest.raises(ValueError):
        pca3_project([wset(rng.normal(size=(2, 5)))])
    with pytest.raises(ValueError):
        pca3_project([wset(rng.normal(size=(5, 2)))])


def fan_tree(contribs, level="object"):
    kids = [ChainNode(f"o{i}", level, c, 0.0) for i, c in enumerate(contribs)]
    return ChainTree("inst", "s", ChainNode("s", "scene", 1.0, 0.0, kids))


def ring(doc, level):
    return next(r for r in doc["rings"] if r["level"] == level)


def test_sunburst_single_path():
    node = ChainNode("m", "material", 0.3, 0.0, [ChainNode("c", "color", 0.2, 0.0)])
    node = ChainNode("p", "part", 0.5, 0.0, [node])
    node = ChainNode("o", "object", 0.7, 0.0, [node])
    doc = emit_sunburst(ChainTree("i", "s", ChainNode("s", "scene", 1.0, 0.0, [node])))
    assert [r["level"] for r in doc["rings"]] == ["object", "part", "material", "color"]
    assert all(len(r["sections"]) == 1 and r["sections"][0]["proportion"] == 1.0 for r in doc["rings"])
    assert doc["root"]["name"] == "s" and doc["root"]["value"] == 1.0


def test_sunburst_proportions_and_clipping():
    doc = emit_sunburst(fan_tree([0.6, 0.3, 0.1]))
    assert [s["proportion"] for s in ring(doc, "object")["sections"]] == pytest.approx([0.6, 0.3, 0.1])
    doc = emit_sunburst(fan_tree([0.5, -0.2, 0.5]))
    props = {s["name"]: s["proportion"] for s in ring(doc, "object")["sections"]}
    assert props == pytest.approx({"o0": 0.5, "o1": 0.0, "o2": 0.5})
    assert not doc["flags"]


def test_sunburst_all_zero_flagged():
    doc = emit_sunburst(fan_tree([0.0, -1.0]))
    assert doc["flags"]
    assert [s["proportion"] for s in ring(doc, "object")["sections"]] == [0.5, 0.5]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=7))
def test_sunburst_rings_sum_to_one_and_descend(contribs):
    doc = emit_sunburst(fan_tree(contribs))
    props = [s["proportion"] for s in ring(doc, "object")["sections"]]
    assert abs(sum(props) - 1.0) <= 1e-9
    assert props == sorted(props, reverse=True)
    children = doc["root"]["children"]
    assert sum(c["value"] for c in children) == pytest.approx(1.0)


def test_sunburst_from_real_tree_and_class(full_tree):
    doc = emit_sunburst(full_tree)
    for r in doc["rings"]:
        assert abs(sum(s["proportion"] for s in r["sections"]) - 1.0) <= 1e-9
    cdoc = emit_sunburst(aggregate_class_chain([full_tree]))
    assert cdoc["title"] == full_tree.predicted_class and cdoc["root"]["name"] == full_tree.root.concept_id

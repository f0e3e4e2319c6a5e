import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainterp.harmonize import (
    ConceptBank,
    ConceptHarmonizer,
    ConceptManifest,
    ConceptSpec,
    HarmonizeError,
    HarmonizingDataset,
    HarmonizingWeights,
    build_harmonizing_dataset,
    concept_harmonized_unit,
    default_lambda,
    fit_concept_harmonizer,
    fit_layer_concepts,
)
from chainterp.netcore import LayerSpec, validate_network
from chainterp.solvers import AdmmConfig, lasso_certificate

TIGHT = AdmmConfig(tol_primal=1e-11, tol_dual=1e-11, max_iters=50_000)


def identity_net(channels=4, size=2):
    w = np.eye(channels)[:, :, None, None]
    return validate_network([LayerSpec("conv", "conv", {}, w), LayerSpec("relu", "relu")],
                            (channels, size, size), {"object": "relu"})


def unit_manifest(rng, n=10, positives=(0, 3, 5, 8), unit=2, channels=4):
    """Samples where ``unit`` fires exactly when the concept is present."""
    tensors, rows = {}, []
    for i in range(n):
        x = rng.uniform(0.0, 0.2, size=(channels, 2, 2))
        x[unit] = 1.0 if i in positives else 0.0
        sid = f"s{i}"
        tensors[sid] = x
        rows.append({"sample_id": sid, "level": "object", "concept_id": "obj_a",
                     "label": int(i in positives), "source": "test"})
    return ConceptManifest(rows, tensors=tensors)


def planted_dataset(seed, n=200, units=20, support=(3, 8, 14), noise=0.3):
    r = np.random.default_rng(seed)
    z = (r.random(n) < 0.5).astype(float)
    X = noise * r.normal(size=(n, units))
    # planted units fire only when the concept is present
    X[:, list(support)] += z[:, None]
    return HarmonizingDataset(X, z, ConceptSpec("c", "part", "L"))


def test_dataset_bookkeeping(rng):
    man = unit_manifest(rng)
    ds = build_harmonizing_dataset(identity_net(), man, ConceptSpec("obj_a", "object", "relu"))
    assert ds.features.shape == (10, 4) and int(ds.labels.sum()) == 4


def test_dataset_separable_by_planted_unit(rng):
    ds = build_harmonizing_dataset(identity_net(), unit_manifest(rng), ConceptSpec("obj_a", "object", "relu"))
    pos, neg = ds.features[ds.labels == 1, 2], ds.features[ds.labels == 0, 2]
    assert pos.min() > neg.max()


def test_dataset_errors(rng):
    man = unit_manifest(rng, positives=())
    with pytest.raises(HarmonizeError, match="no positive"):
        build_harmonizing_dataset(identity_net(), man, ConceptSpec("obj_a", "object", "relu"))
    with pytest.raises(HarmonizeError, match="absent"):
        build_harmonizing_dataset(identity_net(), man, ConceptSpec("nope", "object", "relu"))
    with pytest.raises(ValueError):
        ConceptSpec("x", "texture", "relu")


def test_planted_unit_gets_largest_weight(rng):
    ds = build_harmonizing_dataset(identity_net(), unit_manifest(rng, n=40, positives=range(0, 40, 3)),
                                   ConceptSpec("obj_a", "object", "relu"))
    t = fit_concept_harmonizer(ds, lam=1e-3)
    assert int(np.argmax(np.abs(t.weights))) == 2


def test_huge_lambda_gives_zero_weights():
    ds = planted_dataset(0)
    scale = np.abs(ds.features.T @ ds.labels).max()
    assert not fit_concept_harmonizer(ds, lam=1e6 * scale).weights.any()


def test_duplicated_samples_with_coscaled_lambda():
    ds = planted_dataset(1)
    dup = HarmonizingDataset(np.vstack([ds.features] * 2), np.concatenate([ds.labels] * 2), ds.concept)
    a = fit_concept_harmonizer(ds, lam=0.5, config=TIGHT).weights
    b = fit_concept_harmonizer(dup, lam=1.0, config=TIGHT).weights
    assert np.max(np.abs(a - b)) <= 1e-8


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_optimality_certificate(seed):
    ds = planted_dataset(seed, n=80)
    t = fit_concept_harmonizer(ds)
    assert t.fit_stats["converged"]
    assert lasso_certificate(ds.features, ds.labels, None, t.lambda_used, t.weights) <= 1e-5


def test_planted_support_recovery_rate():
    hits = 0
    for seed in range(50):
        ds = planted_dataset(seed)
        t = fit_concept_harmonizer(ds)
        hits += set(np.argsort(-np.abs(t.weights))[:3]) == {3, 8, 14}
    assert hits >= 45


def test_default_lambda_formula(rng):
    X = rng.normal(size=(30, 5))
    assert np.isclose(default_lambda(X), 0.01 * np.linalg.svd(X, compute_uv=False)[0] ** 2 / 30)


def layer_manifest(rng, n=60):
    """Three object concepts, each carried by its own pair of units."""
    tensors, rows = {}, []
    support = {"obj_a": [0, 1], "obj_b": [2, 3], "obj_c": [4, 5]}
    for i in range(n):
        x = rng.uniform(0.0, 0.05, size=(6, 2, 2))
        for cid, units in support.items():
            present = rng.random() < 0.5
            if present:
                x[units] += 1.0
            rows.append({"sample_id": f"s{i}", "level": "object", "concept_id": cid,
                         "label": int(present), "source": "test"})
        tensors[f"s{i}"] = x
    return ConceptManifest(rows, tensors=tensors), support


def test_layer_bank_shape_order_and_disjoint_supports(rng):
    man, support = layer_manifest(rng)
    net = identity_net(6)
    bank = fit_layer_concepts(net, man, "relu", lam=0.5)
    assert bank.concept_ids == ["obj_a", "obj_b", "obj_c"] and not bank.failures
    assert bank.matrix().shape == (6, 3)
    for cid, units in support.items():
        assert set(np.flatnonzero(np.abs(bank[cid].weights) > 1e-3)) == set(units)
    again = fit_layer_concepts(net, man, "relu", lam=0.5, jobs=3)
    assert all(np.array_equal(a.weights, b.weights) for a, b in zip(bank.concepts, again.concepts))


@pytest.mark.filterwarnings("ignore::chainterp.solvers.ConvergenceWarning")
def test_layer_failures_collected(rng):
    man, _ = layer_manifest(rng, n=20)
    rows = man.rows + [{"sample_id": "s0", "level": "object", "concept_id": "obj_z", "label": 0, "source": "t"}]
    man2 = ConceptManifest(rows, tensors={s: man.tensor(s) for s in man.sample_ids})
    bank = fit_layer_concepts(identity_net(6), man2, "relu")
    assert "obj_z" in bank.failures and "obj_z" not in bank.concept_ids
    with pytest.raises(HarmonizeError):
        fit_layer_concepts(identity_net(6), man2, "conv")


def test_bank_json_round_trip(tmp_path, rng):
    man, _ = layer_manifest(rng, n=30)
    bank = fit_layer_concepts(identity_net(6), man, "relu")
    bank.save(tmp_path / "b.json", {"provenance": {"x": 1}})
    back = ConceptBank.load(tmp_path / "b.json")
    assert back.concept_ids == bank.concept_ids
    assert np.array_equal(back.matrix(), bank.matrix())
    assert np.allclose(np.linalg.norm(back.matrix(unit_norm=True), axis=0), 1.0)


def test_manifest_round_trip_and_header(tmp_path, rng):
    man = unit_manifest(rng)
    man.save(tmp_path / "m.csv")
    back = ConceptManifest.load(tmp_path / "m.csv")
    assert back.sample_ids == man.sample_ids
    assert np.array_equal(back.label_vector("obj_a"), man.label_vector("obj_a"))
    (tmp_path / "bad.csv").write_text("id,level\n")
    with pytest.raises(HarmonizeError):
        ConceptManifest.load(tmp_path / "bad.csv")
    with pytest.raises(HarmonizeError):
        ConceptManifest([{"sample_id": "a", "level": "object", "concept_id": "c", "label": 2, "source": ""}])


def entry(weights, layer="L"):
    return HarmonizingWeights(ConceptSpec("c", "part", layer), np.asarray(weights, float), 0.0)


def test_concept_harmonized_unit_examples(rng):
    A = rng.normal(size=(3, 4, 4))
    assert np.array_equal(concept_harmonized_unit(entry([0, 1, 0]), A), A[1])
    assert not concept_harmonized_unit(entry([0, 0, 0]), A).any()
    B = np.stack([np.full((2, 2), 2.0), np.full((2, 2), 4.0)])
    assert np.array_equal(concept_harmonized_unit(entry([0.5, 0.5]), B), np.full((2, 2), 3.0))
    with pytest.raises(HarmonizeError):
        concept_harmonized_unit(entry([1, 0]), B, layer="other")
    with pytest.raises(HarmonizeError):
        concept_harmonized_unit(entry([1, 0, 0]), B)


@given(t=st.lists(st.integers(-4, 4), min_size=3, max_size=3), a=st.integers(-3, 3), b=st.integers(-3, 3),
       seed=st.integers(0, 1000))
def test_concept_harmonized_unit_is_linear(t, a, b, seed):
    # small integers keep every product exact in float64
    r = np.random.default_rng(seed)
    A = r.integers(-5, 5, size=(3, 2, 2)).astype(float)
    B = r.integers(-5, 5, size=(3, 2, 2)).astype(float)
    e = entry(t)
    lhs = concept_harmonized_unit(e, a * A + b * B)
    rhs = a * concept_harmonized_unit(e, A) + b * concept_harmonized_unit(e, B)
    assert np.array_equal(lhs, rhs)


def test_harmonizer_estimator():
    ds = planted_dataset(2)
    est = ConceptHarmonizer().fit(ds.features, ds.labels)
    assert set(np.argsort(-np.abs(est.coef_))[:3]) == {3, 8, 14}
    assert est.transform(ds.features).shape == (200, 1)
    assert est.get_params()["lam"] is None
    with pytest.raises(ValueError):
        ConceptHarmonizer().fit(ds.features, ds.labels * 2)

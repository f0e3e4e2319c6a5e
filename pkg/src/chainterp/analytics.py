"""Inference distances, 3D-PCA projections and sunburst chart data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .chain import ChainNode, ChainTree, ClassChain
from .inference import InferenceWeights
from .netcore import LEVELS


@dataclass
class WeightSet:
    set_id: str
    concept_id: str
    instance_ids: list[str]
    weights: np.ndarray  # (members, I)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if len(self.instance_ids) != self.weights.shape[0]:
            raise ValueError("one instance id per weight row")

    @classmethod
    def from_inference(cls, set_id: str, members: Sequence[tuple[str, InferenceWeights]]) -> "WeightSet":
        if not members:
            raise ValueError(f"weight set {set_id!r} is empty")
        first = members[0][1]
        for iid, w in members:
            if (w.concept_id, w.shallow_layer) != (first.concept_id, first.shallow_layer):
                raise ValueError(f"set {set_id!r}: member {iid} has a different concept or layer")
            if w.weights.shape != first.weights.shape:
                raise ValueError(f"set {set_id!r}: member {iid} has a different dimension")
        return cls(set_id, first.concept_id, [iid for iid, _ in members], np.vstack([w.weights for _, w in members]))

    @property
    def label(self) -> str:
        return f"{self.set_id}/{self.concept_id}"


def _nonempty(s: WeightSet) -> np.ndarray:
    if s.weights.shape[0] == 0:
        raise ValueError(f"weight set {s.set_id!r} is empty")
    return s.weights


def _centroid(W: np.ndarray) -> np.ndarray:
    # offset from the first member: identical members give their exact value
    return W[0] + (W - W[0]).mean(axis=0)


def inference_centroid(s: WeightSet) -> np.ndarray:
    return _centroid(_nonempty(s))


def intra_set_distance(s: WeightSet) -> float:
    """Mean Euclidean distance of the members to their centroid."""
    W = _nonempty(s)
    return float(np.mean(np.linalg.norm(W - _centroid(W), axis=1)))


def inter_set_distance(a: WeightSet, b: WeightSet) -> float:
    ca, cb = inference_centroid(a), inference_centroid(b)
    if ca.shape != cb.shape:
        raise ValueError(f"sets {a.set_id!r} and {b.set_id!r} differ in weight dimension")
    return float(np.linalg.norm(ca - cb))


@dataclass
class DistanceTable:
    labels: list[str]
    values: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["set", *self.labels])
        for label, row in zip(self.labels, self.values):
            writer.writerow([label, *(f"{v:.4f}" for v in row)])
        return buf.getvalue()


def distance_table(sets: Sequence[WeightSet]) -> DistanceTable:
    """Square table: intra-set distances on the diagonal, centroid distances elsewhere."""
    n = len(sets)
    values = np.zeros((n, n))
    for i in range(n):
        values[i, i] = intra_set_distance(sets[i])
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = inter_set_distance(sets[i], sets[j])
    return DistanceTable([s.label for s in sets], values)


class PCA3(TransformerMixin, BaseEstimator):
    """PCA with a deterministic sign convention.

    Each component is flipped so its largest-magnitude loading is positive.
    When the centered data has rank below ``n_components`` the missing
    components are zero and ``degenerate_`` is set.
    """

    def __init__(self, n_components=3):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        k = self.n_components
        self.mean_ = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        var = s**2
        total = var.sum()
        tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        rank = int(np.sum(s > tol))
        comps = np.zeros((k, X.shape[1]))
        ratios = np.zeros(k)
        use = min(k, rank)
        for i in range(use):
            v = vt[i]
            j = int(np.argmax(np.abs(v)))
            comps[i] = v if v[j] > 0 else -v
            ratios[i] = var[i] / total
        self.components_ = comps
        self.explained_variance_ratio_ = ratios
        self.rank_ = rank
        self.degenerate_ = rank < k
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


@dataclass
class PCAProjection:
    instance_ids: list[str]
    set_ids: list[str]
    coords: np.ndarray
    explained_variance_ratio: np.ndarray
    degenerate: bool
    components: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((3, 0)))
    mean: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["instance_id", "set_id", "pc1", "pc2", "pc3"])
        for iid, sid, row in zip(self.instance_ids, self.set_ids, self.coords):
            writer.writerow([iid, sid, *(f"{v:.6f}" for v in row)])
        return buf.getvalue()


def pca3_project(sets: Sequence[WeightSet]) -> PCAProjection:
    """Project the pooled members of ``sets`` onto their top three principal components."""
    W = np.vstack([s.weights for s in sets])
    if W.shape[0] < 3 or W.shape[1] < 3:
        raise ValueError("need at least 3 members of dimension at least 3")
    pca = PCA3().fit(W)
    return PCAProjection(
        instance_ids=[i for s in sets for i in s.instance_ids],
        set_ids=[s.set_id for s in sets for _ in s.instance_ids],
        coords=pca.transform(W),
        explained_variance_ratio=pca.explained_variance_ratio_,
        degenerate=pca.degenerate_,
        components=pca.components_,
        mean=pca.mean_,
    )


def _shares(values: Sequence[float]) -> tuple[list[float], bool]:
    clipped = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    total = clipped.sum()
    if total <= 0.0:
        return [1.0 / len(clipped)] * len(clipped), True
    return list(clipped / total), False


def emit_sunburst(tree_or_class: ChainTree | ClassChain | ChainNode) -> dict[str, Any]:
    """Chart data with nested ``{name, value, children}`` sections plus per-ring tables.

    Sibling contributions are clipped at zero and renormalised; a section's
    value is its share of the parent's value, so the root is 1. The ``rings``
    list renormalises each level to 1 across all of its sections.
    """
    if isinstance(tree_or_class, ChainTree):
        root, title = tree_or_class.root, tree_or_class.instance_id
    elif isinstance(tree_or_class, ClassChain):
        root, title = tree_or_class.to_tree(), tree_or_class.class_id
    else:
        root, title = tree_or_class, tree_or_class.concept_id
    flags: list[str] = []
    ring_sections: dict[str, list[dict[str, Any]]] = {}

    def build(node: ChainNode, value: float, share: float) -> dict[str, Any]:
        doc: dict[str, Any] = {"name": node.concept_id, "level": node.level, "value": value,
                               "share": share, "contribution": node.contribution}
        kids = sorted(node.children, key=lambda c: -c.contribution)
        if kids:
            shares, all_zero = _shares([c.contribution for c in kids])
            if all_zero:
                flags.append(f"all-zero contributions under {node.concept_id}")
            doc["children"] = []
            for child, sh in zip(kids, shares):
                doc["children"].append(build(child, value * sh, sh))
                ring_sections.setdefault(child.level, []).append(
                    {"name": child.concept_id, "parent": node.concept_id, "value": value * sh})
        return doc

    nested = build(root, 1.0, 1.0)
    rings = []
    for level in LEVELS:
        sections = ring_sections.get(level)
        if not sections:
            continue
        total = sum(s["value"] for s in sections)
        for s in sections:
            s["proportion"] = s["value"] / total if total > 0 else 1.0 / len(sections)
        sections.sort(key=lambda s: -s["proportion"])
        rings.append({"level": level, "sections": sections})
    return {"title": title, "root": nested, "rings": rings, "flags": flags}

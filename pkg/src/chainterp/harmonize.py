"""Align layer units with visual concepts by lasso regression.

For every concept at a semantic level, the GAP features of the level's layer
are regressed onto the concept's {0, 1} presence label with an L1 penalty.
The resulting sparse unit weights define the concept's direction in that
layer; stacked as columns they form the layer's concept bank.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .netcore import LEVELS, NetworkSpec, forward, gap
from .solvers import AdmmConfig, WeightedLassoProblem, admm_weighted_lasso

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("sample_id", "level", "concept_id", "label", "source")


class HarmonizeError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptSpec:
    concept_id: str
    level: str
    layer: str

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown semantic level {self.level!r}")


class ConceptManifest:
    """Concept presence labels plus the per-sample input tensors they refer to.

    The CSV lists ``sample_id,level,concept_id,label,source`` rows. A sample
    without a row for some concept counts as a negative for it. Tensors live
    in a sidecar directory as ``<sample_id>.json`` files holding a nested
    (C, H, W) list.
    """

    def __init__(self, rows: Sequence[Mapping[str, Any]], tensor_dir: str | Path | None = None,
                 tensors: Mapping[str, np.ndarray] | None = None):
        self.rows = [dict(r) for r in rows]
        self.tensor_dir = None if tensor_dir is None else Path(tensor_dir)
        self._tensors: dict[str, np.ndarray] = dict(tensors or {})
        self.sample_ids: list[str] = []
        seen = set()
        self.concept_levels: dict[str, str] = {}
        self.labels: dict[str, dict[str, int]] = {}
        for r in self.rows:
            sid, cid, level = str(r["sample_id"]), str(r["concept_id"]), str(r["level"])
            label = int(r["label"])
            if label not in (0, 1):
                raise HarmonizeError(f"label for {sid}/{cid} must be 0 or 1, got {r['label']!r}")
            if level not in LEVELS:
                raise HarmonizeError(f"unknown level {level!r} for concept {cid}")
            if self.concept_levels.setdefault(cid, level) != level:
                raise HarmonizeError(f"concept {cid} listed under two levels")
            if sid not in seen:
                seen.add(sid)
                self.sample_ids.append(sid)
            self.labels.setdefault(cid, {})[sid] = label

    @classmethod
    def load(cls, path: str | Path, tensor_dir: str | Path | None = None) -> "ConceptManifest":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
                raise HarmonizeError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
            rows = list(reader)
        return cls(rows, tensor_dir if tensor_dir is not None else path.parent / "tensors")

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: r.get(k, "") for k in MANIFEST_HEADER})

    def concepts_at(self, level: str) -> list[str]:
        return sorted(c for c, lvl in self.concept_levels.items() if lvl == level)

    def label_vector(self, concept_id: str, sample_ids: Sequence[str] | None = None) -> np.ndarray:
        if concept_id not in self.labels:
            raise HarmonizeError(f"concept {concept_id!r} is absent from the manifest")
        lab = self.labels[concept_id]
        ids = self.sample_ids if sample_ids is None else sample_ids
        return np.array([lab.get(s, 0) for s in ids], dtype=np.float64)

    def positives(self, sample_id: str, level: str) -> list[str]:
        return [c for c in self.concepts_at(level) if self.labels[c].get(sample_id, 0) == 1]

    def tensor(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._tensors:
            if sample_id not in set(self.sample_ids):
                raise KeyError(f"unknown sample id {sample_id!r}")
            if self.tensor_dir is None:
                raise HarmonizeError("manifest has no tensor directory")
            f = self.tensor_dir / f"{sample_id}.json"
            self._tensors[sample_id] = np.asarray(json.loads(f.read_text()), dtype=np.float64)
        return self._tensors[sample_id]


def layer_features(net: NetworkSpec, manifest: ConceptManifest, layers: Iterable[str]) -> dict[str, np.ndarray]:
    """GAP features of the requested layers for every manifest sample (rows in manifest order)."""
    layers = list(layers)
    rows: dict[str, list[np.ndarray]] = {name: [] for name in layers}
    for sid in manifest.sample_ids:
        acts = forward(net, manifest.tensor(sid))
        for name in layers:
            rows[name].append(gap(acts[name]))
    return {name: np.vstack(v) for name, v in rows.items()}


@dataclass
class HarmonizingDataset:
    features: np.ndarray
    labels: np.ndarray
    concept: ConceptSpec
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise HarmonizeError("features must be N x I with one label per row")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise HarmonizeError("labels must be 0 or 1")
        n_pos = int(self.labels.sum())
        if n_pos == 0:
            raise HarmonizeError(f"concept {self.concept.concept_id!r} has no positive samples")
        if n_pos == len(self.labels):
            raise HarmonizeError(f"concept {self.concept.concept_id!r} has no negative samples")


def build_harmonizing_dataset(net: NetworkSpec, manifest: ConceptManifest, concept: ConceptSpec,
                              features: np.ndarray | None = None) -> HarmonizingDataset:
    if concept.concept_id not in manifest.labels:
        raise HarmonizeError(f"concept {concept.concept_id!r} is absent from the manifest")
    if features is None:
        features = layer_features(net, manifest, [concept.layer])[concept.layer]
    labels = manifest.label_vector(concept.concept_id)
    return HarmonizingDataset(features, labels, concept, list(manifest.sample_ids))


def default_lambda(features: np.ndarray) -> float:
    """0.01 * sigma_max(features)^2 / N."""
    X = np.asarray(features, dtype=np.float64)
    smax = float(np.linalg.norm(X, 2)) if X.size else 0.0
    return 0.01 * smax * smax / X.shape[0]


@dataclass
class HarmonizingWeights:
    concept: ConceptSpec
    weights: np.ndarray
    lambda_used: float
    fit_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "concept_id": self.concept.concept_id,
            "level": self.concept.level,
            "lambda": self.lambda_used,
            "weights": self.weights.tolist(),
            "fit_stats": self.fit_stats,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], layer: str) -> "HarmonizingWeights":
        return cls(
            ConceptSpec(doc["concept_id"], doc["level"], layer),
            np.asarray(doc["weights"], dtype=np.float64),
            float(doc["lambda"]),
            dict(doc.get("fit_stats", {})),
        )


def fit_concept_harmonizer(dataset: HarmonizingDataset, lam: float | None = None,
                           config: AdmmConfig | None = None) -> HarmonizingWeights:
    """Lasso-fit the unit weights of one concept (uniform sample weights)."""
    X, z = dataset.features, dataset.labels
    lam = default_lambda(X) if lam is None else float(lam)
    result = admm_weighted_lasso(WeightedLassoProblem(X, z, None, lam), config)
    r = X @ result.weights - z
    stats = result.stats()
    stats.update(loss=0.5 * float(r @ r), nonzeros=int(np.count_nonzero(result.weights)),
                 n_samples=int(len(z)), n_positive=int(z.sum()))
    if not result.converged:
        log.warning("harmonizer for %s did not converge: %s", dataset.concept.concept_id, stats)
    return HarmonizingWeights(dataset.concept, result.weights, lam, stats)


@dataclass
class ConceptBank:
    layer: str
    concepts: list[HarmonizingWeights]
    failures: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for entry in self.concepts:
            if entry.concept.layer != self.layer:
                raise HarmonizeError(
                    f"concept {entry.concept.concept_id} belongs to {entry.concept.layer}, not {self.layer}"
                )
        sizes = {len(e.weights) for e in self.concepts}
        if len(sizes) > 1:
            raise HarmonizeError("bank members have different unit counts")

    @property
    def concept_ids(self) -> list[str]:
        return [e.concept.concept_id for e in self.concepts]

    def __len__(self) -> int:
        return len(self.concepts)

    def __getitem__(self, concept_id: str) -> HarmonizingWeights:
        for e in self.concepts:
            if e.concept.concept_id == concept_id:
                return e
        raise KeyError(concept_id)

    def matrix(self, unit_norm: bool = False) -> np.ndarray:
        """Columns are the concepts' weight vectors (I x K)."""
        if not self.concepts:
            raise HarmonizeError(f"bank for {self.layer} is empty")
        phi = np.column_stack([e.weights for e in self.concepts])
        if unit_norm:
            norms = np.linalg.norm(phi, axis=0)
            phi = phi / np.where(norms > 0, norms, 1.0)
        return phi

    def to_dict(self) -> dict:
        doc = {"layer": self.layer, "concepts": [e.to_dict() for e in self.concepts]}
        if self.failures:
            doc["failures"] = dict(self.failures)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ConceptBank":
        layer = doc["layer"]
        return cls(layer, [HarmonizingWeights.from_dict(c, layer) for c in doc["concepts"]],
                   dict(doc.get("failures", {})))

    def save(self, path: str | Path, extra: Mapping[str, Any] | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ConceptBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_layer_concepts(net: NetworkSpec, manifest: ConceptManifest, layer: str, lam: float | None = None,
                       config: AdmmConfig | None = None, jobs: int = 1,
                       features: np.ndarray | None = None) -> ConceptBank:
    """Fit every manifest concept whose level maps to ``layer``.

    Failing concepts are left out of the bank and listed in ``bank.failures``.
    """
    levels = [lvl for lvl, name in net.level_map.items() if name == layer]
    concept_ids = sorted(c for lvl in levels for c in manifest.concepts_at(lvl))
    if not concept_ids:
        raise HarmonizeError(f"manifest has no concepts for layer {layer!r}")
    if features is None:
        features = layer_features(net, manifest, [layer])[layer]

    def fit_one(cid: str):
        spec = ConceptSpec(cid, manifest.concept_levels[cid], layer)
        try:
            ds = build_harmonizing_dataset(net, manifest, spec, features)
            return fit_concept_harmonizer(ds, lam, config), None
        except (HarmonizeError, ValueError, np.linalg.LinAlgError) as exc:
            return None, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(fit_one, concept_ids))
    else:
        results = [fit_one(c) for c in concept_ids]

    entries, failures = [], {}
    for cid, (entry, err) in zip(concept_ids, results):
        if entry is None:
            failures[cid] = err
        else:
            if not entry.fit_stats.get("converged", True):
                failures[cid] = "solver did not converge"
            entries.append(entry)
    return ConceptBank(layer, entries, failures)


def concept_harmonized_unit(entry: HarmonizingWeights, activation, layer: str | None = None) -> np.ndarray:
    """Weighted channel sum ``sum_j t_j A_j`` of a layer activation."""
    if layer is not None and layer != entry.concept.layer:
        raise HarmonizeError(f"activation is from {layer!r}, weights belong to {entry.concept.layer!r}")
    A = np.asarray(activation, dtype=np.float64)
    if A.shape[0] != entry.weights.shape[0]:
        raise HarmonizeError(f"activation has {A.shape[0]} channels, weights have {entry.weights.shape[0]}")
    return np.tensordot(entry.weights, A, axes=1)


class ConceptHarmonizer(TransformerMixin, BaseEstimator):
    """Estimator form of the per-concept harmonizing lasso.

    ``fit(A, z)`` learns sparse unit weights from layer features ``A`` and
    binary labels ``z``; ``transform`` returns the concept response ``A @ t``
    as a column.
    """

    def __init__(self, lam=None, rho=1.0, max_iter=5000, tol=1e-7):
        self.lam = lam
        self.rho = rho
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        self.lam_ = default_lambda(X) if self.lam is None else float(self.lam)
        cfg = AdmmConfig(rho=self.rho, max_iters=self.max_iter, tol_primal=self.tol, tol_dual=self.tol)
        self.result_ = admm_weighted_lasso(WeightedLassoProblem(X, y, None, self.lam_), cfg)
        self.coef_ = self.result_.weights
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return (X @ self.coef_)[:, None]

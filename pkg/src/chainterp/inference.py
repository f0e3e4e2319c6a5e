"""Inference weights of shallow units for a deep concept, and their concept decomposition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .harmonize import ConceptBank, HarmonizingWeights, default_lambda
from .perturb import PerturbationDataset
from .solvers import AdmmConfig, WeightedLassoADMM, WeightedLassoProblem, admm_weighted_lasso, omp_sparse_decompose


@dataclass
class InferenceWeights:
    concept_id: str
    level: str | None
    deep_layer: str
    shallow_layer: str
    weights: np.ndarray
    lambda_used: float
    solver_stats: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "concept_id": self.concept_id,
            "level": self.level,
            "deep_layer": self.deep_layer,
            "shallow_layer": self.shallow_layer,
            "lambda": self.lambda_used,
            "weights": self.weights.tolist(),
            "solver_stats": self.solver_stats,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "InferenceWeights":
        return cls(
            concept_id=doc["concept_id"],
            level=doc.get("level"),
            deep_layer=doc["deep_layer"],
            shallow_layer=doc["shallow_layer"],
            weights=np.asarray(doc["weights"], dtype=np.float64),
            lambda_used=float(doc["lambda"]),
            solver_stats=dict(doc.get("solver_stats", {})),
            provenance=dict(doc.get("provenance", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "InferenceWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ContributionVector:
    concept_id: str
    entries: dict[str, float]
    epsilon: int
    residual_norm: float

    def __post_init__(self):
        if sum(1 for v in self.entries.values() if v != 0.0) > self.epsilon:
            raise ValueError("contribution vector exceeds its sparsity bound")

    def to_dict(self) -> dict[str, Any]:
        return {
            "concept_id": self.concept_id,
            "entries": dict(self.entries),
            "epsilon": self.epsilon,
            "residual_norm": self.residual_norm,
        }


def inference_lambda(dataset: PerturbationDataset) -> float:
    """Scale-aware default: the harmonizing default applied to sqrt(h)-weighted features."""
    return default_lambda(dataset.x * np.sqrt(dataset.h)[:, None])


def fit_hierarchical_inference(dataset: PerturbationDataset, concept_id: str, lam: float | None = None,
                               config: AdmmConfig | None = None, level: str | None = None) -> InferenceWeights:
    if concept_id not in dataset.y:
        raise KeyError(f"concept {concept_id!r} has no responses in this dataset")
    if len(np.unique(dataset.gates, axis=0)) < 2:
        raise ValueError("need at least two distinct gate vectors")
    lam = inference_lambda(dataset) if lam is None else float(lam)
    result = admm_weighted_lasso(WeightedLassoProblem(dataset.x, dataset.y[concept_id], dataset.h, lam), config)
    return InferenceWeights(
        concept_id=concept_id,
        level=level,
        deep_layer=dataset.deep_layer,
        shallow_layer=dataset.shallow_layer,
        weights=result.weights,
        lambda_used=lam,
        solver_stats=result.stats(),
        provenance={"sigma": dataset.sigma, "seed": dataset.sampler.seed, "num_samples": len(dataset)},
    )


def decompose_concept(inference: InferenceWeights, bank: ConceptBank, epsilon: int = 5,
                      unit_norm: bool = False) -> ContributionVector:
    """Express the inference weights as an epsilon-sparse combination of the bank's concepts.

    ``epsilon`` larger than the bank is clamped to the bank size.
    """
    if bank.layer != inference.shallow_layer:
        raise ValueError(f"bank is for {bank.layer!r}, inference weights for {inference.shallow_layer!r}")
    if len(bank) == 0:
        raise ValueError("empty concept bank")
    if epsilon < 1:
        raise ValueError("epsilon must be at least 1")
    phi = bank.matrix(unit_norm=unit_norm)
    alpha = omp_sparse_decompose(phi, inference.weights, min(epsilon, len(bank)))
    residual = float(np.linalg.norm(phi @ alpha - inference.weights))
    entries = {cid: float(a) for cid, a in zip(bank.concept_ids, alpha) if a != 0.0}
    return ContributionVector(inference.concept_id, entries, epsilon, residual)


def directional_derivative(inference: InferenceWeights, bank_entry: HarmonizingWeights) -> float:
    if bank_entry.concept.layer != inference.shallow_layer:
        raise ValueError("harmonizing weights and inference weights live on different layers")
    if bank_entry.weights.shape != inference.weights.shape:
        raise ValueError("weight vectors differ in length")
    return float(inference.weights @ bank_entry.weights)


def concept_derivatives(inference: InferenceWeights, bank: ConceptBank) -> np.ndarray:
    return np.array([directional_derivative(inference, e) for e in bank.concepts])


def top_concept(inference: InferenceWeights, bank: ConceptBank) -> str:
    """Concept with the largest signed directional derivative; earliest in bank order on ties."""
    if len(bank) == 0:
        raise ValueError("empty concept bank")
    return bank.concept_ids[int(np.argmax(concept_derivatives(inference, bank)))]


class HierarchicalInference(WeightedLassoADMM):
    """Weighted-lasso estimator with the perturbation-scaled default penalty.

    ``fit(X, y, sample_weight)`` takes shallow GAP features, deep concept
    responses and proximity weights.
    """

    def __init__(self, lam=None, rho=1.0, max_iter=5000, tol=1e-7):
        super().__init__(lam=lam, rho=rho, max_iter=max_iter, tol=tol)

    def _penalty(self, X, h) -> float:
        if self.lam is None:
            return default_lambda(X * np.sqrt(h)[:, None])
        return float(self.lam)

"""Concept-harmonized hierarchical inference for CNN interpretation."""

__version__ = "0.1.0"

from .analytics import PCA3, WeightSet, distance_table, emit_sunburst, inter_set_distance, intra_set_distance, pca3_project
from .chain import ChainConfig, ChainTree, ClassChain, aggregate_class_chain, build_instance_chain
from .harmonize import ConceptBank, ConceptHarmonizer, ConceptManifest, fit_layer_concepts
from .inference import HierarchicalInference, InferenceWeights, decompose_concept, fit_hierarchical_inference, top_concept
from .netcore import LEVELS, NetworkSpec, forward, forward_with_gates, load_network
from .perturb import GateSamplerConfig, generate_perturbation_dataset
from .solvers import OMPCoder, WeightedLassoADMM, admm_weighted_lasso, omp_sparse_decompose

__all__ = [
    "LEVELS", "PCA3", "ChainConfig", "ChainTree", "ClassChain", "ConceptBank", "ConceptHarmonizer",
    "ConceptManifest", "GateSamplerConfig", "HierarchicalInference", "InferenceWeights", "NetworkSpec",
    "OMPCoder", "WeightSet", "WeightedLassoADMM", "admm_weighted_lasso", "aggregate_class_chain",
    "build_instance_chain", "decompose_concept", "distance_table", "emit_sunburst", "fit_hierarchical_inference",
    "fit_layer_concepts", "forward", "forward_with_gates", "generate_perturbation_dataset", "inter_set_distance",
    "intra_set_distance", "load_network", "omp_sparse_decompose", "pca3_project", "top_concept",
]

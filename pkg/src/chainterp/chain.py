"""Instance- and class-level explanation trees.

An instance tree starts at the predicted scene concept and walks down the
semantic levels. At scene->object and object->part a node is expanded by
sparse decomposition of its inference weights over the next level's concept
bank; at part->material and material->color only the single concept with the
largest directional derivative is kept.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .harmonize import ConceptBank, concept_harmonized_unit
from .inference import (
    InferenceWeights,
    concept_derivatives,
    decompose_concept,
    fit_hierarchical_inference,
)
from .netcore import LEVELS, NetworkSpec, forward
from .perturb import GateSamplerConfig, PerturbationDataset, default_num_samples, generate_perturbation_dataset
from .solvers import AdmmConfig

log = logging.getLogger(__name__)

SCHEMA = "chain.v1"
# levels expanded by sparse decomposition; the rest keep one child
DECOMPOSED_LEVELS = ("scene", "object")


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    epsilon: int = 5
    lam: float | None = None
    sigma: float | None = None
    keep_probability: float = 0.5
    num_samples: int | None = None
    seed: int = 0
    rho: float = 1.0
    max_iters: int = 5000
    tol: float = 1e-7
    # children expanded per node, keyed by the child level
    expand_budget: Mapping[str, int] = field(default_factory=lambda: {"object": 3, "part": 2})
    unit_norm: bool = False
    jobs: int = 1

    def snapshot(self) -> dict[str, Any]:
        snap = asdict(self)
        snap["expand_budget"] = dict(self.expand_budget)
        snap.pop("jobs")
        return snap

    def admm(self) -> AdmmConfig:
        return AdmmConfig(rho=self.rho, max_iters=self.max_iters, tol_primal=self.tol, tol_dual=self.tol)


@dataclass
class ChainNode:
    concept_id: str
    level: str
    contribution: float
    saliency: float
    children: list["ChainNode"] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "concept_id": self.concept_id,
            "level": self.level,
            "contribution": self.contribution,
            "saliency": self.saliency,
            "children": [c.to_dict() for c in self.children],
        }
        if self.error is not None:
            doc["error"] = self.error
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ChainNode":
        return cls(
            concept_id=doc["concept_id"],
            level=doc["level"],
            contribution=float(doc["contribution"]),
            saliency=float(doc["saliency"]),
            children=[cls.from_dict(c) for c in doc.get("children", [])],
            error=doc.get("error"),
        )

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class ChainTree:
    instance_id: str
    predicted_class: str
    root: ChainNode
    config: dict[str, Any] = field(default_factory=dict)
    inference: dict[str, InferenceWeights] = field(default_factory=dict, compare=False, repr=False)
    # perturbation datasets keyed by deep level; kept in memory only
    datasets: dict[str, PerturbationDataset] = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "kind": "instance",
            "instance_id": self.instance_id,
            "predicted_class": self.predicted_class,
            "config": self.config,
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ChainTree":
        if doc.get("schema") != SCHEMA or doc.get("kind") != "instance":
            raise ChainError("not a chain.v1 instance document")
        return cls(doc["instance_id"], doc["predicted_class"], ChainNode.from_dict(doc["root"]),
                   dict(doc.get("config", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ChainTree":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ChainTree":
        return cls.loads(Path(path).read_text())


def check_level_discipline(root: ChainNode) -> None:
    """Raise if any edge does not step exactly one semantic level shallower."""
    for node in root.walk():
        depth = LEVELS.index(node.level)
        for child in node.children:
            if LEVELS.index(child.level) != depth + 1:
                raise ChainError(f"edge {node.concept_id}->{child.concept_id} skips levels")


def max_contribution_path(root: ChainNode) -> list[str]:
    """Follow the child with the largest contribution from the root down."""
    path = [root.concept_id]
    node = root
    while node.children:
        node = max(node.children, key=lambda c: c.contribution)  # first wins ties
        path.append(node.concept_id)
    return path


def _saliency(bank: ConceptBank, concept_id: str, acts: Mapping[str, np.ndarray]) -> float:
    return float(np.mean(concept_harmonized_unit(bank[concept_id], acts[bank.layer])))


def build_instance_chain(net: NetworkSpec, x, banks: Mapping[str, ConceptBank], config: ChainConfig | None = None,
                         instance_id: str = "") -> ChainTree:
    cfg = config or ChainConfig()
    missing = [lvl for lvl in LEVELS if lvl not in banks or len(banks[lvl]) == 0]
    if missing:
        raise ChainError(f"missing concept banks for levels {missing}")
    for lvl in LEVELS:
        if banks[lvl].layer != net.layer_for_level(lvl):
            raise ChainError(f"bank for {lvl} is on {banks[lvl].layer}, network maps it to {net.level_map[lvl]}")

    x = np.asarray(x, dtype=np.float64)
    acts = forward(net, x)
    out_layer = net.layers[-1].name
    pred = int(np.argmax(acts[out_layer]))
    predicted = net.class_names[pred] if net.class_names else str(pred)
    scene_bank = banks["scene"]
    if predicted in scene_bank.concept_ids:
        root_id = predicted
    else:
        scores = [_saliency(scene_bank, c, acts) for c in scene_bank.concept_ids]
        root_id = scene_bank.concept_ids[int(np.argmax(scores))]
    root = ChainNode(root_id, "scene", 1.0, _saliency(scene_bank, root_id, acts))

    datasets: dict[str, PerturbationDataset] = {}
    inference: dict[str, InferenceWeights] = {}

    def dataset_for(deep_level: str, shallow_level: str) -> PerturbationDataset:
        # one gate sample set per (instance, shallow layer), shared by all deep concepts
        if deep_level not in datasets:
            shallow_layer = net.layer_for_level(shallow_level)
            n_units = net.num_units(shallow_layer)
            sampler = GateSamplerConfig(
                num_samples=cfg.num_samples or default_num_samples(n_units),
                keep_probability=cfg.keep_probability,
                seed=cfg.seed,
            )
            datasets[deep_level] = generate_perturbation_dataset(
                net, x, shallow_layer, banks[deep_level].layer, banks[deep_level], sampler, cfg.sigma, cfg.jobs
            )
        return datasets[deep_level]

    def expand(node: ChainNode) -> None:
        depth = LEVELS.index(node.level)
        if depth + 1 >= len(LEVELS):
            return
        child_level = LEVELS[depth + 1]
        child_bank = banks[child_level]
        try:
            ds = dataset_for(node.level, child_level)
            w = fit_hierarchical_inference(ds, node.concept_id, cfg.lam, cfg.admm(), level=node.level)
            if not w.solver_stats.get("converged", False):
                log.warning("inference for %s did not converge", node.concept_id)
            inference[node.concept_id] = w
            if node.level in DECOMPOSED_LEVELS:
                contrib = decompose_concept(w, child_bank, cfg.epsilon, unit_norm=cfg.unit_norm)
                picked = [(cid, contrib.entries[cid]) for cid in child_bank.concept_ids if cid in contrib.entries]
            else:
                deriv = concept_derivatives(w, child_bank)
                k = int(np.argmax(deriv))
                picked = [(child_bank.concept_ids[k], float(deriv[k]))]
        except Exception as exc:  # annotate and prune, never abort the tree
            log.warning("expansion of %s failed: %s", node.concept_id, exc)
            node.error = f"{type(exc).__name__}: {exc}"
            node.children = []
            return
        picked.sort(key=lambda kv: -kv[1])  # stable: bank order breaks ties
        node.children = [ChainNode(cid, child_level, val, _saliency(child_bank, cid, acts)) for cid, val in picked]
        budget = cfg.expand_budget.get(child_level)
        for child in node.children[: budget if budget is not None else len(node.children)]:
            expand(child)

    expand(root)
    tree = ChainTree(instance_id, predicted, root, {**cfg.snapshot()}, inference, datasets)
    check_level_discipline(tree.root)
    return tree


@dataclass
class ClassNode:
    concept_id: str
    level: str
    contribution: float
    support: float
    parent: str | None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ClassChain:
    class_id: str
    instance_ids: list[str]
    share_fraction: float
    nodes: dict[str, list[ClassNode]]

    def concepts(self, level: str) -> list[str]:
        return [n.concept_id for n in self.nodes.get(level, [])]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "kind": "class",
            "class_id": self.class_id,
            "instance_ids": list(self.instance_ids),
            "share_fraction": self.share_fraction,
            "levels": {lvl: [n.to_dict() for n in self.nodes.get(lvl, [])] for lvl in LEVELS},
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ClassChain":
        if doc.get("schema") != SCHEMA or doc.get("kind") != "class":
            raise ChainError("not a chain.v1 class document")
        nodes = {lvl: [ClassNode(**n) for n in entries] for lvl, entries in doc["levels"].items() if entries}
        return cls(doc["class_id"], list(doc["instance_ids"]), float(doc["share_fraction"]), nodes)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def to_tree(self) -> ChainNode:
        """Nest the shared concepts under their most frequent parent for display."""
        roots = self.nodes.get("scene", [])
        if not roots:
            raise ChainError("class chain has no scene-level concept")
        built = {n.concept_id: ChainNode(n.concept_id, n.level, n.contribution, n.support) for n in roots}
        for lvl in LEVELS[1:]:
            for n in self.nodes.get(lvl, []):
                node = ChainNode(n.concept_id, n.level, n.contribution, n.support)
                if n.parent in built:
                    built[n.parent].children.append(node)
                built[n.concept_id] = node
        return built[roots[0].concept_id]


def aggregate_class_chain(trees: Sequence[ChainTree], share_fraction: float = 0.5) -> ClassChain:
    """Keep concepts shared by at least ``share_fraction`` of the trees at each level.

    A concept's class contribution is its mean instance contribution, counting
    0 for trees where it is absent. Within one tree, repeated occurrences at a
    level are summed.
    """
    if not trees:
        raise ChainError("need at least one instance tree")
    if not 0.0 < share_fraction <= 1.0:
        raise ChainError("share_fraction must lie in (0, 1]")
    classes = {t.predicted_class for t in trees}
    if len(classes) > 1:
        raise ChainError(f"trees predict different classes: {sorted(classes)}")
    n = len(trees)

    totals: dict[tuple[str, str], float] = defaultdict(float)
    counts: dict[tuple[str, str], int] = defaultdict(int)
    parents: dict[tuple[str, str], dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for tree in trees:
        seen: set[tuple[str, str]] = set()
        stack: list[tuple[ChainNode, str | None]] = [(tree.root, None)]
        while stack:
            node, parent = stack.pop()
            key = (node.level, node.concept_id)
            totals[key] += node.contribution
            if parent is not None:
                parents[key][parent] += 1
            if key not in seen:
                seen.add(key)
                counts[key] += 1
            stack.extend((c, node.concept_id) for c in node.children)

    nodes: dict[str, list[ClassNode]] = {}
    kept_prev: set[str] = set()
    for lvl in LEVELS:
        kept = []
        for (level, cid), cnt in counts.items():
            if level != lvl or cnt < share_fraction * n - 1e-12:
                continue
            parent = None
            if lvl != "scene":
                options = {p: c for p, c in parents[(level, cid)].items() if p in kept_prev}
                if not options:
                    continue
                parent = sorted(options, key=lambda p: (-options[p], p))[0]
            kept.append(ClassNode(cid, lvl, totals[(level, cid)] / n, cnt / n, parent))
        kept.sort(key=lambda c: (-c.contribution, c.concept_id))
        if kept:
            nodes[lvl] = kept
        kept_prev = {c.concept_id for c in kept}
    return ClassChain(classes.pop(), [t.instance_id for t in trees], share_fraction, nodes)

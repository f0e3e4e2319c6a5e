"""Synthetic five-level networks and concept manifests with a planted hierarchy.

The generator draws a concept tree (scenes -> objects -> parts -> materials ->
colors), builds a bias-free network whose units at each level sum their
children's units, and renders inputs top-down: every present color becomes a
rectangular blob in its input channel. Each parent reads one *dominant* child
with weight 1.0 and its other children with smaller weights, so the planted
chain of a scene is the path of dominant children.

Concept ids are assigned to units through a random permutation per level, so
the harmonizing stage has to discover the alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .harmonize import ConceptManifest
from .netcore import LEVELS, LayerSpec, NetworkSpec, validate_network

# shallow to deep
_BUILD_ORDER = ("color", "material", "part", "object", "scene")


@dataclass
class PlantedHierarchy:
    # per level: concept ids in unit order
    unit_concepts: dict[str, list[str]]
    # parent concept -> children concept ids (dominant first)
    children: dict[str, list[str]]
    # parent concept -> {child: weight}
    weights: dict[str, dict[str, float]]
    parent: dict[str, str] = field(default_factory=dict)

    def dominant_chain(self, scene: str) -> list[str]:
        path = [scene]
        while path[-1] in self.children:
            path.append(self.children[path[-1]][0])
        return path

    def level_of(self, concept_id: str) -> str:
        for level, ids in self.unit_concepts.items():
            if concept_id in ids:
                return level
        raise KeyError(concept_id)

    def to_dict(self) -> dict:
        return {"unit_concepts": self.unit_concepts, "children": self.children, "weights": self.weights}


@dataclass
class SyntheticWorkspace:
    net: NetworkSpec
    manifest: ConceptManifest
    hierarchy: PlantedHierarchy
    tensors: dict[str, np.ndarray]
    sample_scene: dict[str, str]
    full_samples: dict[str, list[str]]


def _ids(level: str, n: int) -> list[str]:
    return [f"{level}_{i + 1:02d}" for i in range(n)]


def make_hierarchy(rng: np.random.Generator, n_scenes: int = 3, branching: int = 2,
                   secondary: tuple[float, float] = (0.25, 0.45)) -> PlantedHierarchy:
    counts = {"scene": n_scenes}
    for deep, shallow in zip(LEVELS, LEVELS[1:]):
        counts[shallow] = counts[deep] * branching
    ids = {lvl: _ids(lvl, counts[lvl]) for lvl in LEVELS}

    children: dict[str, list[str]] = {}
    weights: dict[str, dict[str, float]] = {}
    parent: dict[str, str] = {}
    for deep, shallow in zip(LEVELS, LEVELS[1:]):
        pool = list(rng.permutation(ids[shallow]))
        for i, cid in enumerate(ids[deep]):
            kids = [str(k) for k in pool[i * branching:(i + 1) * branching]]
            kids.sort()
            dom = int(rng.integers(len(kids)))
            kids.insert(0, kids.pop(dom))
            children[cid] = kids
            weights[cid] = {kids[0]: 1.0}
            for k in kids[1:]:
                weights[cid][k] = float(rng.uniform(*secondary))
            for k in kids:
                parent[k] = cid
    unit_concepts = {lvl: [str(c) for c in rng.permutation(ids[lvl])] for lvl in LEVELS}
    return PlantedHierarchy(unit_concepts, children, weights, parent)


def make_network(hier: PlantedHierarchy, size: int = 6) -> NetworkSpec:
    colors = hier.unit_concepts["color"]
    n_colors = len(colors)
    # input channel i carries color concept color_{i+1}
    channel = {c: i for i, c in enumerate(sorted(colors))}
    w1 = np.zeros((n_colors, n_colors, 3, 3))
    for unit, cid in enumerate(colors):
        w1[unit, channel[cid], 1, 1] = 1.0
    layers = [LayerSpec("conv1", "conv", {"stride": 1, "padding": 1}, w1), LayerSpec("relu1", "relu")]

    for idx, (shallow, deep) in enumerate(zip(_BUILD_ORDER, _BUILD_ORDER[1:]), start=2):
        s_units = {c: i for i, c in enumerate(hier.unit_concepts[shallow])}
        d_ids = hier.unit_concepts[deep]
        w = np.zeros((len(d_ids), len(s_units)))
        for unit, cid in enumerate(d_ids):
            for child, weight in hier.weights[cid].items():
                w[unit, s_units[child]] = weight
        if deep == "scene":
            layers += [LayerSpec("gap", "gap"), LayerSpec("fc", "dense", {}, w)]
        else:
            layers += [LayerSpec(f"conv{idx}", "conv", {}, w[:, :, None, None]), LayerSpec(f"relu{idx}", "relu")]

    level_map = {"color": "relu1", "material": "relu2", "part": "relu3", "object": "relu4", "scene": "fc"}
    return validate_network(layers, (n_colors, size, size), level_map, hier.unit_concepts["scene"])


def render(hier: PlantedHierarchy, scene: str, rng: np.random.Generator, size: int = 6,
           keep: float = 0.75, distractor: float = 0.3, full: bool = False) -> tuple[np.ndarray, set[str]]:
    """Render one input of ``scene``; returns the tensor and the set of present concepts."""
    colors = sorted(hier.unit_concepts["color"])
    channel = {c: i for i, c in enumerate(colors)}
    present = {scene}
    frontier = list(hier.children[scene])
    if not full and rng.random() < distractor:
        others = [o for o in hier.unit_concepts["object"] if hier.parent[o] != scene]
        extra = str(others[int(rng.integers(len(others)))])
        present.add(extra)
        queue = [extra]
    else:
        queue = []

    def pick(kids: list[str]) -> list[str]:
        if full:
            return list(kids)
        chosen = [k for k in kids if rng.random() < keep]
        return chosen or [kids[int(rng.integers(len(kids)))]]

    queue = pick(frontier) + queue
    while queue:
        cid = queue.pop(0)
        present.add(cid)
        if cid in hier.children:
            queue.extend(pick(hier.children[cid]))

    x = np.zeros((len(colors), size, size))
    for cid in sorted(present):
        if not cid.startswith("color_"):
            continue
        h, w = rng.integers(2, 5, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        x[channel[cid], top:top + h, left:left + w] += rng.uniform(0.5, 1.0)
    return x, present


def make_workspace(seed: int = 0, samples_per_scene: int = 80, full_per_scene: int = 3,
                   n_scenes: int = 3, size: int = 6) -> SyntheticWorkspace:
    rng = np.random.default_rng(seed)
    hier = make_hierarchy(rng, n_scenes=n_scenes)
    net = make_network(hier, size=size)
    rows, tensors, sample_scene = [], {}, {}
    full_samples: dict[str, list[str]] = {}
    scenes = sorted(hier.unit_concepts["scene"])

    def add(sid: str, scene: str, full: bool):
        x, present = render(hier, scene, rng, size=size, full=full)
        tensors[sid] = x
        sample_scene[sid] = scene
        for cid in sorted(present):
            rows.append({"sample_id": sid, "level": hier.level_of(cid), "concept_id": cid, "label": 1,
                         "source": "synthetic-full" if full else "synthetic"})

    n = 0
    for _ in range(samples_per_scene):
        for scene in scenes:
            add(f"s{n:04d}", scene, full=False)
            n += 1
    for scene in scenes:
        full_samples[scene] = []
        for j in range(full_per_scene):
            sid = f"full_{scene}_{j}"
            add(sid, scene, full=True)
            full_samples[scene].append(sid)
    manifest = ConceptManifest(rows, tensors=tensors)
    return SyntheticWorkspace(net, manifest, hier, tensors, sample_scene, full_samples)

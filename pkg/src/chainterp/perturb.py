"""Gate-perturbation datasets linking shallow units to deep concepts.

Each record switches off a random subset of the shallow layer's channels,
reruns the rest of the network with its weights untouched, and stores the
shallow GAP vector ``x``, the GAP of every deep concept-harmonized unit ``y``
and the proximity weight ``h(e) = exp(-||e - 1||^2 / sigma^2)``.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .harmonize import ConceptBank, HarmonizingWeights, concept_harmonized_unit
from .netcore import NetworkSpec, forward, forward_with_gates, gap


@dataclass(frozen=True)
class GateSamplerConfig:
    num_samples: int = 200
    keep_probability: float = 0.5
    seed: int = 0
    include_all_ones: bool = True

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if not 0.0 < self.keep_probability <= 1.0:
            raise ValueError("keep_probability must lie in (0, 1]")


def default_num_samples(num_units: int) -> int:
    return max(10 * num_units, 200)


def default_sigma(num_units: int) -> float:
    return float(np.sqrt(num_units) / 2.0)


def sample_gates(config: GateSamplerConfig, num_units: int) -> np.ndarray:
    """Draw an (N, I) 0/1 matrix, entries independently 1 with the keep probability."""
    rng = np.random.default_rng(config.seed)
    gates = (rng.random((config.num_samples, num_units)) < config.keep_probability).astype(np.float64)
    if config.include_all_ones:
        gates[0] = 1.0
    return gates


def proximity_weight(gates, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    e = np.asarray(gates, dtype=np.float64)
    return float(np.exp(-np.sum((e - 1.0) ** 2) / sigma**2))


def concept_response(net: NetworkSpec, x, gates, gate_layer: str, bank_entry: HarmonizingWeights,
                     deep_layer: str, base: Mapping[str, np.ndarray] | None = None) -> float:
    """GAP of the deep concept-harmonized unit under the given gates."""
    if bank_entry.concept.layer != deep_layer:
        raise ValueError(f"bank entry belongs to {bank_entry.concept.layer!r}, not {deep_layer!r}")
    if net.layer_index(deep_layer) <= net.layer_index(gate_layer):
        raise ValueError("deep layer must come after the gated layer")
    acts = forward_with_gates(net, x, gate_layer, gates, base=base)
    return _response(bank_entry, acts[deep_layer])


def _response(entry: HarmonizingWeights, deep_act: np.ndarray) -> float:
    return float(np.mean(concept_harmonized_unit(entry, deep_act)))


@dataclass
class PerturbationRecord:
    gates: np.ndarray
    shallow_gap: np.ndarray
    concept_responses: dict[str, float]
    proximity: float


@dataclass
class PerturbationDataset:
    shallow_layer: str
    deep_layer: str
    sigma: float
    gates: np.ndarray  # (N, I)
    x: np.ndarray  # (N, I)
    y: dict[str, np.ndarray]  # concept_id -> (N,)
    h: np.ndarray  # (N,)
    sampler: GateSamplerConfig = field(default_factory=GateSamplerConfig)

    def __len__(self) -> int:
        return self.gates.shape[0]

    @property
    def records(self) -> list[PerturbationRecord]:
        return [
            PerturbationRecord(self.gates[n], self.x[n], {k: float(v[n]) for k, v in self.y.items()},
                               float(self.h[n]))
            for n in range(len(self))
        ]

    def header(self) -> dict[str, Any]:
        return {
            "shallow_layer": self.shallow_layer,
            "deep_layer": self.deep_layer,
            "sigma": self.sigma,
            "sampler": asdict(self.sampler),
            "seed": self.sampler.seed,
            "concepts": sorted(self.y),
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for n in range(len(self)):
            lines.append(json.dumps({
                "gates": [int(g) for g in self.gates[n]],
                "x": self.x[n].tolist(),
                "y": {k: float(self.y[k][n]) for k in sorted(self.y)},
                "h": float(self.h[n]),
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> str:
        """Write JSON lines; returns the sha256 of the written bytes."""
        text = self.dumps()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def loads(cls, text: str) -> "PerturbationDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        recs = [json.loads(ln) for ln in lines[1:]]
        concepts = head["concepts"]
        return cls(
            shallow_layer=head["shallow_layer"],
            deep_layer=head["deep_layer"],
            sigma=float(head["sigma"]),
            gates=np.array([r["gates"] for r in recs], dtype=np.float64),
            x=np.array([r["x"] for r in recs], dtype=np.float64),
            y={c: np.array([r["y"][c] for r in recs], dtype=np.float64) for c in concepts},
            h=np.array([r["h"] for r in recs], dtype=np.float64),
            sampler=GateSamplerConfig(**head["sampler"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PerturbationDataset":
        return cls.loads(Path(path).read_text())


def generate_perturbation_dataset(net: NetworkSpec, x, shallow_layer: str, deep_layer: str, bank: ConceptBank,
                                  sampler: GateSamplerConfig | None = None, sigma: float | None = None,
                                  jobs: int = 1) -> PerturbationDataset:
    """Build the perturbation dataset for every concept of ``bank`` on one input.

    One gate sample set is shared by all deep concepts of the input.
    """
    if bank.layer != deep_layer:
        raise ValueError(f"bank is for {bank.layer!r}, deep layer is {deep_layer!r}")
    if net.layer_index(deep_layer) <= net.layer_index(shallow_layer):
        raise ValueError("deep layer must come after the shallow layer")
    n_units = net.num_units(shallow_layer)
    sampler = sampler or GateSamplerConfig(num_samples=default_num_samples(n_units))
    sigma = default_sigma(n_units) if sigma is None else float(sigma)
    gates = sample_gates(sampler, n_units)
    base = forward(net, x)

    def run(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        acts = forward_with_gates(net, None, shallow_layer, e, base=base)
        deep = acts[deep_layer]
        return gap(acts[shallow_layer]), np.array([_response(entry, deep) for entry in bank.concepts])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(run, gates))
    else:
        out = [run(e) for e in gates]

    xs = np.vstack([o[0] for o in out])
    ys = np.vstack([o[1] for o in out])
    h = np.array([proximity_weight(e, sigma) for e in gates])
    return PerturbationDataset(
        shallow_layer=shallow_layer,
        deep_layer=deep_layer,
        sigma=sigma,
        gates=gates,
        x=xs,
        y={cid: ys[:, k].copy() for k, cid in enumerate(bank.concept_ids)},
        h=h,
        sampler=sampler,
    )

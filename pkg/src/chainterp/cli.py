"""Command-line entry point: ``chainterp <command> [flags]``.

Commands: harmonize, explain-instance, explain-class, distances, demo.

Exit codes: 0 success, 1 internal or validation failure, 2 missing input,
3 missing prerequisite artifact, 4 unknown id, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomli

from . import __version__
from .analytics import WeightSet, distance_table, emit_sunburst, pca3_project
from .chain import ChainConfig, ChainError, ChainTree, aggregate_class_chain, build_instance_chain, max_contribution_path
from .harmonize import ConceptBank, ConceptManifest, HarmonizeError, fit_layer_concepts, layer_features
from .inference import InferenceWeights
from .netcore import LEVELS, NetworkSpec, NetworkSpecError, load_network, save_network
from .solvers import AdmmConfig

log = logging.getLogger("chainterp")

EXIT_OK, EXIT_INTERNAL, EXIT_MISSING_INPUT, EXIT_MISSING_ARTIFACT, EXIT_UNKNOWN_ID, EXIT_IO = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    net: str | None = None
    manifest: str | None = None
    tensors: str | None = None
    out: str = "chain_out"
    layer: str | None = None
    lam: float | None = None
    epsilon: int = 5
    sigma: float | None = None
    keep_prob: float = 0.5
    samples: int | None = None
    rho: float = 1.0
    tol: float = 1e-7
    max_iters: int = 5000
    share_fraction: float = 0.5
    seed: int = 0
    jobs: int = 1

    def validate(self) -> "RunConfig":
        checks = [
            (self.lam is None or self.lam >= 0, "lambda must be nonnegative"),
            (self.epsilon >= 1, "epsilon must be at least 1"),
            (self.sigma is None or self.sigma > 0, "sigma must be positive"),
            (0 < self.keep_prob <= 1, "keep-prob must lie in (0, 1]"),
            (self.samples is None or self.samples >= 2, "samples must be at least 2"),
            (self.rho > 0, "rho must be positive"),
            (self.tol > 0 and self.max_iters >= 1, "tolerance and iteration budget must be positive"),
            (0 < self.share_fraction <= 1, "share-fraction must lie in (0, 1]"),
            (self.jobs >= 1, "jobs must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise CliError(EXIT_INTERNAL, msg)
        return self

    def snapshot(self) -> dict[str, Any]:
        # paths and parallelism do not affect results
        snap = asdict(self)
        for key in ("net", "manifest", "tensors", "out", "jobs"):
            snap.pop(key)
        return snap

    def chain_config(self) -> ChainConfig:
        return ChainConfig(epsilon=self.epsilon, lam=self.lam, sigma=self.sigma, keep_probability=self.keep_prob,
                           num_samples=self.samples, seed=self.seed, rho=self.rho, max_iters=self.max_iters,
                           tol=self.tol, jobs=self.jobs)

    def admm(self) -> AdmmConfig:
        return AdmmConfig(rho=self.rho, max_iters=self.max_iters, tol_primal=self.tol, tol_dual=self.tol)


_FLAG_TO_FIELD = {"lambda": "lam", "keep-prob": "keep_prob", "share-fraction": "share_fraction",
                  "max-iters": "max_iters"}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _provenance(cfg: RunConfig, inputs: dict[str, Path]) -> dict[str, Any]:
    return {
        "tool": f"chainterp {__version__}",
        "config": cfg.snapshot(),
        "inputs": {name: {"file": p.name, "sha256": _sha256(p)} for name, p in sorted(inputs.items())},
    }


def _write_json(path: Path, doc: Any) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _load_net(cfg: RunConfig) -> tuple[NetworkSpec, Path]:
    if not cfg.net:
        raise CliError(EXIT_MISSING_INPUT, "--net is required")
    path = Path(cfg.net)
    if not path.is_file():
        raise CliError(EXIT_MISSING_INPUT, f"network spec not found: {path}")
    try:
        return load_network(path), path
    except NetworkSpecError as exc:
        raise CliError(EXIT_MISSING_INPUT, f"invalid network spec {path}: {exc}") from exc


def _load_manifest(cfg: RunConfig) -> tuple[ConceptManifest, Path]:
    if not cfg.manifest:
        raise CliError(EXIT_MISSING_INPUT, "--manifest is required")
    path = Path(cfg.manifest)
    if not path.is_file():
        raise CliError(EXIT_MISSING_INPUT, f"manifest not found: {path}")
    try:
        return ConceptManifest.load(path, cfg.tensors), path
    except (HarmonizeError, KeyError, ValueError) as exc:
        raise CliError(EXIT_MISSING_INPUT, f"invalid manifest {path}: {exc}") from exc


def _bank_path(cfg: RunConfig, level: str) -> Path:
    return Path(cfg.out) / "banks" / f"{level}.json"


def _load_banks(cfg: RunConfig) -> tuple[dict[str, ConceptBank], dict[str, Path]]:
    banks, paths = {}, {}
    for level in LEVELS:
        p = _bank_path(cfg, level)
        if not p.is_file():
            raise CliError(EXIT_MISSING_ARTIFACT, f"concept bank missing: {p} (run harmonize first)")
        banks[level] = ConceptBank.load(p)
        paths[f"bank_{level}"] = p
    return banks, paths


# ---------------------------------------------------------------------------
# commands


def cmd_harmonize(cfg: RunConfig) -> int:
    net, net_path = _load_net(cfg)
    manifest, man_path = _load_manifest(cfg)
    levels = [lvl for lvl in LEVELS if lvl in net.level_map]
    if cfg.layer:
        levels = [lvl for lvl in levels if net.level_map[lvl] == cfg.layer]
        if not levels:
            raise CliError(EXIT_UNKNOWN_ID, f"layer {cfg.layer!r} is not mapped to any semantic level")
    try:
        feats = layer_features(net, manifest, {net.level_map[lvl] for lvl in levels})
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_MISSING_INPUT, f"cannot read sample tensors: {exc}") from exc
    prov = _provenance(cfg, {"net": net_path, "manifest": man_path})
    failures: dict[str, str] = {}
    for level in levels:
        layer = net.level_map[level]
        try:
            bank = fit_layer_concepts(net, manifest, layer, cfg.lam, cfg.admm(), cfg.jobs, feats[layer])
        except HarmonizeError as exc:
            failures[level] = str(exc)
            continue
        _write_json(_bank_path(cfg, level), {**bank.to_dict(), "provenance": prov})
        for entry in bank.concepts:
            st = entry.fit_stats
            print(f"{level:9s} {entry.concept.concept_id:16s} nonzeros={st['nonzeros']:4d} loss={st['loss']:.6g}")
        failures.update(bank.failures)
    if failures:
        for cid, msg in sorted(failures.items()):
            print(f"FAILED {cid}: {msg}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def _explain(cfg: RunConfig, net: NetworkSpec, manifest: ConceptManifest, banks: dict[str, ConceptBank],
             sample_id: str, prov: dict[str, Any]) -> ChainTree:
    if sample_id not in set(manifest.sample_ids):
        raise CliError(EXIT_UNKNOWN_ID, f"sample id {sample_id!r} is not in the manifest")
    try:
        x = manifest.tensor(sample_id)
    except OSError as exc:
        raise CliError(EXIT_MISSING_INPUT, f"cannot read tensor for {sample_id}: {exc}") from exc
    try:
        tree = build_instance_chain(net, x, banks, cfg.chain_config(), sample_id)
    except ChainError as exc:
        raise CliError(EXIT_MISSING_ARTIFACT, str(exc)) from exc
    base = Path(cfg.out) / "instances" / sample_id
    _write_json(base / "chain.json", {**tree.to_dict(), "provenance": prov})
    _write_json(base / "sunburst.json", {**emit_sunburst(tree), "provenance": prov})
    for cid, w in sorted(tree.inference.items()):
        doc = w.to_dict()
        doc["provenance"] = {**doc["provenance"], **prov, "instance_id": sample_id}
        _write_json(base / "inference" / f"{cid}.json", doc)
    return tree


def _echo_tree(tree: ChainTree) -> None:
    print(f"{tree.instance_id}: predicted {tree.predicted_class}")
    per_level: dict[str, list[str]] = {}
    for node in tree.root.walk():
        per_level.setdefault(node.level, [])
        if node.concept_id not in per_level[node.level]:
            per_level[node.level].append(node.concept_id)
    for level in LEVELS:
        if level in per_level:
            print(f"  {level:9s} {' '.join(per_level[level])}")
    print(f"  path      {' > '.join(max_contribution_path(tree.root))}")


def _explain_inputs(cfg: RunConfig):
    net, net_path = _load_net(cfg)
    manifest, man_path = _load_manifest(cfg)
    banks, bank_paths = _load_banks(cfg)
    prov = _provenance(cfg, {"net": net_path, "manifest": man_path, **bank_paths})
    return net, manifest, banks, prov


def cmd_explain_instance(cfg: RunConfig, sample_id: str) -> int:
    net, manifest, banks, prov = _explain_inputs(cfg)
    tree = _explain(cfg, net, manifest, banks, sample_id, prov)
    _echo_tree(tree)
    return EXIT_OK


def cmd_explain_class(cfg: RunConfig, class_id: str, sample_ids: Sequence[str]) -> int:
    if not sample_ids:
        raise CliError(EXIT_MISSING_INPUT, "explain-class needs at least one sample id")
    net, manifest, banks, prov = _explain_inputs(cfg)
    trees = [_explain(cfg, net, manifest, banks, sid, prov) for sid in sample_ids]
    wrong = [t.instance_id for t in trees if t.predicted_class != class_id]
    if wrong:
        raise CliError(EXIT_INTERNAL, f"mixed classes: {', '.join(wrong)} not predicted as {class_id!r}")
    chain = aggregate_class_chain(trees, cfg.share_fraction)
    base = Path(cfg.out) / "classes" / class_id
    _write_json(base / "class_chain.json", {**chain.to_dict(), "provenance": prov})
    _write_json(base / "sunburst.json", {**emit_sunburst(chain), "provenance": prov})
    print(f"class {class_id}: {len(trees)} instances, share fraction {cfg.share_fraction}")
    for level in LEVELS:
        if chain.concepts(level):
            print(f"  {level:9s} {' '.join(chain.concepts(level))}")
    return EXIT_OK


def read_grouping(path: Path) -> list[WeightSet]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"set_id", "instance_id", "path"} <= set(rows[0]):
        raise CliError(EXIT_MISSING_INPUT, f"{path}: grouping CSV needs set_id,instance_id,path columns")
    members: dict[str, list[tuple[str, InferenceWeights]]] = {}
    for r in rows:
        wpath = (path.parent / r["path"]).resolve() if not Path(r["path"]).is_absolute() else Path(r["path"])
        if not wpath.is_file():
            raise CliError(EXIT_MISSING_ARTIFACT, f"inference weights missing: {wpath}")
        members.setdefault(r["set_id"], []).append((r["instance_id"], InferenceWeights.load(wpath)))
    try:
        return [WeightSet.from_inference(sid, m) for sid, m in members.items()]
    except ValueError as exc:
        raise CliError(EXIT_INTERNAL, str(exc)) from exc


def cmd_distances(cfg: RunConfig, grouping: str) -> int:
    gpath = Path(grouping)
    if not gpath.is_file():
        raise CliError(EXIT_MISSING_INPUT, f"grouping file not found: {gpath}")
    sets = read_grouping(gpath)
    dims = {s.weights.shape[1] for s in sets}
    if len(dims) > 1:
        raise CliError(EXIT_INTERNAL, f"weight dimension mismatch across sets: {sorted(dims)}")
    table = distance_table(sets)
    out = Path(cfg.out)
    _write_text(out / "distances.csv", table.to_csv())
    meta: dict[str, Any] = {"provenance": _provenance(cfg, {"grouping": gpath}),
                            "sets": {s.label: s.instance_ids for s in sets}}
    n_members = sum(len(s.instance_ids) for s in sets)
    if n_members >= 3 and dims.pop() >= 3:
        proj = pca3_project(sets)
        _write_text(out / "pca.csv", proj.to_csv())
        meta["pca"] = {"explained_variance_ratio": proj.explained_variance_ratio.tolist(),
                       "degenerate": proj.degenerate}
    else:
        meta["pca"] = {"skipped": "need at least 3 members of dimension at least 3"}
    _write_json(out / "distances.meta.json", meta)
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_demo(cfg: RunConfig) -> int:
    from .synthetic import make_workspace

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"output directory {out} is not writable: {exc}") from exc

    stage = "generate"
    try:
        ws = make_workspace(cfg.seed)
        save_network(ws.net, out / "net.json")
        tdir = out / "tensors"
        tdir.mkdir(exist_ok=True)
        for sid in ws.manifest.sample_ids:
            (tdir / f"{sid}.json").write_text(json.dumps(ws.tensors[sid].tolist()) + "\n")
        ws.manifest.save(out / "manifest.csv")
        _write_json(out / "planted.json", ws.hierarchy.to_dict())
        run = replace(cfg, net=str(out / "net.json"), manifest=str(out / "manifest.csv"), tensors=None)

        stage = "harmonize"
        if cmd_harmonize(run) != EXIT_OK:
            raise CliError(EXIT_INTERNAL, "harmonize reported failures")

        stage = "explain"
        scenes = sorted(ws.full_samples)
        target = scenes[0]
        net, manifest, banks, prov = _explain_inputs(run)
        trees = {scene: [_explain(run, net, manifest, banks, sid, prov) for sid in ws.full_samples[scene]]
                 for scene in scenes[:2]}
        _echo_tree(trees[target][0])

        stage = "explain-class"
        if cmd_explain_class(run, target, ws.full_samples[target]) != EXIT_OK:
            raise CliError(EXIT_INTERNAL, "explain-class failed")

        stage = "distances"
        grouping = out / "grouping.csv"
        lines = ["set_id,instance_id,path"]
        for scene in scenes[:2]:
            for t in trees[scene]:
                lines.append(f"{scene},{t.instance_id},instances/{t.instance_id}/inference/{t.root.concept_id}.json")
        grouping.write_text("\n".join(lines) + "\n")
        cmd_distances(run, str(grouping))
    except CliError as exc:
        raise CliError(exc.code, f"demo stage {stage} failed: {exc}") from exc
    except Exception as exc:
        raise CliError(EXIT_INTERNAL, f"demo stage {stage} failed: {type(exc).__name__}: {exc}") from exc

    summary = demo_summary(ws, trees[target][0], out)
    _write_json(out / "demo_summary.json", summary)
    print()
    for name, check in summary["checks"].items():
        print(f"{'PASS' if check['passed'] else 'FAIL'}  {name}: {check['detail']}")
    return EXIT_OK


def demo_summary(ws, tree: ChainTree, out: Path) -> dict[str, Any]:
    planted = ws.hierarchy.dominant_chain(tree.root.concept_id)
    recovered = max_contribution_path(tree.root)
    class_doc = json.loads((out / "classes" / tree.predicted_class / "class_chain.json").read_text())
    class_concepts = {n["concept_id"] for nodes in class_doc["levels"].values() for n in nodes}
    with (out / "distances.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    d = np.array([[float(v) for v in r[1:]] for r in rows])
    separated = bool(d.shape[0] == 2 and d[0, 1] > 3 * max(d[0, 0], d[1, 1]))
    checks = {
        "planted chain recovered": {
            "passed": recovered == planted,
            "detail": f"planted {' > '.join(planted)}; recovered {' > '.join(recovered)}",
        },
        "class chain contains planted chain": {
            "passed": set(planted) <= class_concepts,
            "detail": f"{len(set(planted) & class_concepts)}/{len(planted)} planted concepts shared",
        },
        "inter-set distance exceeds intra-set": {
            "passed": separated,
            "detail": f"inter {d[0, 1]:.4f}, intra {d[0, 0]:.4f} / {d[1, 1]:.4f}" if d.shape[0] == 2 else "n/a",
        },
    }
    return {"seed": tree.config.get("seed"), "planted_chain": planted, "recovered_path": recovered,
            "checks": checks, "passed": all(c["passed"] for c in checks.values())}


# ---------------------------------------------------------------------------
# argument handling


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with defaults for any flag (flags win)")
    p.add_argument("--net", help="network spec JSON")
    p.add_argument("--manifest", help="concept manifest CSV")
    p.add_argument("--tensors", help="sample tensor directory (default: tensors/ next to the manifest)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--layer", help="restrict harmonize to one layer")
    p.add_argument("--lambda", dest="lam", type=float, help="L1 penalty for the stage being run")
    p.add_argument("--epsilon", type=int, help="sparsity bound of concept decompositions")
    p.add_argument("--sigma", type=float, help="proximity bandwidth")
    p.add_argument("--keep-prob", dest="keep_prob", type=float, help="gate keep probability")
    p.add_argument("--samples", type=int, help="gate samples per perturbation dataset")
    p.add_argument("--rho", type=float, help="ADMM penalty")
    p.add_argument("--share-fraction", dest="share_fraction", type=float, help="class-level sharing threshold")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--jobs", type=int, help="worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainterp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"chainterp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("harmonize", help="fit concept banks for every semantic level"))
    p = sub.add_parser("explain-instance", help="build the explanation tree of one sample")
    _common(p)
    p.add_argument("sample_id")
    p = sub.add_parser("explain-class", help="aggregate instance trees of one class")
    _common(p)
    p.add_argument("class_id")
    p.add_argument("sample_ids", nargs="*")
    p = sub.add_parser("distances", help="inference distance table and 3D-PCA coordinates")
    _common(p)
    p.add_argument("grouping", help="CSV with set_id,instance_id,path rows")
    _common(sub.add_parser("demo", help="generate a synthetic workspace and run every stage"))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = {}
    if args.config:
        cpath = Path(args.config)
        if not cpath.is_file():
            raise CliError(EXIT_MISSING_INPUT, f"config file not found: {cpath}")
        try:
            doc = tomli.loads(cpath.read_text())
        except tomli.TOMLDecodeError as exc:
            raise CliError(EXIT_MISSING_INPUT, f"invalid config {cpath}: {exc}") from exc
        names = {f.name for f in fields(RunConfig)}
        for key, val in doc.items():
            name = _FLAG_TO_FIELD.get(key, key.replace("-", "_"))
            if name not in names:
                raise CliError(EXIT_INTERNAL, f"unknown config key {key!r}")
            values[name] = val
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            values[f.name] = val
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise CliError(EXIT_INTERNAL, f"bad configuration: {exc}") from exc


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "harmonize":
            return cmd_harmonize(cfg)
        if args.command == "explain-instance":
            return cmd_explain_instance(cfg, args.sample_id)
        if args.command == "explain-class":
            return cmd_explain_class(cfg, args.class_id, args.sample_ids)
        if args.command == "distances":
            return cmd_distances(cfg, args.grouping)
        if args.command == "demo":
            return cmd_demo(cfg)
    except CliError as exc:
        print(f"chainterp: error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"chainterp: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Minimal feed-forward CNN inference with named layers and channel gates.

Networks are plain sequences of ``conv``, ``relu``, ``maxpool``, ``gap`` and
``dense`` layers evaluated in float64. Every layer output is recorded under the
layer's name, so any layer can serve as the shallow or deep side of a
perturbation experiment.

Gates are applied to the *declared output* of the gated layer. When a level is
mapped to a conv layer that is followed by a relu, the gate sits before the
nonlinearity; map the level to the relu layer to gate after it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

LEVELS = ("scene", "object", "part", "material", "color")
LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "dense")


class NetworkSpecError(ValueError):
    """Raised when a network description is malformed or inconsistent."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    level_map: Mapping[str, str]
    class_names: tuple[str, ...] = ()
    # filled by validate_network(); output shape of every layer
    shapes: Mapping[str, tuple[int, ...]] = field(default_factory=dict, compare=False)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(f"unknown layer {name!r}")

    def layer_index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise KeyError(f"unknown layer {name!r}")

    def num_units(self, name: str) -> int:
        return self.shapes[name][0]

    def layer_for_level(self, level: str) -> str:
        try:
            return self.level_map[level]
        except KeyError:
            raise KeyError(f"level {level!r} is not mapped to a layer") from None


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _infer_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    p = layer.params
    if layer.kind == "conv":
        if len(shape) != 3:
            raise NetworkSpecError(f"{layer.name}: conv needs a (C, H, W) input, got {shape}")
        w = layer.weights
        if w is None or w.ndim != 4:
            raise NetworkSpecError(f"{layer.name}: conv weight must have rank 4 (out, in, ky, kx)")
        out_ch, in_ch, kh, kw = w.shape
        if in_ch != shape[0]:
            raise NetworkSpecError(
                f"{layer.name}: weight expects {in_ch} input channels, previous layer has {shape[0]}"
            )
        if "in_channels" in p and int(p["in_channels"]) != in_ch:
            raise NetworkSpecError(f"{layer.name}: declared in_channels disagrees with weight")
        if "out_channels" in p and int(p["out_channels"]) != out_ch:
            raise NetworkSpecError(f"{layer.name}: declared out_channels disagrees with weight")
        if layer.bias is not None and layer.bias.shape != (out_ch,):
            raise NetworkSpecError(f"{layer.name}: bias length must equal out_channels")
        stride, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
        h, wd = _conv_out(shape[1], kh, stride, pad), _conv_out(shape[2], kw, stride, pad)
        if h < 1 or wd < 1:
            raise NetworkSpecError(f"{layer.name}: kernel larger than padded input")
        return (out_ch, h, wd)
    if layer.kind == "relu":
        return shape
    if layer.kind == "maxpool":
        if len(shape) != 3:
            raise NetworkSpecError(f"{layer.name}: maxpool needs a spatial input")
        k = int(p.get("kernel", 2))
        stride = int(p.get("stride", k))
        h, wd = _conv_out(shape[1], k, stride, 0), _conv_out(shape[2], k, stride, 0)
        if h < 1 or wd < 1:
            raise NetworkSpecError(f"{layer.name}: pooling window larger than input")
        return (shape[0], h, wd)
    if layer.kind == "gap":
        if len(shape) != 3:
            raise NetworkSpecError(f"{layer.name}: gap needs a spatial input")
        return (shape[0],)
    if layer.kind == "dense":
        if len(shape) != 1:
            raise NetworkSpecError(f"{layer.name}: dense needs a flat input, got {shape}")
        w = layer.weights
        if w is None or w.ndim != 2:
            raise NetworkSpecError(f"{layer.name}: dense weight must have rank 2 (out, in)")
        if w.shape[1] != shape[0]:
            raise NetworkSpecError(
                f"{layer.name}: weight expects {w.shape[1]} inputs, previous layer has {shape[0]}"
            )
        if layer.bias is not None and layer.bias.shape != (w.shape[0],):
            raise NetworkSpecError(f"{layer.name}: bias length must equal out features")
        return (w.shape[0],)
    raise NetworkSpecError(f"{layer.name}: unknown layer kind {layer.kind!r}")


def validate_network(
    layers: Sequence[LayerSpec],
    input_shape: Sequence[int],
    level_map: Mapping[str, str],
    class_names: Sequence[str] = (),
) -> NetworkSpec:
    """Check every invariant and return an immutable :class:`NetworkSpec`."""
    if len(input_shape) != 3 or any(int(s) < 1 for s in input_shape):
        raise NetworkSpecError(f"input_shape must be three positive ints, got {list(input_shape)}")
    names = [layer.name for layer in layers]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise NetworkSpecError(f"duplicate layer names: {dupes}")
    if not layers:
        raise NetworkSpecError("network has no layers")

    shape: tuple[int, ...] = tuple(int(s) for s in input_shape)
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in layers:
        if layer.kind not in LAYER_KINDS:
            raise NetworkSpecError(f"{layer.name}: unknown layer kind {layer.kind!r}")
        shape = _infer_shape(layer, shape)
        shapes[layer.name] = shape

    for level, lname in level_map.items():
        if level not in LEVELS:
            raise NetworkSpecError(f"unknown semantic level {level!r}")
        if lname not in shapes:
            raise NetworkSpecError(f"level {level!r} maps to missing layer {lname!r}")
    # deeper levels must sit at deeper layers
    mapped = [lvl for lvl in LEVELS if lvl in level_map]
    depth = [names.index(level_map[lvl]) for lvl in mapped]
    if any(a <= b for a, b in zip(depth, depth[1:])):
        raise NetworkSpecError("level_map must order levels deep to shallow (scene deepest)")
    if class_names and len(class_names) != shape[0]:
        raise NetworkSpecError("class_names length must match the output width")

    return NetworkSpec(
        layers=tuple(layers),
        input_shape=tuple(int(s) for s in input_shape),  # type: ignore[arg-type]
        level_map=dict(level_map),
        class_names=tuple(class_names),
        shapes=shapes,
    )


def network_from_dict(doc: Mapping[str, Any]) -> NetworkSpec:
    try:
        layers = []
        for entry in doc["layers"]:
            params = dict(entry.get("params", {}))
            bias = params.pop("bias", None)
            weights = entry.get("weights")
            layers.append(
                LayerSpec(
                    name=str(entry["name"]),
                    kind=str(entry["kind"]),
                    params=params,
                    weights=None if weights is None else np.asarray(weights, dtype=np.float64),
                    bias=None if bias is None else np.asarray(bias, dtype=np.float64),
                )
            )
        return validate_network(
            layers, doc["input_shape"], doc.get("level_map", {}), doc.get("class_names", ())
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkSpecError):
            raise
        raise NetworkSpecError(f"malformed network document: {exc}") from exc


def network_to_dict(net: NetworkSpec) -> dict[str, Any]:
    layers = []
    for layer in net.layers:
        params = dict(layer.params)
        if layer.bias is not None:
            params["bias"] = layer.bias.tolist()
        entry: dict[str, Any] = {"name": layer.name, "kind": layer.kind, "params": params}
        if layer.weights is not None:
            entry["weights"] = layer.weights.tolist()
        layers.append(entry)
    doc: dict[str, Any] = {
        "input_shape": list(net.input_shape),
        "level_map": dict(net.level_map),
        "layers": layers,
    }
    if net.class_names:
        doc["class_names"] = list(net.class_names)
    return doc


def load_network(path: str | Path) -> NetworkSpec:
    """Parse and validate a JSON network-spec file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkSpecError(f"{path}: not valid JSON ({exc})") from exc
    return network_from_dict(doc)


def save_network(net: NetworkSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


# ---------------------------------------------------------------------------
# layer kernels


def _conv2d(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    w = layer.weights
    assert w is not None
    stride = int(layer.params.get("stride", 1))
    pad = int(layer.params.get("padding", 0))
    _, kh, kw = w.shape[1:]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h = (x.shape[1] - kh) // stride + 1
    wd = (x.shape[2] - kw) // stride + 1
    out = np.zeros((w.shape[0], h, wd))
    for ky in range(kh):
        for kx in range(kw):
            patch = x[:, ky : ky + stride * h : stride, kx : kx + stride * wd : stride]
            out += np.einsum("oc,chw->ohw", w[:, :, ky, kx], patch)
    if layer.bias is not None:
        out += layer.bias[:, None, None]
    return out


def _maxpool(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    k = int(layer.params.get("kernel", 2))
    stride = int(layer.params.get("stride", k))
    h = (x.shape[1] - k) // stride + 1
    wd = (x.shape[2] - k) // stride + 1
    out = np.full((x.shape[0], h, wd), -np.inf)
    for ky in range(k):
        for kx in range(k):
            np.maximum(out, x[:, ky : ky + stride * h : stride, kx : kx + stride * wd : stride], out=out)
    return out


def _apply(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "conv":
        return _conv2d(x, layer)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        return _maxpool(x, layer)
    if kind == "gap":
        return gap(x)
    if kind == "dense":
        assert layer.weights is not None
        out = layer.weights @ x
        if layer.bias is not None:
            out = out + layer.bias
        return out
    raise NetworkSpecError(f"unknown layer kind {kind!r}")


def gap(act: np.ndarray) -> np.ndarray:
    """Global average pooling: mean over the spatial axes of a (I, U, V) tensor.

    A flat (I,) activation is returned unchanged, which lets dense layers act
    as 1x1 "spatial" maps for the scene level.
    """
    act = np.asarray(act, dtype=np.float64)
    if act.ndim == 1:
        return act.copy()
    if act.ndim != 3:
        raise ValueError(f"gap expects a (I, U, V) or (I,) tensor, got shape {act.shape}")
    return act.mean(axis=(1, 2))


def _check_input(net: NetworkSpec, x: Any) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(net.input_shape):
        raise ValueError(f"input shape {x.shape} does not match network input {tuple(net.input_shape)}")
    return x


def _run(net: NetworkSpec, x: np.ndarray, start: int, acts: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for layer in net.layers[start:]:
        x = _apply(layer, x)
        acts[layer.name] = x
    return acts


def forward(net: NetworkSpec, x: Any) -> dict[str, np.ndarray]:
    """Run the network and return every named layer's activation."""
    x = _check_input(net, x)
    return _run(net, x, 0, {})


def forward_with_gates(
    net: NetworkSpec,
    x: Any,
    gate_layer: str,
    gates: Any,
    base: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Forward pass with the output channels of ``gate_layer`` multiplied by ``gates``.

    ``base`` may hold the activations of an ungated pass on the same input;
    layers up to and including ``gate_layer`` are then reused instead of
    recomputed. The result is identical either way.
    """
    idx = net.layer_index(gate_layer)
    e = np.asarray(gates, dtype=np.float64)
    n_units = net.shapes[gate_layer][0]
    if e.shape != (n_units,):
        raise ValueError(f"gate vector has length {e.size}, layer {gate_layer!r} has {n_units} units")
    if not np.all((e == 0.0) | (e == 1.0)):
        raise ValueError("gate entries must be 0 or 1")

    if base is None:
        acts = _run_prefix(net, _check_input(net, x), idx)
    else:
        acts = {layer.name: base[layer.name] for layer in net.layers[: idx + 1]}

    shallow = acts[gate_layer]
    gated = shallow * (e if shallow.ndim == 1 else e[:, None, None])
    acts[gate_layer] = gated
    return _run(net, gated, idx + 1, acts)


def _run_prefix(net: NetworkSpec, x: np.ndarray, last: int) -> dict[str, np.ndarray]:
    acts: dict[str, np.ndarray] = {}
    for layer in net.layers[: last + 1]:
        x = _apply(layer, x)
        acts[layer.name] = x
    return acts

"""Dense MLPs: numpy forward pass, graph embedding and the JSON weight format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import GraphBuilder, Ref

ACTIVATIONS = ("relu", "tanh", "id")


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "id"

    def __post_init__(self):
        object.__setattr__(self, "w", np.atleast_2d(np.asarray(self.w, dtype=float)))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).ravel())
        if self.act == "identity":
            object.__setattr__(self, "act", "id")
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")


@dataclass(frozen=True)
class Mlp:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.b.shape != (layer.w.shape[0],):
                raise ValueError(f"layer {i}: bias length {layer.b.size} != rows {layer.w.shape[0]}")
            if i and layer.w.shape[1] != self.layers[i - 1].w.shape[0]:
                raise ValueError(
                    f"layer {i}: input width {layer.w.shape[1]} != previous output "
                    f"{self.layers[i - 1].w.shape[0]}"
                )
            if not (np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b))):
                raise ValueError(f"layer {i}: non-finite weights")

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def shapes(self) -> list[tuple[int, int, str]]:
        return [(l.w.shape[0], l.w.shape[1], l.act) for l in self.layers]

    @property
    def n_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    @classmethod
    def init(cls, sizes, act="tanh", rng=None, out_act="id", scale=1.0) -> Mlp:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = scale * math.sqrt(6.0 / (fan_in + fan_out))
            a = out_act if i == len(sizes) - 2 else act
            layers.append(Layer(rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out), a))
        return cls(tuple(layers))

    def __call__(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for layer in self.layers:
            h = h @ layer.w.T + layer.b
            if layer.act == "relu":
                h = np.maximum(h, 0.0)
            elif layer.act == "tanh":
                h = np.tanh(h)
        return h

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.w.ravel(), l.b]) for l in self.layers])

    def with_flat(self, theta) -> Mlp:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        layers, off = [], 0
        for l in self.layers:
            w = theta[off : off + l.w.size].reshape(l.w.shape)
            off += l.w.size
            b = theta[off : off + l.b.size]
            off += l.b.size
            layers.append(Layer(w.copy(), b.copy(), l.act))
        return Mlp(tuple(layers))

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [
                {"w": l.w.tolist(), "b": l.b.tolist(), "act": l.act} for l in self.layers
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> Mlp:
        if not isinstance(obj, dict) or "layers" not in obj or "input_dim" not in obj:
            raise WeightFileError("weight file must hold 'input_dim' and 'layers'")
        prev = obj["input_dim"]
        if not isinstance(prev, int) or prev < 1:
            raise WeightFileError("input_dim must be a positive integer")
        layers = []
        for i, spec in enumerate(obj["layers"]):
            try:
                w = np.asarray(spec["w"], dtype=float)
                b = np.asarray(spec["b"], dtype=float)
                act = spec.get("act", "id")
            except (KeyError, TypeError, ValueError) as exc:
                raise WeightFileError(f"layer {i}: malformed entry ({exc})") from None
            if w.ndim != 2:
                raise WeightFileError(f"layer {i}: weight matrix must be 2-D")
            if w.shape[1] != prev:
                raise WeightFileError(
                    f"layer {i}: weight has {w.shape[1]} columns, expected {prev}"
                )
            if b.shape != (w.shape[0],):
                raise WeightFileError(f"layer {i}: bias length {b.size} != rows {w.shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise WeightFileError(f"layer {i}: non-finite entry")
            if act not in ACTIVATIONS:
                raise WeightFileError(f"layer {i}: unknown activation {act!r}")
            layers.append(Layer(w, b, act))
            prev = w.shape[0]
        if not layers:
            raise WeightFileError("no layers")
        return cls(tuple(layers))


def _reject_constant(name):
    raise WeightFileError(f"non-finite literal {name} in weight file")


def dumps_json(obj) -> str:
    # repr-based float formatting round-trips every double exactly
    return json.dumps(obj, indent=1, allow_nan=False)


def loads_json(text: str):
    return json.loads(text, parse_constant=_reject_constant)


def save_weights(net: Mlp, path) -> None:
    from ..io import atomic_write_text

    atomic_write_text(path, dumps_json(net.to_json()))


def load_weights(path) -> Mlp:
    text = Path(path).read_text()
    try:
        obj = loads_json(text)
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"{path}: invalid JSON ({exc})") from None
    try:
        return Mlp.from_json(obj)
    except WeightFileError as exc:
        raise WeightFileError(f"{path}: {exc}") from None


def add_mlp(b: GraphBuilder, x: Ref, net: Mlp, prefix: str | None = None) -> Ref:
    """Append ``net(x)`` to a graph.

    With ``prefix`` the weights become named parameters ``{prefix}.{i}.w`` /
    ``{prefix}.{i}.b`` (in :meth:`Mlp.flat` order); otherwise they are
    embedded as constants.
    """
    if x.size != net.input_dim:
        raise ValueError(f"MLP expects {net.input_dim} inputs, got {x.size}")
    h = x
    for i, layer in enumerate(net.layers):
        rows = layer.w.shape[0]
        if prefix is None:
            w = b.const(layer.w.ravel())
            bias = b.const(layer.b)
        else:
            w = b.param(f"{prefix}.{i}.w", layer.w.shape)
            bias = b.param(f"{prefix}.{i}.b", layer.b.shape)
        h = b.add(b.matvec(w, h, rows), bias)
        h = b.act(h, layer.act)
    return h

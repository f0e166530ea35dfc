"""GNN model presets and the quantized forward pass that feeds the simulator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .graph import Graph, degree_profile, renormalize, sample_neighbors
from .quant import (
    KB_BITS,
    OptimizeResult,
    QuantizedFeatures,
    QuantizedWeights,
    integer_matmul,
    optimize_params,
    quantize_features,
    quantize_weights,
)
from .sim.config import LayerSpec
from .sim.engine import LayerInput


@dataclass(frozen=True)
class ModelPreset:
    name: str
    num_layers: int
    hidden: int
    aggregation: str
    sample: Optional[int] = None
    normalization: str = "gcn_sym"


MODEL_PRESETS = {
    "gcn": ModelPreset("gcn", 2, 128, "add", None, "gcn_sym"),
    "gin": ModelPreset("gin", 2, 128, "add", None, "add"),
    "graphsage": ModelPreset("graphsage", 2, 256, "mean", 25, "mean"),
}


def get_model_preset(name: str) -> ModelPreset:
    try:
        return MODEL_PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(MODEL_PRESETS)}") from None


def layer_specs(preset: ModelPreset, in_dim: int, out_dim: Optional[int] = None) -> tuple:
    dims = [in_dim] + [preset.hidden] * (preset.num_layers - 1) + [out_dim or preset.hidden]
    return tuple(LayerSpec(dims[i], dims[i + 1], preset.aggregation) for i in range(preset.num_layers))


def init_weights(specs, seed: int = 0) -> list:
    """Glorot-uniform weights, one matrix per layer."""
    rng = np.random.default_rng(seed)
    out = []
    for s in specs:
        lim = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        out.append(rng.uniform(-lim, lim, size=(s.in_dim, s.out_dim)))
    return out


def prepare_graph(g: Graph, preset: ModelPreset, seed: int = 0) -> Graph:
    if preset.sample is not None:
        return sample_neighbors(g, cap=preset.sample, seed=seed, normalization=preset.normalization)
    if g.normalization != preset.normalization:
        return renormalize(g, preset.normalization)
    return g


@dataclass(frozen=True)
class QuantSettings:
    """Per-layer memory target as an average bitwidth, plus the penalty weight."""

    target_bits: float = 2.5
    lam: float = 1e3
    seed: int = 0

    def m_target_kb(self, n: int, dim: int) -> float:
        return n * dim * self.target_bits / KB_BITS


@dataclass(frozen=True, eq=False)
class ForwardResult:
    inputs: list          # LayerInput per layer
    outputs: np.ndarray   # final layer output
    fits: list            # OptimizeResult per layer (empty in fp32 mode)

    def average_bits(self) -> float:
        """Feature-bit-weighted mean bitwidth over every quantized layer input."""
        num = den = 0.0
        for li in self.inputs:
            if li.quantized is not None:
                num += float(np.sum(li.quantized.node_bitwidth)) * li.spec.in_dim
                den += li.quantized.num_nodes * li.spec.in_dim
        return num / den if den else 32.0


def _aggregate(g: Graph, B: np.ndarray) -> np.ndarray:
    return np.asarray(g.adjacency() @ B)


def forward(g: Graph, specs, weights, quant: Optional[QuantSettings] = None) -> ForwardResult:
    """Run the layers; with ``quant`` every input is degree-aware quantized.

    The combined rows are requantized column-wise to 4 bits before
    aggregation. Hidden layers apply ReLU.
    """
    if len(specs) != len(weights):
        raise ConfigError("one weight matrix per layer is required")
    X = np.asarray(g.features, dtype=np.float64)
    inputs, fits = [], []
    prof = degree_profile(g)
    for l, (spec, W) in enumerate(zip(specs, weights)):
        if W.shape != (spec.in_dim, spec.out_dim) or X.shape[1] != spec.in_dim:
            raise ConfigError(f"layer {l}: shape mismatch")
        if quant is None:
            inputs.append(LayerInput(spec, X))
            B = X @ W
        else:
            Wq = quantize_weights(W)
            gl = g.with_features(X)
            res: OptimizeResult = optimize_params(
                gl, Wq, quant.m_target_kb(g.num_nodes, spec.in_dim), quant.lam, quant.seed
            )
            fits.append(res)
            q: QuantizedFeatures = quantize_features(X, prof, res.params)
            inputs.append(LayerInput(spec, X, q))
            B = integer_matmul(q, Wq)
            B = requantize(B).dequantize()
        H = _aggregate(g, B)
        if l + 1 < len(specs):
            H = np.maximum(H, 0.0)
        X = H
    return ForwardResult(inputs, X, fits)


def requantize(B: np.ndarray) -> QuantizedWeights:
    """Combined rows quantized the way the weights are: per column, 4 bits."""
    return quantize_weights(B)


def fp32_inputs(g: Graph, specs, weights) -> list:
    return forward(g, specs, weights, None).inputs


__all__ = [
    "ModelPreset", "MODEL_PRESETS", "get_model_preset", "layer_specs", "init_weights",
    "prepare_graph", "QuantSettings", "ForwardResult", "forward", "requantize",
    "fp32_inputs",
]

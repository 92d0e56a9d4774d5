# gat_stream.py
"""
Multi-head graph attention over vertex feature rows.

Per head k: z = X W_k, e_ij = LeakyReLU((z_i || z_j) . a_k) on the neighbourhood
of i, alpha = row softmax of e, h_i = sum_j alpha_ij z_j. Heads are either
ELU-activated and concatenated, or averaged and passed through a sigmoid.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .diagnostics import require_valid
from .errors import ShapeError
from .graph_builder import (
    Graph,
    GraphConfig,
    build_graph,
    gather_features,
    gather_features_backward,
)
from .tensor_core import (
    ActivationConfig,
    LayerParams,
    ParamStore,
    Tensor,
    activation,
    activation_backward,
    canonical_sum,
    masked_row_softmax,
    masked_row_softmax_backward,
    row_matmul,
)

MODES = ("concat", "average_sigmoid")


@dataclass
class GatConfig:
    heads: int = 4
    out_features: int = 4  # per head; 16 at full scale
    mode: str = "concat"

    def problems(self) -> List[str]:
        errors = []
        if self.heads < 1:
            errors.append(f"heads must be >= 1, got {self.heads}")
        if self.out_features < 1:
            errors.append(f"out_features must be >= 1, got {self.out_features}")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}, got '{self.mode}'")
        return errors

    @property
    def output_width(self) -> int:
        return self.heads * self.out_features if self.mode == "concat" else self.out_features


@dataclass
class GatLayerParams:
    """Stacked per-head projections W [K, n, n'] and attention vectors a [K, 2n']."""

    projection: LayerParams
    attention: LayerParams
    mode: str = "concat"

    @property
    def heads(self) -> int:
        return self.projection.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.projection.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.projection.weights.shape[2]

    @property
    def output_width(self) -> int:
        return self.heads * self.out_features if self.mode == "concat" else self.out_features


def gat_layer_params(name, in_features, cfg: GatConfig, rng, dtype=np.float64, store: ParamStore = None) -> GatLayerParams:
    require_valid("GatConfig DIAGNOSTICS:", cfg.problems())
    std = np.sqrt(2.0 / in_features)
    projection = LayerParams(
        name=f"{name}.W",
        kind="gat_weights",
        weights=Tensor(rng.normal(0.0, std, size=(cfg.heads, in_features, cfg.out_features)), dtype),
    )
    attention = LayerParams(
        name=f"{name}.a",
        kind="gat_attention",
        weights=Tensor(rng.uniform(-0.1, 0.1, size=(cfg.heads, 2 * cfg.out_features)), dtype),
    )
    if store is not None:
        store.add(projection)
        store.add(attention)
    return GatLayerParams(projection=projection, attention=attention, mode=cfg.mode)


def _validate_adjacency(adjacency: np.ndarray, v: int) -> np.ndarray:
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape != (v, v):
        raise ShapeError(f"gat_layer: adjacency shape {adjacency.shape} does not match {v} vertices")
    missing = np.flatnonzero(~np.diagonal(adjacency))
    if missing.size:
        raise ShapeError(f"gat_layer: vertex {int(missing[0])} has no self-loop")
    return adjacency


def gat_layer(features: np.ndarray, adjacency: np.ndarray, params: GatLayerParams, cfg: ActivationConfig = None):
    """Forward pass; returns (output [V, K*n' or n'], cache)."""
    cfg = cfg or ActivationConfig()
    if features.ndim != 2 or features.shape[1] != params.in_features:
        raise ShapeError(
            f"gat_layer: features shape {features.shape} does not match projection shape {params.projection.weights.shape}"
        )
    v = features.shape[0]
    adjacency = _validate_adjacency(adjacency, v)
    W = params.projection.weights.data
    a = params.attention.weights.data
    n_out = params.out_features

    heads = []
    for k in range(params.heads):
        z = row_matmul(features, W[k])
        e_raw = row_matmul(z, a[k, :n_out, None]) + row_matmul(z, a[k, n_out:, None]).T
        e, c_leaky = activation(e_raw, "leaky_relu", cfg)
        alpha, c_soft = masked_row_softmax(e, adjacency)
        # neighbourhood sums in sorted order keep vertex relabelling exact
        h = canonical_sum(alpha[:, :, None] * z[None, :, :], axis=1)
        heads.append((z, c_leaky, c_soft, alpha, h))

    if params.mode == "concat":
        outs, c_out = [], []
        for _, _, _, _, h in heads:
            o, c = activation(h, "elu", cfg)
            outs.append(o)
            c_out.append(c)
        out = np.concatenate(outs, axis=1)
    else:
        mean = sum(h for *_, h in heads) / params.heads
        out, c_out = activation(mean, "sigmoid", cfg)
    return out, (features, adjacency, params, heads, c_out)


def gat_layer_backward(dout: np.ndarray, cache) -> np.ndarray:
    features, adjacency, params, heads, c_out = cache
    W = params.projection.weights.data
    a = params.attention.weights.data
    n_out = params.out_features
    K = params.heads

    if params.mode == "concat":
        dhs = [activation_backward(dout[:, k * n_out:(k + 1) * n_out], c_out[k]) for k in range(K)]
    else:
        dmean = activation_backward(dout, c_out) / K
        dhs = [dmean] * K

    dx = np.zeros_like(features)
    for k, (z, c_leaky, c_soft, alpha, _) in enumerate(heads):
        dh = dhs[k]
        dalpha = dh @ z.T
        dz = alpha.T @ dh
        de = masked_row_softmax_backward(dalpha, c_soft)
        de_raw = activation_backward(de, c_leaky)
        ds_src = de_raw.sum(axis=1)
        ds_dst = de_raw.sum(axis=0)
        params.attention.weights.grad[k, :n_out] += z.T @ ds_src
        params.attention.weights.grad[k, n_out:] += z.T @ ds_dst
        dz += np.outer(ds_src, a[k, :n_out]) + np.outer(ds_dst, a[k, n_out:])
        params.projection.weights.grad[k] += features.T @ dz
        dx += dz @ W[k].T
    return dx


class GraphAttentionModule:
    """Sample -> adjacency -> gather rows from the CNN feature map -> one GAT layer (concat)."""

    def __init__(self, in_features: int, gat_cfg: GatConfig, graph_cfg: GraphConfig,
                 act_cfg: ActivationConfig = None, rng=None, store: ParamStore = None, dtype=np.float64):
        self.store = store if store is not None else ParamStore(dtype)
        self.graph_cfg = graph_cfg
        self.act_cfg = act_cfg or ActivationConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layer = gat_layer_params("gat", in_features, gat_cfg, rng, self.store.dtype, self.store)
        self._cache = None

    @property
    def output_width(self) -> int:
        return self.layer.output_width

    def forward(self, cnn_features: np.ndarray, prob: np.ndarray = None, graph: Graph = None) -> Tuple[Graph, np.ndarray]:
        if graph is None:
            graph = build_graph(prob, self.graph_cfg)
        if prob is not None and prob.shape != cnn_features.shape[2:]:
            raise ShapeError(f"probability map shape {prob.shape} does not match features shape {cnn_features.shape}")
        rows = gather_features(cnn_features, graph.vertices)
        graph.features = rows
        refined, c_gat = gat_layer(rows, graph.adjacency, self.layer, self.act_cfg)
        self._cache = (graph, cnn_features.shape, c_gat)
        return graph, refined

    def backward(self, drefined: np.ndarray) -> np.ndarray:
        graph, shape, c_gat = self._cache
        drows = gat_layer_backward(drefined, c_gat)
        return gather_features_backward(drows, graph.vertices, shape)

    def kink_signature(self) -> bytes:
        _, _, c_gat = self._cache
        return b"".join(np.packbits(c_leaky[1] > 0).tobytes() for _, c_leaky, *_ in c_gat[3])


def gnn_module_forward(cnn_features: np.ndarray, prob: np.ndarray, cfg: GraphConfig, params: GatLayerParams,
                       act_cfg: ActivationConfig = None) -> Tuple[Graph, np.ndarray]:
    graph = build_graph(prob, cfg)
    rows = gather_features(cnn_features, graph.vertices)
    refined, _ = gat_layer(rows, graph.adjacency, params, act_cfg)
    graph.features = rows
    return graph, refined

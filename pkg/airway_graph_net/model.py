# model.py
"""
Whole-network wiring: the CNN stream alone, or CNN -> graph attention ->
inference fusion sharing one ParamStore, plus rebuilding either from a
checkpoint's config entries.
"""
import math
from dataclasses import dataclass, replace
from typing import Dict, Optional, Union

import numpy as np

from . import diagnostics
from .checkpoint import load_checkpoint, read_metadata, restore_store, save_checkpoint
from .cnn_stream import CnnOutput, CnnStream
from .config import AgnSettings, TrainConfig
from .errors import ConfigError, FormatError
from .gat_stream import GatConfig, GraphAttentionModule, gat_layer, gat_layer_backward, gat_layer_params
from .graph_builder import SOLVERS, Graph, build_graph, gather_features, gather_features_backward
from .inference_stream import InferenceStream
from .tensor_core import ParamStore

MODEL_KINDS = ("cnn", "joint")

# TrainConfig keys persisted as config.<key> entries
_ARCH_KEYS = (
    "base_channels", "gat_heads", "gat_out_features", "delta", "connectivity", "fmm_eps",
    "dropout_p", "leaky_slope", "elu_alpha", "gnn_aux_weight", "window", "level", "threshold", "seed",
    "train_fraction",
)


@dataclass
class JointOutput:
    prob: np.ndarray
    cnn: CnnOutput
    graph: Graph
    vertex_prob: Optional[np.ndarray] = None


class AgnModel:
    def __init__(self, settings: AgnSettings, kind: str = "joint", dtype=np.float32):
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got '{kind}'")
        self.settings = settings
        self.kind = kind
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(settings.train.seed)
        self.cnn = CnnStream(settings.cnn, rng, store=self.store)
        self.gnn = None
        self.decoder = None
        self.vertex_head = None
        self._vertex = None
        if kind == "joint":
            self._build_joint(rng)

    def _build_joint(self, rng):
        s = self.settings
        if s.inference.delta != s.graph.delta:
            raise ConfigError(f"inference delta {s.inference.delta} must equal graph delta {s.graph.delta}")
        if s.inference.stage_channels != s.cnn.side_channels:
            raise ConfigError(
                f"decoder stage channels {s.inference.stage_channels} must equal CNN side channels {s.cnn.side_channels}"
            )
        self.gnn = GraphAttentionModule(s.cnn.feature_channels, s.gat, s.graph, s.activation, rng, self.store)
        self.decoder = InferenceStream(self.gnn.output_width, s.inference, rng, self.store)
        if s.train.gnn_aux_weight > 0:
            head_cfg = GatConfig(heads=s.gat.heads, out_features=1, mode="average_sigmoid")
            self.vertex_head = gat_layer_params("gat_vertex", s.cnn.feature_channels, head_cfg, rng,
                                                self.store.dtype, self.store)

    # -------------------------
    # forward / backward
    # -------------------------

    def forward_joint(self, x: np.ndarray, graph: Graph = None, training: bool = False,
                      rng: np.random.Generator = None) -> JointOutput:
        """A missing graph is built from this pass's CNN probability map."""
        if self.kind != "joint":
            raise ConfigError("forward_joint needs a joint model")
        out = self.cnn.forward(x, training)
        if graph is None:
            graph = build_graph(out.prob, self.settings.graph)
        graph, refined = self.gnn.forward(out.features, graph=graph)
        prob = self.decoder.forward(refined, graph, out.sides[::-1], training, rng)

        vertex_prob = None
        self._vertex = None
        if self.vertex_head is not None:
            rows = gather_features(out.features, graph.vertices)
            head_out, cache = gat_layer(rows, graph.adjacency, self.vertex_head, self.settings.activation)
            vertex_prob = head_out[:, 0]
            self._vertex = (graph, out.features.shape, cache)
        return JointOutput(prob=prob, cnn=out, graph=graph, vertex_prob=vertex_prob)

    def backward_joint(self, dprob: np.ndarray, dcnn_prob: np.ndarray = None, dvertex: np.ndarray = None) -> np.ndarray:
        drefined, dsides = self.decoder.backward(dprob)
        dfeatures = self.gnn.backward(drefined)
        if dvertex is not None and self._vertex is not None:
            graph, shape, cache = self._vertex
            drows = gat_layer_backward(np.asarray(dvertex)[:, None], cache)
            dfeatures = dfeatures + gather_features_backward(drows, graph.vertices, shape)
        # decoder consumes sides coarse to fine; the CNN indexes them fine to coarse
        return self.cnn.backward(dprob=dcnn_prob, dfeatures=dfeatures, dsides=dsides[::-1])

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode probability map of this model's own output head."""
        if self.kind == "joint":
            return self.forward_joint(x, training=False).prob
        return self.cnn.forward(x, training=False).prob

    def kink_signature(self) -> bytes:
        parts = [self.cnn.kink_signature()]
        if self.kind == "joint":
            parts += [self.gnn.kink_signature(), self.decoder.kink_signature()]
            if self._vertex is not None:
                parts += [np.packbits(c_leaky[1] > 0).tobytes() for _, c_leaky, *_ in self._vertex[2][3]]
        return b"".join(parts)

    # -------------------------
    # persistence
    # -------------------------

    def metadata(self) -> Dict[str, Union[int, float]]:
        """Integer-typed config keys stay ints so the checkpoint stores them exactly."""
        cfg = self.settings.train
        meta = {"kind": MODEL_KINDS.index(self.kind)}
        meta["input_h"], meta["input_w"] = (int(v) for v in self.settings.cnn.input_size)
        for key in _ARCH_KEYS:
            value = getattr(cfg, key)
            meta[key] = int(value) if isinstance(getattr(TrainConfig, key), int) else float(value)
        meta["d_threshold"] = math.nan if cfg.d_threshold is None else float(cfg.d_threshold)
        meta["solver"] = SOLVERS.index(cfg.solver)
        return meta

    def save(self, path: str):
        save_checkpoint(self.store, path, self.metadata())

    @classmethod
    def from_checkpoint(cls, path: str, dtype=np.float32) -> "AgnModel":
        entries = load_checkpoint(path)
        meta = read_metadata(entries)
        missing = [k for k in ("kind", "input_h", "input_w", "d_threshold", "solver") + _ARCH_KEYS if k not in meta]
        if missing:
            raise FormatError(f"{path}: checkpoint lacks config entry 'config.{missing[0]}'")
        kind_index, solver_index = int(meta["kind"]), int(meta["solver"])
        if not 0 <= kind_index < len(MODEL_KINDS) or not 0 <= solver_index < len(SOLVERS):
            raise FormatError(f"{path}: config entries name an unknown model kind or solver")

        values = {}
        for key in _ARCH_KEYS:
            default = getattr(TrainConfig, key)
            values[key] = int(meta[key]) if isinstance(default, int) else float(meta[key])
        values["d_threshold"] = None if math.isnan(meta["d_threshold"]) else meta["d_threshold"]
        values["solver"] = SOLVERS[solver_index]
        cfg = replace(TrainConfig(), **values)
        settings = AgnSettings.from_train_config(cfg, (int(meta["input_h"]), int(meta["input_w"])))

        model = cls(settings, MODEL_KINDS[kind_index], dtype)
        restore_store(model.store, entries)
        diagnostics.log(f"model restored from {path}: kind={model.kind}, {len(model.store)} layers")
        return model

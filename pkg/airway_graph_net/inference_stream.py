# inference_stream.py
"""
Fusion decoder: refined vertex rows are put back on the reduced cell grid, then
four (conv -> BN -> ReLU -> nearest upsample -> concat with dropped-out CNN side
features) stages bring the tensor to full resolution, and a final 1x1 conv +
sigmoid gives the joint probability map.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .diagnostics import require_valid
from .errors import ConfigError, ShapeError
from .graph_builder import Graph, scatter_features, scatter_features_backward
from .tensor_core import (
    ParamStore,
    activation,
    activation_backward,
    batchnorm2d,
    batchnorm2d_backward,
    batchnorm_layer,
    conv2d,
    conv2d_backward,
    conv_layer,
    upsample_nearest,
    upsample_nearest_backward,
)

SIDE_SCALE_LOG2 = (3, 2, 1, 0)  # side tensors consumed at 1/8, 1/4, 1/2, 1


@dataclass
class InferenceConfig:
    stage_channels: int = 4
    dropout_p: float = 0.1
    delta: int = 3

    def problems(self) -> List[str]:
        errors = []
        if self.stage_channels < 1:
            errors.append(f"stage_channels must be >= 1, got {self.stage_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            errors.append(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.delta < SIDE_SCALE_LOG2[0]:
            errors.append(f"delta must be >= {SIDE_SCALE_LOG2[0]} so the grid is no finer than the coarsest side scale, got {self.delta}")
        return errors

    @property
    def stage_factors(self) -> List[int]:
        """Upsampling factor per stage; stage s lands on side scale 1/2^SIDE_SCALE_LOG2[s]."""
        factors, current = [], self.delta
        for target in SIDE_SCALE_LOG2:
            factors.append(2 ** (current - target))
            current = target
        return factors


def dropout(x: np.ndarray, p: float, training: bool, rng: np.random.Generator):
    """Inverted dropout; returns (output, mask) where mask already carries the 1/(1-p) scale."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout if mask is None else dout * mask


class InferenceStream:
    def __init__(self, in_features: int, cfg: InferenceConfig, rng=None, store: ParamStore = None, dtype=np.float64):
        require_valid("InferenceConfig DIAGNOSTICS:", cfg.problems())
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(dtype)
        self.dtype = self.store.dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        c_in = in_features
        for s in range(1, len(SIDE_SCALE_LOG2) + 1):
            self.store.add(conv_layer(f"infer.stage{s}.conv", c_in, cfg.stage_channels, 3, rng, self.dtype))
            self.store.add(batchnorm_layer(f"infer.stage{s}.bn", cfg.stage_channels, self.dtype))
            c_in = 2 * cfg.stage_channels
        self.store.add(conv_layer("infer.final", c_in, 1, 1, rng, self.dtype))
        self._tape = None

    @property
    def concat_channels(self) -> int:
        return 2 * self.cfg.stage_channels

    def forward(self, refined: np.ndarray, graph: Graph, cnn_sides: List[np.ndarray], training: bool,
                rng: np.random.Generator = None) -> np.ndarray:
        """cnn_sides are the side outputs ordered coarse to fine (1/8, 1/4, 1/2, 1)."""
        if len(cnn_sides) != len(SIDE_SCALE_LOG2):
            raise ShapeError(f"inference_forward expects {len(SIDE_SCALE_LOG2)} side tensors, got {len(cnn_sides)}")
        if training and self.cfg.dropout_p > 0 and rng is None:
            raise ConfigError("training-mode dropout needs an explicit random generator")
        x = scatter_features(np.asarray(refined, dtype=self.dtype), graph.vertices)
        tape = []
        for s, factor in enumerate(self.cfg.stage_factors, 1):
            x, c_conv = conv2d(x, self.store[f"infer.stage{s}.conv"], 1, 1)
            x, c_bn = batchnorm2d(x, self.store[f"infer.stage{s}.bn"], training)
            x, c_act = activation(x, "relu")
            x, c_up = upsample_nearest(x, factor)
            side = cnn_sides[s - 1]
            if side.shape[0] != x.shape[0] or side.shape[2:] != x.shape[2:]:
                raise ShapeError(
                    f"inference stage {s}: decoder tensor shape {tuple(x.shape)} does not align with side tensor shape {tuple(side.shape)}"
                )
            dropped, mask = dropout(side, self.cfg.dropout_p, training, rng)
            x = np.concatenate([x, dropped], axis=1)
            tape.append((c_conv, c_bn, c_act, c_up, mask, side.shape[1]))
        logits, c_final = conv2d(x, self.store["infer.final"], 1, 0)
        prob, c_sig = activation(logits, "sigmoid")
        self._tape = (tape, c_final, c_sig)
        return prob[0, 0]

    def backward(self, dprob: np.ndarray):
        """Returns (d refined rows, list of d side tensors ordered like the forward input)."""
        tape, c_final, c_sig = self._tape
        dx = activation_backward(np.asarray(dprob, dtype=self.dtype)[None, None], c_sig)
        dx = conv2d_backward(dx, c_final)
        dsides = [None] * len(tape)
        for s in range(len(tape) - 1, -1, -1):
            c_conv, c_bn, c_act, c_up, mask, side_channels = tape[s]
            split = dx.shape[1] - side_channels
            dsides[s] = dropout_backward(dx[:, split:], mask)
            dx = upsample_nearest_backward(np.ascontiguousarray(dx[:, :split]), c_up)
            dx = activation_backward(dx, c_act)
            dx = batchnorm2d_backward(dx, c_bn)
            dx = conv2d_backward(dx, c_conv)
        return scatter_features_backward(dx), dsides

    def kink_signature(self) -> bytes:
        tape, _, _ = self._tape
        return b"".join(np.packbits(c_act[1] > 0).tobytes() for _, _, c_act, *_ in tape)


def inference_forward(refined, graph, cnn_sides, stream: InferenceStream, training: bool, rng=None) -> np.ndarray:
    return stream.forward(refined, graph, cnn_sides, training, rng)

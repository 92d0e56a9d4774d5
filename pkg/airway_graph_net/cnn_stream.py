# cnn_stream.py
"""
DRIU-style contracting network: four conv/BN/ReLU stages (widths base x 1, 2, 4, 8)
with max pooling between them, a reduced-width side convolution after every
stage, learnable upsampling of the side outputs back to full resolution, and a
final 1x1 convolution + sigmoid producing the CNN probability map.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .diagnostics import require_valid
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
    maxpool2d,
    maxpool2d_backward,
    transpose_conv2d,
    transpose_conv2d_backward,
    transpose_conv_layer,
)

POOL_STAGES = 3


@dataclass
class CnnConfig:
    base_channels: int = 16
    stage_convs: Tuple[int, ...] = (2, 2, 3, 3)
    input_size: Tuple[int, int] = (64, 64)

    @property
    def side_channels(self) -> int:
        return self.base_channels // 4

    @property
    def feature_channels(self) -> int:
        return 4 * self.side_channels

    def problems(self) -> List[str]:
        errors = []
        if self.base_channels < 4 or self.base_channels % 4:
            errors.append(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if len(self.stage_convs) != 4 or any(n < 1 for n in self.stage_convs):
            errors.append(f"stage_convs must list 4 positive counts, got {tuple(self.stage_convs)}")
        h, w = self.input_size
        if h < 8 or w < 8 or h % 8 or w % 8:
            errors.append(f"input size {h}x{w} must be divisible by 8 (three 2x2 pooling stages)")
        return errors


@dataclass
class CnnOutput:
    prob: np.ndarray                      # h x w, in (0, 1)
    features: np.ndarray                  # 1 x 4*side x h x w
    sides: List[np.ndarray] = field(default_factory=list)  # native scales 1, 1/2, 1/4, 1/8


class CnnStream:
    def __init__(self, cfg: CnnConfig, rng: np.random.Generator = None, dtype=np.float64, store: ParamStore = None):
        require_valid("CnnConfig DIAGNOSTICS:", cfg.problems())
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(dtype)
        self.dtype = self.store.dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        self._tape = None
        self._build(rng)

    def _build(self, rng):
        cfg, dtype = self.cfg, self.dtype
        c_in = 1
        for s, n_convs in enumerate(cfg.stage_convs, 1):
            width = cfg.base_channels * 2 ** (s - 1)
            for i in range(1, n_convs + 1):
                self.store.add(conv_layer(f"cnn.stage{s}.conv{i}", c_in, width, 3, rng, dtype))
                self.store.add(batchnorm_layer(f"cnn.stage{s}.bn{i}", width, dtype))
                c_in = width
            self.store.add(conv_layer(f"cnn.side{s}", width, cfg.side_channels, 3, rng, dtype))
            self.store.add(transpose_conv_layer(f"cnn.side{s}.up", cfg.side_channels, 2 ** (s - 1), dtype))
        self.store.add(conv_layer("cnn.final", cfg.feature_channels, 1, 1, rng, dtype))

    @property
    def conv_count(self) -> int:
        return sum(1 for layer in self.store.layers("conv") if layer.name.startswith("cnn."))

    def forward(self, x: np.ndarray, training: bool, with_prob: bool = True) -> CnnOutput:
        x = np.asarray(x, dtype=self.dtype)
        tape = {"stages": [], "sides": [], "ups": [], "pools": []}
        h = x
        sides, ups = [], []
        for s, n_convs in enumerate(self.cfg.stage_convs, 1):
            blocks = []
            for i in range(1, n_convs + 1):
                h, c_conv = conv2d(h, self.store[f"cnn.stage{s}.conv{i}"], 1, 1)
                h, c_bn = batchnorm2d(h, self.store[f"cnn.stage{s}.bn{i}"], training)
                h, c_act = activation(h, "relu")
                blocks.append((c_conv, c_bn, c_act))
            tape["stages"].append(blocks)

            side, c_side = conv2d(h, self.store[f"cnn.side{s}"], 1, 1)
            up, c_up = transpose_conv2d(side, self.store[f"cnn.side{s}.up"], 2 ** (s - 1))
            tape["sides"].append(c_side)
            tape["ups"].append(c_up)
            sides.append(side)
            ups.append(up)

            if s <= POOL_STAGES:
                h, c_pool = maxpool2d(h, 2)
                tape["pools"].append(c_pool)

        features = np.concatenate(ups, axis=1)
        prob = None
        if with_prob:
            logits, tape["final"] = conv2d(features, self.store["cnn.final"], 1, 0)
            prob, tape["sigmoid"] = activation(logits, "sigmoid")
            prob = prob[0, 0]
        self._tape = tape
        return CnnOutput(prob=prob, features=features, sides=sides)

    def backward(
        self,
        dprob: Optional[np.ndarray] = None,
        dfeatures: Optional[np.ndarray] = None,
        dsides: Optional[List[Optional[np.ndarray]]] = None,
    ) -> np.ndarray:
        """Accumulate parameter gradients for the last forward; returns d(input)."""
        tape = self._tape
        side_channels = self.cfg.side_channels
        dfeat = None
        if dfeatures is not None:
            dfeat = np.array(dfeatures, dtype=self.dtype)
        if dprob is not None:
            dlogits = activation_backward(np.asarray(dprob, dtype=self.dtype)[None, None], tape["sigmoid"])
            dfinal = conv2d_backward(dlogits, tape["final"])
            dfeat = dfinal if dfeat is None else dfeat + dfinal

        dh = None
        for s in range(len(self.cfg.stage_convs), 0, -1):
            k = s - 1
            dside = None
            if dfeat is not None:
                dup = dfeat[:, k * side_channels:(k + 1) * side_channels]
                dside = transpose_conv2d_backward(np.ascontiguousarray(dup), tape["ups"][k])
            if dsides is not None and dsides[k] is not None:
                dside = dsides[k] if dside is None else dside + dsides[k]

            dstage = None
            if dside is not None:
                dstage = conv2d_backward(dside, tape["sides"][k])
            if dh is not None:
                dpool = maxpool2d_backward(dh, tape["pools"][k])
                dstage = dpool if dstage is None else dstage + dpool
            if dstage is None:
                continue

            for c_conv, c_bn, c_act in reversed(tape["stages"][k]):
                dstage = activation_backward(dstage, c_act)
                dstage = batchnorm2d_backward(dstage, c_bn)
                dstage = conv2d_backward(dstage, c_conv)
            dh = dstage
        return dh

    def kink_signature(self) -> bytes:
        """ReLU masks and pooling argmaxes of the last forward pass."""
        parts = []
        for blocks in self._tape["stages"]:
            for _, _, c_act in blocks:
                parts.append(np.packbits(c_act[1] > 0).tobytes())
        for _, argmax, _ in self._tape["pools"]:
            parts.append(argmax.tobytes())
        return b"".join(parts)


def count_params(store: ParamStore) -> "OrderedDict[str, int]":
    """Trainable entries name -> size, in insertion order."""
    table = OrderedDict()
    for name, tensor in store.named_tensors():
        table[name] = tensor.size
    return table

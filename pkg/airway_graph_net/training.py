# training.py
"""
CNN pretraining, joint training with periodic graph refresh, and evaluation.

All loops take one slice per step in volume order, so a fixed seed gives
bitwise-identical parameters and metric logs.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import diagnostics
from .checkpoint import restore_store
from .config import AgnSettings, TrainConfig
from .errors import ConfigError, DataError, TrainingError
from .graph_builder import Graph, build_graph
from .metrics import MetricRecord, curve_dice, dice_coefficient
from .model import AgnModel
from .phantom_data import PhantomVolume, PreprocessConfig, window_hu
from .tensor_core import ParamStore, adam_step, bce_loss, bce_loss_backward

Sample = Tuple[np.ndarray, np.ndarray]  # (1 x 1 x h x w input, h x w target)


@dataclass
class EvaluationResult:
    losses: List[float] = field(default_factory=list)
    dice: List[float] = field(default_factory=list)
    curve_dice: List[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def mean_curve_dice(self) -> float:
        return float(np.mean(self.curve_dice)) if self.curve_dice else float("nan")


@dataclass
class TrainingResult:
    model: AgnModel
    records: List[MetricRecord]
    graph_builds: int = 0


def prepare_samples(vol: PhantomVolume, cfg: PreprocessConfig, dtype=np.float32) -> List[Sample]:
    samples = []
    for z in range(vol.n_slices):
        x = window_hu(vol.hu[z], cfg).astype(dtype)[None, None]
        samples.append((x, vol.mask[z].astype(dtype)))
    return samples


def adam_update(store: ParamStore, lr: float, cfg: TrainConfig):
    for layer in store:
        adam_step(layer, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def _require_finite(loss: float, iteration: int, phase: str):
    if not math.isfinite(loss):
        diagnostics.report(f"{phase}: non-finite loss {loss} at iteration {iteration}, aborting")
        raise TrainingError(f"{phase}: non-finite loss at iteration {iteration}", iteration=iteration)


def _samples_for(model: AgnModel, vol: Optional[PhantomVolume]) -> List[Sample]:
    if vol is None:
        return []
    return prepare_samples(vol, model.settings.preprocess, model.store.dtype)


# =========================
# EVALUATION
# =========================


def evaluate(model: AgnModel, samples: List[Sample], threshold: float = None) -> EvaluationResult:
    """Eval-mode loss and dice of the model's own output per slice."""
    threshold = model.settings.train.threshold if threshold is None else threshold
    result = EvaluationResult()
    for x, y in samples:
        prob = model.predict(x)
        result.losses.append(bce_loss(prob, y))
        result.dice.append(dice_coefficient(prob, y, threshold))
        result.curve_dice.append(curve_dice(prob, y, threshold))
    return result


def _epoch_end(model, test, it, phase, records, epoch_losses):
    message = f"{phase} iteration {it + 1}: epoch train loss {np.mean(epoch_losses):.6f}"
    if test:
        ev = evaluate(model, test)
        records.append(MetricRecord(it, "test", ev.mean_loss, ev.mean_curve_dice))
        message += f", test loss {ev.mean_loss:.6f}, test dice {ev.mean_dice:.4f}"
    diagnostics.report(message)


# =========================
# CNN PRETRAINING
# =========================


def train_cnn(train_vol: PhantomVolume, test_vol: Optional[PhantomVolume], settings: AgnSettings,
              model: AgnModel = None) -> TrainingResult:
    cfg = settings.train
    model = model or AgnModel(settings, "cnn")
    train = _samples_for(model, train_vol)
    test = _samples_for(model, test_vol)
    if not train:
        raise DataError("train_cnn: empty training split")

    records, epoch_losses = [], []
    for it in range(cfg.cnn_iters):
        x, y = train[it % len(train)]
        model.store.zero_grad()
        out = model.cnn.forward(x, training=True)
        loss = bce_loss(out.prob, y)
        _require_finite(loss, it, "train_cnn")
        model.cnn.backward(dprob=bce_loss_backward(out.prob, y))
        adam_update(model.store, cfg.cnn_lr, cfg)

        records.append(MetricRecord(it, "train", loss, curve_dice(out.prob, y, cfg.threshold)))
        epoch_losses.append(loss)
        if (it + 1) % len(train) == 0 or it + 1 == cfg.cnn_iters:
            _epoch_end(model, test, it, "train_cnn", records, epoch_losses)
            epoch_losses = []
    return TrainingResult(model=model, records=records)


# =========================
# JOINT TRAINING
# =========================


class GraphCache:
    """Per-slice graphs from eval-mode CNN maps; all entries are rebuilt together on refresh."""

    def __init__(self, model: AgnModel, samples: List[Sample]):
        self.model = model
        self.samples = samples
        self.graphs: Dict[int, Graph] = {}
        self.builds = 0

    def refresh(self):
        for k, (x, _) in enumerate(self.samples):
            prob = self.model.cnn.forward(x, training=False, with_prob=True).prob
            self.graphs[k] = build_graph(prob, self.model.settings.graph)
            self.builds += 1
        diagnostics.log(f"graph cache refreshed: {len(self.samples)} slices, {self.builds} builds so far")

    def __getitem__(self, k: int) -> Graph:
        return self.graphs[k]


def joint_step(model: AgnModel, x: np.ndarray, y: np.ndarray, graph: Graph, rng: np.random.Generator) -> Tuple[float, float, np.ndarray]:
    """Forward + backward of one slice; returns (final loss, total loss, final prob). Gradients accumulate."""
    cfg = model.settings.train
    out = model.forward_joint(x, graph=graph, training=True, rng=rng)
    loss = bce_loss(out.prob, y)
    total = loss
    dcnn = None
    if cfg.cnn_aux_weight > 0:
        total += cfg.cnn_aux_weight * bce_loss(out.cnn.prob, y)
        dcnn = cfg.cnn_aux_weight * bce_loss_backward(out.cnn.prob, y)
    dvertex = None
    if out.vertex_prob is not None:
        pos = out.graph.vertices.positions
        vy = y[pos[:, 0], pos[:, 1]]
        total += cfg.gnn_aux_weight * bce_loss(out.vertex_prob, vy)
        dvertex = cfg.gnn_aux_weight * bce_loss_backward(out.vertex_prob, vy)
    model.backward_joint(bce_loss_backward(out.prob, y), dcnn, dvertex)
    return loss, total, out.prob


def train_joint(train_vol: PhantomVolume, test_vol: Optional[PhantomVolume], settings: AgnSettings,
                cnn_entries=None, model: AgnModel = None) -> TrainingResult:
    """cnn_entries: checkpoint entries of a pretrained CNN, copied into the cnn.* layers."""
    cfg = settings.train
    model = model or AgnModel(settings, "joint")
    if model.kind != "joint":
        raise ConfigError("train_joint needs a joint model")
    if cnn_entries is not None:
        restore_store(model.store, cnn_entries, prefix="cnn.", optimizer=False)
    train = _samples_for(model, train_vol)
    test = _samples_for(model, test_vol)
    if not train:
        raise DataError("train_joint: empty training split")

    graphs = GraphCache(model, train)
    rng = np.random.default_rng(cfg.seed)
    records, epoch_losses = [], []
    for it in range(cfg.joint_iters):
        if it % cfg.graph_update_period == 0:
            graphs.refresh()
        k = it % len(train)
        x, y = train[k]
        model.store.zero_grad()
        loss, total, prob = joint_step(model, x, y, graphs[k], rng)
        _require_finite(total, it, "train_joint")
        adam_update(model.store, cfg.joint_lr, cfg)

        records.append(MetricRecord(it, "train", loss, curve_dice(prob, y, cfg.threshold)))
        epoch_losses.append(loss)
        if (it + 1) % len(train) == 0 or it + 1 == cfg.joint_iters:
            _epoch_end(model, test, it, "train_joint", records, epoch_losses)
            epoch_losses = []
    return TrainingResult(model=model, records=records, graph_builds=graphs.builds)

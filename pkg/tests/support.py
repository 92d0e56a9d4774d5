"""Shared fixtures for the airway_graph_net test suites."""
import os
import sys

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from airway_graph_net import diagnostics  # noqa: E402
from airway_graph_net.config import AgnSettings, TrainConfig  # noqa: E402
from airway_graph_net.tensor_core import check_gradient  # noqa: E402

RUN_SLOW = os.getenv("AGN_RUN_SLOW", "0") == "1"
# ten full training runs; hours on a laptop core
RUN_SEED_SWEEP = os.getenv("AGN_RUN_SEED_SWEEP", "0") == "1"

SEEDS = (0, 1, 2, 3, 4)

# keep test runs quiet and file-free unless a test opts in
diagnostics.LOG_DIR = ""


def tiny_settings(size=(16, 16), **overrides) -> AgnSettings:
    values = dict(base_channels=4, gat_heads=2, gat_out_features=2, dropout_p=0.0, delta=3, seed=3)
    values.update(overrides)
    return AgnSettings.from_train_config(TrainConfig(**values), size)


def layer_gradient_report(forward, backward, x, seed, kinks=None, **kwargs):
    """
    Check d(sum(R * forward(x)))/dx for a random weighting R.

    forward(x) -> (out, cache); backward(dout, cache) -> dx; kinks(cache) -> kink signature.
    """
    out, cache = forward(x)
    weights = np.random.default_rng(seed + 1000).normal(size=np.shape(out))
    analytic = backward(weights, cache)
    state = {}

    def closure(_):
        o, state["cache"] = forward(x)
        return float(np.sum(o * weights))

    kink_check = (lambda: kinks(state["cache"])) if kinks else None
    return check_gradient(closure, x, analytic, seed=seed, kink_check=kink_check, **kwargs)


def param_gradient_report(forward, backward, params, slot, x, seed, kinks=None, **kwargs):
    """Same as layer_gradient_report, for the weights or bias tensor of a LayerParams."""
    tensor = getattr(params, slot)
    out, cache = forward(x)
    weights = np.random.default_rng(seed + 2000).normal(size=np.shape(out))
    params.zero_grad()
    backward(weights, cache)
    analytic = tensor.grad.copy()
    state = {}

    def closure(_):
        o, state["cache"] = forward(x)
        return float(np.sum(o * weights))

    kink_check = (lambda: kinks(state["cache"])) if kinks else None
    return check_gradient(closure, tensor.data, analytic, seed=seed, kink_check=kink_check, **kwargs)


def bn_cancelled(name: str) -> bool:
    """Conv biases feeding a training-mode batch norm; their gradient is zero by construction."""
    if not name.endswith(".bias"):
        return False
    return (name.startswith("cnn.stage") and ".conv" in name) or (name.startswith("infer.stage") and ".conv." in name)


def every_group_report(closure, store, grads, seed, kink_check=None, samples=100):
    """Yield (name, GradientReport) for every tensor in store except the batch-norm-cancelled biases."""
    for name, tensor in store.named_tensors():
        if bn_cancelled(name):
            continue
        yield name, check_gradient(closure, tensor.data, grads[name], samples=samples, seed=seed,
                                   kink_check=kink_check)

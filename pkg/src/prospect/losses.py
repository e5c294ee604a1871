"""Per-view costs, weighted hypothesis costs, the relaxed multiple-hypothesis
combination, and the value and prior losses.

The batched functions take and return graph tensors so they can sit inside
a training step.  The plain functions evaluate one sample with numpy
inputs and return floats; they run through the same graph code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

PROB_FLOOR = 1e-12
VIEWS = ("image", "state", "gripper")


# -- batched graph forms -------------------------------------------------------------


def batched_view_cost(pred: Tensor, target) -> Tensor:
    """Per-row mean absolute error; ``pred`` is ``(B, ...)`` and ``target`` broadcasts against it."""
    diff = dc.abs_(pred - target)
    return dc.mean(diff.reshape(diff.shape[0], -1), axis=-1)


def row_mae(pred: Tensor, target) -> Tensor:
    """Mean absolute error over the trailing axis."""
    return dc.mean(dc.abs_(pred - target), axis=-1)


def batched_cross_entropy(dist: Tensor, targets) -> Tensor:
    """``-log(max(dist[b, targets[b]], floor))`` per row of ``(..., V)``.

    ``targets`` has the leading shape of ``dist``.
    """
    targets = np.asarray(targets)
    onehot = np.zeros(dist.shape, dtype=dist.graph.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = dc.sum_(dist * onehot, axis=-1)
    return -dc.log(dc.clip(picked, PROB_FLOOR, np.inf))


def batched_binary_cross_entropy(pred: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=pred.graph.dtype)
    p = dc.clip(pred, PROB_FLOOR, np.inf)
    q = dc.clip(1.0 - pred, PROB_FLOOR, np.inf)
    return -(dc.log(p) * labels + dc.log(q) * (1.0 - labels))


def mhp_combine_tensor(costs: Tensor, lam: float) -> Tensor:
    """``(1 - lam) * min + lam / m * sum`` over the last axis of ``(..., m)`` costs.

    The min term sends its gradient to the lowest-index argmin only.
    """
    m = costs.shape[-1]
    if m < 1:
        raise ValueError("need at least one hypothesis cost")
    return dc.min_(costs, axis=-1) * (1.0 - lam) + dc.sum_(costs, axis=-1) * (lam / m)


# -- per-sample float forms ------------------------------------------------------------


def _graph_eval(fn, *arrays) -> float:
    g = dc.Graph("double")
    return float(fn(g, *[np.asarray(a, dtype=np.float64) for a in arrays]).value)


def view_cost(predicted, target) -> float:
    """Mean absolute error over all scalars."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"view_cost: shapes {p.shape} and {t.shape} differ")
    if p.size == 0:
        return 0.0
    return _graph_eval(lambda g, a, b: row_mae(g.constant(a.reshape(1, -1)), b.reshape(1, -1)).reshape(()), p, t)


def _check_distribution(dist: np.ndarray) -> None:
    if dist.ndim != 1 or dist.size == 0:
        raise ValueError(f"expected a probability vector, got shape {dist.shape}")
    if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-6:
        raise ValueError("action distribution must be nonnegative and sum to 1")


def action_cost(action_dist, target: int) -> float:
    """Cross entropy ``-log p[target]`` with the probability floored at 1e-12."""
    dist = np.asarray(action_dist, dtype=np.float64)
    _check_distribution(dist)
    if not 0 <= target < dist.size:
        raise ValueError(f"target {target} outside vocabulary of size {dist.size}")
    return _graph_eval(lambda g, d: batched_cross_entropy(g.constant(d[None]), [target]).reshape(()), dist)


prior_loss = action_cost


def value_loss(pred: float, label: int) -> float:
    """Binary cross entropy, both probabilities floored at 1e-12."""
    return _graph_eval(
        lambda g, p: batched_binary_cross_entropy(g.constant(p.reshape(1)), [label]).reshape(()), np.float64(pred)
    )


def mhp_combine(costs, lam: float) -> float:
    c = np.asarray(costs, dtype=np.float64).reshape(-1)
    if c.size == 0:
        raise ValueError("mhp_combine needs at least one cost")
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    return _graph_eval(lambda g, a: mhp_combine_tensor(g.constant(a[None]), lam).reshape(()), c)


@dataclass
class HypothesisCostBreakdown:
    per_view: dict[str, float]
    action_ce: float
    total: float


def hypothesis_cost(hyp, target_obs, target_action: int, config) -> HypothesisCostBreakdown:
    """Weighted cost of one hypothesis against the next keyframe."""
    per_view = {
        "image": view_cost(hyp.predicted.image, target_obs.image),
        "state": view_cost(hyp.predicted.state, target_obs.state),
        "gripper": view_cost([hyp.predicted.gripper], [target_obs.gripper]),
    }
    ce = action_cost(hyp.action_dist, target_action)
    weights = {"image": config.w_image, "state": config.w_state, "gripper": config.w_gripper}
    total = config.w_action * ce + sum(weights[v] * per_view[v] for v in VIEWS)
    return HypothesisCostBreakdown(per_view, ce, total)

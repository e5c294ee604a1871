"""Joint training of encoder, transforms, decoder, value and prior; evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from . import losses as L
from .dataset import PairBatch, PairTable, load_dataset, make_batches, read_vocabulary, split_ids
from .model import (
    ModelConfig,
    ProspectModel,
    all_heads_graph,
    decode_graph,
    encode_graph,
    Decoded,
    prior_graph,
    to_nchw,
    sample_noise,
    value_graph,
)

EVAL_NOISE_SEED = 12345
EVAL_CHUNK = 64


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 0.05
    seed: int = 0
    value_weight: float = 1.0
    prior_weight: float = 1.0
    val_fraction: float = 0.1
    log_every: int = 50
    checkpoint_every: int = 1000
    precision: str = "single"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")

    @classmethod
    def parse_value(cls, key: str, text: str):
        kinds = {f.name: f.type for f in fields(cls)}
        if key not in kinds:
            raise KeyError(f"unknown train config key {key!r}")
        return {"int": int, "float": float, "str": str}[kinds[key]](text)


# -- Adam -------------------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = (p - step).astype(p.dtype)
        return out


# -- forward with losses ---------------------------------------------------------------------


@dataclass
class Forward:
    loss: dc.Tensor
    costs: dc.Tensor  # (N, m) per-hypothesis totals
    views: dict  # name -> (N, m) tensor
    values: dc.Tensor  # (N,)
    prior: dc.Tensor  # (N, V)
    decoded: Decoded  # rows ordered sample-major, N*m


def loss_graph(g: dc.Graph, w, config: ModelConfig, batch: PairBatch, lam: float, mode: str = "train",
               step_seed: int = 0, value_weight: float = 1.0, prior_weight: float = 1.0,
               noise: np.ndarray | None = None, prior_input: np.ndarray | None = None) -> Forward:
    """Build the full training objective for one batch inside graph ``g``.

    The transforms read the action prior as a constant.  ``prior_input``
    replaces that constant, which lets a finite-difference check hold it
    fixed the way the gradient does.
    """
    c = config
    n, m = len(batch), c.n_heads
    rng = np.random.default_rng(step_seed)
    enc = encode_graph(g, w, c, batch.image, batch.state, batch.gripper, mode, rng)
    prior = prior_graph(w, enc.keypoints)
    if noise is None:
        noise = sample_noise(rng, (n, m, c.noise_dim))
    fed = prior if prior_input is None else g.constant(prior_input)
    hp = all_heads_graph(g, w, c, enc.keypoints, batch.action, fed, noise, mode, rng)
    dec = decode_graph(g, w, c, hp.reshape(n * m, c.hidden_dim), enc.skips, image=c.w_image > 0)

    def per_head(pred, target):
        t = np.asarray(target, dtype=g.dtype).reshape(n, 1, -1)
        return L.row_mae(pred.reshape(n, m, -1), t)

    views = {
        "state": per_head(dec.state, batch.target_state),
        "gripper": per_head(dec.gripper, batch.target_gripper),
    }
    if dec.image is not None:
        views["image"] = per_head(dec.image, to_nchw(batch.target_image))
    targets = np.repeat(np.asarray(batch.target_action)[:, None], m, axis=1)
    ce = L.batched_cross_entropy(dec.action.reshape(n, m, c.vocab_size), targets)
    views["action"] = ce
    costs = ce * c.w_action + views["state"] * c.w_state + views["gripper"] * c.w_gripper
    if "image" in views:
        costs = costs + views["image"] * c.w_image
    loss = dc.mean(L.mhp_combine_tensor(costs, lam))

    values = value_graph(w, enc.keypoints)
    if value_weight:
        loss = loss + dc.mean(L.batched_binary_cross_entropy(values, batch.reward_to_go)) * value_weight
    mask = np.asarray(batch.from_success, dtype=g.dtype)
    if prior_weight and mask.sum() > 0:
        pce = L.batched_cross_entropy(prior, batch.action)
        loss = loss + dc.sum_(pce * (mask / mask.sum())) * prior_weight
    return Forward(loss, costs, views, values, prior, dec)


def train_step(params, batch: PairBatch, config: ModelConfig, train_config: TrainConfig, step_seed: int,
               optimizer: Adam | None = None):
    """One Adam update; returns ``(new params, loss)``.

    Without an ``optimizer`` a fresh Adam state is used, so a single call is
    a first Adam step.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    tc = train_config
    g = dc.Graph(tc.precision)
    w = g.bind(params)
    fwd = loss_graph(g, w, config, batch, tc.lam, "train", step_seed, tc.value_weight, tc.prior_weight)
    loss = float(fwd.loss.value)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} at step seed {step_seed}")
    grads = dc.backward(g, fwd.loss)
    if optimizer is None:
        optimizer = Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    return optimizer.update(params, grads), loss


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_curve: list[tuple[int, float]] = field(default_factory=list)


def fit(params, table_or_episodes, config: ModelConfig, tc: TrainConfig, success_only=False,
        on_log=None, on_checkpoint=None) -> TrainResult:
    """Run ``tc.steps`` updates over the training split of ``episodes``."""
    episodes = table_or_episodes
    stream = make_batches(episodes, tc.batch_size, "train", tc.val_fraction, tc.seed, success_only)
    opt = Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    curve = []
    for i in range(1, tc.steps + 1):
        batch = next(stream)
        try:
            params, loss = train_step(params, batch, config, tc, step_seed(tc.seed, i), opt)
        except FloatingPointError as exc:
            raise FloatingPointError(f"step {i}: {exc}") from exc
        if i % tc.log_every == 0 or i == 1:
            curve.append((i, loss))
            if on_log:
                on_log(i, loss)
        if on_checkpoint and i % tc.checkpoint_every == 0:
            on_checkpoint(i, params)
    return TrainResult(params, curve)


# -- evaluation ------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    val_image_mae: float
    val_state_mae: float
    val_gripper_mae: float
    val_action_acc: float
    value_auc: float
    prior_top1: float
    loss_curve: list[tuple[int, float]] = field(default_factory=list)

    def to_text(self) -> str:
        keys = ["val_image_mae", "val_state_mae", "val_gripper_mae", "val_action_acc", "value_auc", "prior_top1"]
        lines = [f"{k}={getattr(self, k):.9g}" for k in keys]
        if self.loss_curve:
            lines.append(f"final_train_loss={self.loss_curve[-1][1]:.9g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(*(float(kv[k]) for k in
                     ["val_image_mae", "val_state_mae", "val_gripper_mae", "val_action_acc", "value_auc",
                      "prior_top1"]))


def auc(scores, labels) -> float:
    """Area under the ROC curve by the rank-sum statistic; ties count one half.

    Returns 0.5 when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = labels.sum(), (~labels).sum()
    if pos == 0 or neg == 0:
        return 0.5
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2) / (pos * neg))


@dataclass
class PairPredictions:
    """Per-pair evaluation outputs (infer mode)."""

    costs: np.ndarray  # (P, m)
    views: dict  # name -> (P, m)
    action_argmax: np.ndarray  # (P, m)
    values: np.ndarray  # (P,)
    prior: np.ndarray  # (P, V)
    states: np.ndarray  # (P, m, S) predicted states


def predict_pairs(model: ProspectModel, table: PairTable, noise_seed: int = EVAL_NOISE_SEED) -> PairPredictions:
    c = model.config
    noise = sample_noise(np.random.default_rng(noise_seed), (len(table), c.n_heads, c.noise_dim))
    parts: dict[str, list] = {k: [] for k in ("costs", "image", "state", "gripper", "action", "argmax", "values",
                                                "prior", "states")}
    for start in range(0, len(table), EVAL_CHUNK):
        idx = np.arange(start, min(start + EVAL_CHUNK, len(table)))
        batch = table.batch(idx)
        g = dc.Graph(model.precision)
        w = {k: g.constant(v) for k, v in model.params.items()}
        fwd = loss_graph(g, w, c, batch, 0.0, "infer", 0, 0.0, 0.0, noise=noise[idx])
        n = len(idx)
        parts["costs"].append(fwd.costs.value)
        for k in ("state", "gripper", "action"):
            parts[k].append(fwd.views[k].value)
        parts["image"].append(fwd.views["image"].value if "image" in fwd.views else np.zeros((n, c.n_heads)))
        parts["argmax"].append(np.argmax(fwd.decoded.action.value, axis=-1).reshape(n, c.n_heads))
        parts["states"].append(fwd.decoded.state.value.reshape(n, c.n_heads, c.state_dim))
        parts["values"].append(fwd.values.value)
        parts["prior"].append(fwd.prior.value)
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    views = {k: cat[k] for k in ("image", "state", "gripper", "action")}
    return PairPredictions(cat["costs"], views, cat["argmax"], cat["values"], cat["prior"], cat["states"])


def evaluate_table(model: ProspectModel, table: PairTable, noise_seed: int = EVAL_NOISE_SEED) -> MetricsReport:
    pred = predict_pairs(model, table, noise_seed)
    rows = np.arange(len(table))
    best = np.argmin(pred.costs, axis=1)
    targets = table.actions[table.nxt]
    # averaged over heads: a min-cost pick would peek at the target action
    acc = float(np.mean(pred.action_argmax == targets[:, None]))
    succ = table.success
    prior_top1 = float(np.mean(np.argmax(pred.prior[succ], axis=1) == table.actions[table.cur][succ])) if succ.any() \
        else 0.0
    return MetricsReport(
        float(pred.views["image"][rows, best].mean()),
        float(pred.views["state"][rows, best].mean()),
        float(pred.views["gripper"][rows, best].mean()),
        acc,
        auc(pred.values, table.rewards[table.cur]),
        prior_top1,
    )


def evaluate(model: ProspectModel, data_path, split: str = "val", val_fraction: float = 0.1,
             seed: int = 0) -> MetricsReport:
    """Metrics over ``split`` in infer mode with a fixed noise seed."""
    episodes = load_dataset(data_path)
    train, val = split_ids(len(episodes), val_fraction, seed)
    ids = val if split == "val" else train if split == "train" else list(range(len(episodes)))
    table = PairTable(episodes, ids)
    if len(table) == 0:
        raise ValueError(f"{split} split is empty")
    return evaluate_table(model, table)


def train_run(data_path, config: ModelConfig, tc: TrainConfig, out_path, init_seed: int | None = None,
              log=None) -> MetricsReport:
    """Train on a saved dataset and write the model directory.

    Writes ``model.pwt``/``model.cfg``, ``loss.csv``, ``metrics.txt`` and a
    ``ckpt_<step>.pwt`` every ``checkpoint_every`` steps.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    episodes = load_dataset(data_path)
    vocab = read_vocabulary(data_path)
    config.vocab_size = len(vocab)
    config.state_dim = episodes[0].keyframes[0].obs.state.shape[0]
    model = ProspectModel(config, seed=tc.seed if init_seed is None else init_seed)

    def checkpoint(step, params):
        dc.save_checkpoint(params, out / f"ckpt_{step:06d}.pwt")

    result = fit(model.params, episodes, config, tc, on_log=log, on_checkpoint=checkpoint)
    model.params = result.params
    model.save(out)
    (out / "loss.csv").write_text("step,loss\n" + "".join(f"{s},{v:.9g}\n" for s, v in result.loss_curve))
    train, val = split_ids(len(episodes), tc.val_fraction, tc.seed)
    table = PairTable(episodes, val if val else train)
    report = evaluate_table(model, table)
    report.loss_curve = result.loss_curve
    (out / "metrics.txt").write_text(report.to_text())
    return report

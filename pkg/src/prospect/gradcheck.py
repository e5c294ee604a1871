"""Finite-difference checks for every network block and the whole tiny pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import losses as L
from . import netblocks as nb
from .dataset import PairBatch
from .model import ModelConfig, all_heads_graph, encode_graph, init_params, prior_graph, value_graph
from .trainer import loss_graph


# Some conv pre-activations sit within 1e-4 of a relu kink, and some pipeline
# gradients are near 1e-9 where roundoff in the loss dominates, so entries
# that miss at the standard step are differenced again at a narrower and
# then a wider one.
FD_STEP = 1e-4
FALLBACK_STEPS = (1e-6, 1e-3)


@dataclass
class Check:
    name: str
    build: Callable
    params: dict
    tolerance: float
    step: float = FD_STEP


def _probe(rng, shape):
    """Fixed random weighting so a sum-loss exercises every output entry differently."""
    return rng.normal(size=shape)


def tiny_config() -> ModelConfig:
    return ModelConfig(
        n_heads=2, noise_dim=2, use_skips=True, dropout=0.25, keypoints=4, vocab_size=4, state_dim=3,
        image_size=16, enc_widths=(2, 2, 2, 2), dec_widths=(2, 2, 2, 2), transform_hidden=6, value_hidden=4,
    )


def tiny_batch(config: ModelConfig, n: int = 2, seed: int = 0) -> PairBatch:
    rng = np.random.default_rng(seed)
    s = config.image_size
    return PairBatch(
        image=rng.uniform(0, 1, (n, s, s, 3)),
        state=rng.uniform(-1, 1, (n, config.state_dim)),
        gripper=rng.uniform(0.1, 0.9, n),
        action=rng.integers(0, config.vocab_size, n),
        target_image=rng.uniform(0, 1, (n, s, s, 3)),
        target_state=rng.uniform(-1, 1, (n, config.state_dim)),
        target_gripper=rng.uniform(0.1, 0.9, n),
        target_action=rng.integers(0, config.vocab_size, n),
        reward_to_go=np.array([1.0, 0.0][:n] + [1.0] * max(n - 2, 0)),
        from_success=np.array([True, False][:n] + [True] * max(n - 2, 0)),
    )


def block_checks(tolerance: float = 1e-5, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    x4 = rng.normal(size=(2, 3))
    for act in ("linear", "relu", "tanh", "sigmoid", "softmax"):
        probe = _probe(rng, (2, 4))
        checks.append(Check(
            f"dense[{act}]",
            lambda g, p, act=act, probe=probe: dc.sum_(nb.dense(p["x"], p["w"], p["b"], act) * probe),
            {"x": x4, "w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)},
            tolerance,
        ))
    for stride in (1, 2):
        spec = nb.ConvBlockSpec(2, 3, stride=stride)
        out = spec.output_extent(6)
        probe = _probe(rng, (2, 3, out, out))
        checks.append(Check(
            f"conv_block[stride={stride}]",
            lambda g, p, spec=spec, probe=probe: dc.sum_(nb.conv_block(p["x"], spec, p["w"], p["b"]) * probe),
            {"x": rng.normal(size=(2, 2, 6, 6)), "w": rng.normal(size=(3, 2, 5, 5)) * 0.3, "b": rng.normal(size=3)},
            tolerance,
        ))
    probe = _probe(rng, (4, 2, 8, 8))
    checks.append(Check(
        "upconv_block[skip]",
        lambda g, p, probe=probe: dc.sum_(
            nb.upconv_block(p["x"], p["w"], p["b"], p["skip"], p["ws"], activation="tanh") * probe),
        {"x": rng.normal(size=(4, 2, 4, 4)), "w": rng.normal(size=(2, 2, 5, 5)) * 0.2, "b": rng.normal(size=2),
         "skip": rng.normal(size=(2, 3, 4, 4)), "ws": rng.normal(size=(2, 3, 5, 5)) * 0.2},
        tolerance,
    ))
    probe = _probe(rng, (2, 4, 3, 3))
    checks.append(Check(
        "tile_state",
        lambda g, p, probe=probe: dc.sum_(nb.tile_state(p["f"], p["s"]) * probe),
        {"f": rng.normal(size=(2, 2, 3, 3)), "s": rng.normal(size=(2, 2))},
        tolerance,
    ))
    probe = _probe(rng, (2, 6))
    checks.append(Check(
        "spatial_soft_argmax",
        lambda g, p, probe=probe: dc.sum_(nb.spatial_soft_argmax(p["f"]) * probe),
        {"f": rng.normal(size=(2, 3, 4, 5))},
        tolerance,
    ))
    probe = _probe(rng, (3, 5))
    checks.append(Check(
        "dropout[train]",
        lambda g, p, probe=probe: dc.sum_(nb.dropout(p["x"], 0.4, "train", np.random.default_rng(3)) * probe),
        {"x": rng.normal(size=(3, 5))},
        tolerance,
    ))
    lam_probe = rng.uniform(0.1, 2.0, size=(3, 4))
    checks.append(Check(
        "mhp_combine",
        lambda g, p: dc.sum_(L.mhp_combine_tensor(dc.exp(p["c"]), 0.05)),
        {"c": np.log(lam_probe)},
        tolerance,
    ))
    cfg = tiny_config()
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, seed).items()}
    batch = tiny_batch(cfg)
    kp = rng.uniform(-0.9, 0.9, size=(2, cfg.hidden_dim))
    noise = rng.uniform(-1, 1, size=(2, cfg.n_heads, cfg.noise_dim))
    head = {k: v for k, v in params.items() if k.startswith("head")}
    probe = _probe(rng, (2, cfg.n_heads, cfg.hidden_dim))
    checks.append(Check(
        "transform_heads",
        lambda g, p, probe=probe: dc.sum_(all_heads_graph(
            g, p, cfg, p["kp"], batch.action, g.constant(np.full((2, cfg.vocab_size), 0.25)), noise,
            "train", np.random.default_rng(5)) * probe),
        {**head, "kp": kp},
        tolerance,
    ))
    vp = {k: v for k, v in params.items() if k.startswith("value.")}
    vp["value.out.w"] = rng.normal(size=vp["value.out.w"].shape)
    checks.append(Check(
        "value_head",
        lambda g, p: dc.sum_(L.batched_binary_cross_entropy(value_graph(p, p["kp"]), [1.0, 0.0])),
        {**vp, "kp": kp},
        tolerance,
    ))
    pp = {"prior.w": rng.normal(size=params["prior.w"].shape), "prior.b": rng.normal(size=cfg.vocab_size)}
    checks.append(Check(
        "prior_head",
        lambda g, p: dc.sum_(L.batched_cross_entropy(prior_graph(p, p["kp"]), [1, 3])),
        {**pp, "kp": kp},
        tolerance,
    ))
    enc = {k: v for k, v in params.items() if k.startswith("enc")}
    probe = _probe(rng, (2, cfg.hidden_dim))
    checks.append(Check(
        "encoder",
        lambda g, p, probe=probe: dc.sum_(encode_graph(
            g, p, cfg, batch.image, batch.state, batch.gripper, "train", np.random.default_rng(7)).keypoints * probe),
        enc,
        tolerance,
    ))
    return checks


def pipeline_check(tolerance: float = 1e-4, seed: int = 0) -> Check:
    """Encode, transform, decode and every loss term, all parameters at once."""
    cfg = tiny_config()
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, seed).items()}
    rng = np.random.default_rng(seed + 1)
    # move the zero-initialised prior off its symmetric start
    params["prior.w"] = rng.normal(size=params["prior.w"].shape) * 0.5
    batch = tiny_batch(cfg, seed=seed)
    # the transforms see the prior through a stop-gradient; pin it at its base value
    g = dc.Graph("double")
    fixed_prior = loss_graph(g, g.bind(params), cfg, batch, 0.05, "train", step_seed=11).prior.value
    return Check(
        "end_to_end",
        lambda g, p: loss_graph(g, p, cfg, batch, 0.05, "train", step_seed=11, prior_input=fixed_prior).loss,
        params,
        tolerance,
    )


def run_checks(tolerance: float = 1e-5, pipeline_tolerance: float | None = None):
    """All block checks at ``tolerance`` and the pipeline at ``pipeline_tolerance``
    (default ten times ``tolerance``).  Returns ``[(name, report)]``."""
    if pipeline_tolerance is None:
        pipeline_tolerance = 10 * tolerance
    out = []
    for chk in block_checks(tolerance) + [pipeline_check(pipeline_tolerance)]:
        out.append((chk.name, dc.grad_check(chk.build, chk.params, chk.tolerance, chk.step, fallback_steps=FALLBACK_STEPS)))
    return out

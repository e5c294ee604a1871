"""Encoder, per-hypothesis transform heads, shared decoder, value and action prior.

Feature maps are NCHW inside the graph; observations carry HWC images.
The hidden state is the vector of spatial soft-argmax keypoints.  The
encoder does not see the action: the action enters at the transforms, so
one encoding serves every action the planner tries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import netblocks as nb
from .diffcore import Graph, Tensor
from .observation import Observation


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ModelConfig:
    n_heads: int = 4
    noise_dim: int = 32
    use_skips: bool = True
    dropout: float = 0.125
    keypoints: int = 32
    vocab_size: int = 10
    state_dim: int = 3
    w_image: float = 1.0
    w_state: float = 1.0
    w_gripper: float = 1.0
    w_action: float = 1.0
    image_size: int = 64
    enc_widths: tuple[int, ...] = (32, 32, 64, 64)
    dec_widths: tuple[int, ...] = (64, 64, 32, 32)
    transform_hidden: int = 256
    value_hidden: int = 64

    def __post_init__(self):
        self.enc_widths = tuple(self.enc_widths)
        self.dec_widths = tuple(self.dec_widths)
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.w_image, self.w_state, self.w_gripper, self.w_action) < 0:
            raise ValueError("loss weights must be nonnegative")
        if len(self.enc_widths) != 4 or len(self.dec_widths) != 4:
            raise ValueError("enc_widths and dec_widths take four entries")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if self.noise_dim < 0 or self.keypoints < 1 or self.vocab_size < 1:
            raise ValueError("noise_dim, keypoints and vocab_size out of range")

    @property
    def hidden_dim(self) -> int:
        return 2 * self.keypoints

    # key=value text form ------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_value(cls, key: str, text: str):
        kinds = {f.name: f.type for f in fields(cls)}
        if key not in kinds:
            raise KeyError(f"unknown model config key {key!r}")
        kind = kinds[key]
        if kind.startswith("tuple"):
            return _ints(text)
        if kind == "bool":
            return _bool(text)
        if kind == "int":
            return int(text)
        return float(text)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = cls.parse_value(key.strip(), val.strip())
        return cls(**values)


# -- parameters ---------------------------------------------------------------------------


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh float32 weights, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    c = config
    p: dict[str, np.ndarray] = {}
    e0, e1, e2, e3 = c.enc_widths
    d0, d1, d2, d3 = c.dec_widths
    s_in = c.state_dim + 1
    p["enc0.w"], p["enc0.b"] = nb.init_conv(rng, 3, e0)
    p["enc1.w"], p["enc1.b"] = nb.init_conv(rng, e0 + s_in, e1)
    p["enc2.w"], p["enc2.b"] = nb.init_conv(rng, e1, e2)
    p["enc3.w"], p["enc3.b"] = nb.init_conv(rng, e2, e3)
    p["enc_kp.w"], p["enc_kp.b"] = nb.init_conv(rng, e3, c.keypoints)

    h2 = c.hidden_dim
    t_in = h2 + c.vocab_size + c.vocab_size + c.noise_dim
    for j in range(c.n_heads):
        p[f"head{j}.l0.w"], p[f"head{j}.l0.b"] = nb.init_dense(rng, t_in, c.transform_hidden)
        p[f"head{j}.l1.w"], p[f"head{j}.l1.b"] = nb.init_dense(rng, c.transform_hidden, c.transform_hidden)
        p[f"head{j}.out.w"], p[f"head{j}.out.b"] = nb.init_dense(rng, c.transform_hidden, h2, "tanh")

    r = c.image_size // 8
    p["dec_fc.w"], p["dec_fc.b"] = nb.init_dense(rng, h2, d0 * r * r)
    skip_ch = (e3, e2, e1)
    ins = (d0, d1, d2)
    outs = (d1, d2, d3)
    for i in range(3):
        p[f"dec{i}.w"], p[f"dec{i}.b"] = nb.init_conv(rng, ins[i] + (skip_ch[i] if c.use_skips else 0), outs[i])
    p["dec_out.w"], p["dec_out.b"] = nb.init_conv(rng, d3, 3)
    p["dec_state.w"], p["dec_state.b"] = nb.init_dense(rng, h2, c.state_dim, "tanh")
    p["dec_grip.w"], p["dec_grip.b"] = nb.init_dense(rng, h2, 1, "sigmoid")
    p["dec_act.w"], p["dec_act.b"] = nb.init_dense(rng, h2, c.vocab_size, "softmax")

    p["value.l0.w"], p["value.l0.b"] = nb.init_dense(rng, h2, c.value_hidden)
    p["value.out.w"], p["value.out.b"] = nb.init_dense(rng, c.value_hidden, 1, "sigmoid")
    p["prior.w"], p["prior.b"] = nb.init_dense(rng, h2, c.vocab_size, zero=True)
    return p


def head_param_names(params, j: int) -> list[str]:
    return [k for k in params if k.startswith(f"head{j}.")]


# -- graph pieces ----------------------------------------------------------------------------


@dataclass
class Encoded:
    keypoints: Tensor  # (N, 2K)
    skips: list[Tensor]  # at res/8, res/4, res/2


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))


def encode_graph(g: Graph, w, config: ModelConfig, images, states, grippers, mode="infer", rng=None) -> Encoded:
    """``images`` is ``(N, H, W, 3)``; ``states`` ``(N, S)``; ``grippers`` ``(N,)``."""
    c = config
    rate = c.dropout
    x = g.constant(to_nchw(images))
    aux = np.concatenate([np.asarray(states).reshape(len(states), -1), np.asarray(grippers).reshape(-1, 1)], axis=1)
    e0, e1, e2, e3 = c.enc_widths
    x = nb.conv_block(x, nb.ConvBlockSpec(3, e0), w["enc0.w"], w["enc0.b"])
    x = nb.dropout(x, rate, mode, rng)
    x = nb.tile_state(x, aux)
    skips = []
    for i, (cin, cout) in enumerate([(e0 + aux.shape[1], e1), (e1, e2), (e2, e3)], start=1):
        x = nb.conv_block(x, nb.ConvBlockSpec(cin, cout, stride=2), w[f"enc{i}.w"], w[f"enc{i}.b"])
        x = nb.dropout(x, rate, mode, rng)
        skips.append(x)
    x = nb.conv_block(x, nb.ConvBlockSpec(e3, c.keypoints, activation="linear"), w["enc_kp.w"], w["enc_kp.b"])
    return Encoded(nb.spatial_soft_argmax(x), skips[::-1])


def transform_graph(g: Graph, w, config: ModelConfig, keypoints: Tensor, actions, prior: Tensor, noise,
                    heads, mode="infer", rng=None) -> Tensor:
    """Apply transform head ``heads[b]`` to row ``b``; returns ``(B, 2K)``.

    The prior enters as a constant: transforms do not train the prior head.
    """
    c = config
    heads = np.asarray(heads)
    n = keypoints.shape[0]
    parts = [keypoints, g.constant(nb.one_hot(np.asarray(actions), c.vocab_size)), dc.stop_gradient(prior)]
    if c.noise_dim:
        parts.append(g.constant(np.asarray(noise).reshape(n, c.noise_dim)))
    x = dc.concat(parts, axis=1)
    outs, rows = [], []
    for j in np.unique(heads):
        idx = np.flatnonzero(heads == j)
        xj = x if len(idx) == n else x[idx]
        hj = nb.dense(xj, w[f"head{j}.l0.w"], w[f"head{j}.l0.b"], "relu")
        hj = nb.dropout(hj, c.dropout, mode, rng)
        hj = nb.dense(hj, w[f"head{j}.l1.w"], w[f"head{j}.l1.b"], "relu")
        hj = nb.dropout(hj, c.dropout, mode, rng)
        outs.append(nb.dense(hj, w[f"head{j}.out.w"], w[f"head{j}.out.b"], "tanh"))
        rows.append(idx)
    if len(outs) == 1:
        return outs[0]
    order = np.argsort(np.concatenate(rows), kind="stable")
    return dc.concat(outs, axis=0)[order]


def all_heads_graph(g: Graph, w, config: ModelConfig, keypoints: Tensor, actions, prior: Tensor, noise,
                    mode="infer", rng=None) -> Tensor:
    """Every head on every row: ``(N, m, 2K)``; ``noise`` is ``(N, m, noise_dim)``."""
    c = config
    n, m = keypoints.shape[0], c.n_heads
    parts = [keypoints, g.constant(nb.one_hot(np.asarray(actions), c.vocab_size)), dc.stop_gradient(prior)]
    base = dc.concat(parts, axis=1)
    outs = []
    for j in range(m):
        x = base
        if c.noise_dim:
            x = dc.concat([base, g.constant(np.asarray(noise)[:, j])], axis=1)
        h = nb.dense(x, w[f"head{j}.l0.w"], w[f"head{j}.l0.b"], "relu")
        h = nb.dropout(h, c.dropout, mode, rng)
        h = nb.dense(h, w[f"head{j}.l1.w"], w[f"head{j}.l1.b"], "relu")
        h = nb.dropout(h, c.dropout, mode, rng)
        outs.append(nb.dense(h, w[f"head{j}.out.w"], w[f"head{j}.out.b"], "tanh").reshape(n, 1, c.hidden_dim))
    return outs[0] if m == 1 else dc.concat(outs, axis=1)


@dataclass
class Decoded:
    image: Tensor  # (B, 3, H, W)
    state: Tensor  # (B, S)
    gripper: Tensor  # (B, 1)
    action: Tensor  # (B, V)


def decode_graph(g: Graph, w, config: ModelConfig, h_pred: Tensor, skips: list[Tensor] | None,
                 image: bool = True) -> Decoded:
    """Decode ``(N*m, 2K)`` predicted keypoints; ``skips`` hold one map per sample (N rows)."""
    c = config
    b = h_pred.shape[0]
    state = nb.dense(h_pred, w["dec_state.w"], w["dec_state.b"], "tanh")
    grip = nb.dense(h_pred, w["dec_grip.w"], w["dec_grip.b"], "sigmoid")
    act = nb.dense(h_pred, w["dec_act.w"], w["dec_act.b"], "softmax")
    img = None
    if image:
        r = c.image_size // 8
        x = nb.dense(h_pred, w["dec_fc.w"], w["dec_fc.b"], "relu").reshape(b, c.dec_widths[0], r, r)
        for i in range(3):
            wi = w[f"dec{i}.w"]
            if c.use_skips:
                if skips is None:
                    raise ValueError("decoder built with skips needs skip features")
                cx = x.shape[1]
                x = nb.upconv_block(x, wi[:, :cx], w[f"dec{i}.b"], skips[i], wi[:, cx:])
            else:
                x = nb.upconv_block(x, wi, w[f"dec{i}.b"])
        spec = nb.ConvBlockSpec(c.dec_widths[3], 3, activation="sigmoid")
        img = nb.conv_block(x, spec, w["dec_out.w"], w["dec_out.b"])
    return Decoded(img, state, grip, act)


def value_graph(w, h: Tensor) -> Tensor:
    """``(N, 2K) -> (N,)`` success probability."""
    x = nb.dense(h, w["value.l0.w"], w["value.l0.b"], "relu")
    v = nb.dense(x, w["value.out.w"], w["value.out.b"], "sigmoid")
    return v.reshape(v.shape[0])


def prior_graph(w, h: Tensor) -> Tensor:
    return nb.dense(h, w["prior.w"], w["prior.b"], "softmax")


def sample_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


# -- numpy-level inference ---------------------------------------------------------------------


@dataclass
class HiddenState:
    keypoints: np.ndarray  # (2K,)
    skip_features: list[np.ndarray] = field(default_factory=list)


@dataclass
class Hypothesis:
    index: int
    predicted: Observation
    action_dist: np.ndarray
    keypoints: np.ndarray
    value: float = float("nan")


class ProspectModel:
    """Weights plus config, with per-observation inference entry points (infer mode)."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0,
                 precision: str = "single"):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.precision = precision

    def _graph(self):
        g = Graph(self.precision)
        return g, {k: g.constant(v) for k, v in self.params.items()}

    def encode_batch(self, images, states, grippers) -> tuple[np.ndarray, list[np.ndarray]]:
        g, w = self._graph()
        enc = encode_graph(g, w, self.config, images, states, grippers)
        return enc.keypoints.value, [s.value for s in enc.skips]

    def encode(self, obs: Observation) -> HiddenState:
        kp, skips = self.encode_batch(obs.image[None], obs.state[None], np.array([obs.gripper]))
        return HiddenState(kp[0], [s[0] for s in skips])

    def action_prior(self, keypoints) -> np.ndarray:
        g, w = self._graph()
        kp = np.atleast_2d(keypoints)
        out = prior_graph(w, g.constant(kp)).value
        return out if np.ndim(keypoints) == 2 else out[0]

    def value(self, keypoints) -> np.ndarray | float:
        g, w = self._graph()
        out = value_graph(w, g.constant(np.atleast_2d(keypoints))).value
        return out if np.ndim(keypoints) == 2 else float(out[0])

    def transform(self, keypoints, actions, priors, noise, heads) -> np.ndarray:
        """Batched: row ``b`` runs head ``heads[b]`` on ``(keypoints[b], actions[b], priors[b], noise[b])``."""
        g, w = self._graph()
        kp = np.atleast_2d(keypoints)
        n = kp.shape[0]
        noise = np.asarray(noise).reshape(n, self.config.noise_dim)
        out = transform_graph(g, w, self.config, g.constant(kp), np.atleast_1d(actions),
                              g.constant(np.atleast_2d(priors)), noise, np.atleast_1d(heads))
        return out.value

    def decode(self, keypoints, skips: list[np.ndarray] | None) -> tuple[list[Observation], np.ndarray]:
        """Decode ``(B, 2K)`` keypoints that all share one sample's skip maps."""
        g, w = self._graph()
        kp = np.atleast_2d(keypoints)
        sk = None
        if self.config.use_skips:
            sk = [g.constant(np.asarray(s)[None]) for s in skips]
        dec = decode_graph(g, w, self.config, g.constant(kp), sk)
        images = dec.image.value.transpose(0, 2, 3, 1)
        obs = [
            Observation(np.clip(images[i], 0, 1), np.clip(dec.state.value[i], -1, 1), float(dec.gripper.value[i, 0]))
            for i in range(kp.shape[0])
        ]
        return obs, dec.action.value

    def noise_for(self, seed: int, rows: int = 1) -> np.ndarray:
        return sample_noise(np.random.default_rng(seed), (rows, self.config.n_heads, self.config.noise_dim))

    def predict_hypotheses(self, obs: Observation, action: int, seed: int = 0) -> list[Hypothesis]:
        """Encode once, run every head with its own noise draw, decode each with the frame's skips."""
        c = self.config
        hs = self.encode(obs)
        prior = self.action_prior(hs.keypoints)
        noise = self.noise_for(seed)[0]
        m = c.n_heads
        kp = self.transform(np.repeat(hs.keypoints[None], m, 0), np.full(m, action), np.repeat(prior[None], m, 0),
                            noise, np.arange(m))
        frames, dists = self.decode(kp, hs.skip_features)
        values = self.value(kp)
        return [Hypothesis(j, frames[j], dists[j], kp[j], float(values[j])) for j in range(m)]

    # persistence -----------------------------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        dc.save_checkpoint(self.params, d / "model.pwt")
        (d / "model.cfg").write_text(self.config.to_text())

    @classmethod
    def load(cls, directory, precision: str = "single") -> "ProspectModel":
        d = Path(directory)
        config = ModelConfig.from_text((d / "model.cfg").read_text())
        params = dc.load_checkpoint(d / "model.pwt")
        expected = init_params(config, 0)
        if set(params) != set(expected) or any(params[k].shape != expected[k].shape for k in expected):
            raise dc.CheckpointError(f"{d / 'model.pwt'}: parameters do not match {d / 'model.cfg'}")
        return cls(config, params, precision=precision)

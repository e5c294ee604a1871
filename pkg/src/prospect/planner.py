"""Beam search over predicted futures.

The search is generic over a transition model with five methods::

    root(obs)                          -> (hidden, context)
    prior(hidden)                      -> probabilities over the vocabulary
    transition(hiddens, actions, heads, noises) -> list of successor hiddens
    value(hiddens)                     -> array of values
    render(hidden, context)            -> Observation

plus ``n_heads``, ``vocab_size`` and ``noise_dim`` attributes.  The learned
model (:class:`ModelAdapter`) and the ground-truth simulator
(:class:`OracleAdapter`) both provide it.

A node's score is the mean value along its path, excluding the root.
Every child gets its own noise vector drawn from the search seed and the
child's path, so a node's successors do not depend on which other nodes
share its beam.  Ties are broken by the lexicographic ``(action, head)``
path, so search and brute force agree on which plan wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ProspectModel
from .observation import Observation
from .worlds import STACK_ACTIONS, Simulator, WorldConfig, decode_action


@dataclass
class PlanNode:
    keypoints: object  # hidden state: keypoint vector or oracle state
    depth: int
    incoming_action: int | None
    hypothesis_index: int | None
    value: float
    score: float
    parent: "PlanNode | None" = None
    value_sum: float = 0.0

    def path(self) -> tuple[tuple[int, int], ...]:
        out = []
        node = self
        while node.parent is not None:
            out.append((node.incoming_action, node.hypothesis_index))
            node = node.parent
        return tuple(reversed(out))

    def lineage(self) -> list["PlanNode"]:
        out = []
        node = self
        while node.parent is not None:
            out.append(node)
            node = node.parent
        return out[::-1]


@dataclass
class Plan:
    actions: list[int]
    predicted_frames: list[Observation]
    score: float
    heads: list[int] = field(default_factory=list)


def rank_key(node: PlanNode):
    return (-node.score, node.path())


def child_noise(seed: int, path, noise_dim: int) -> np.ndarray:
    flat = [int(v) for pair in path for v in pair]
    rng = np.random.default_rng([seed, len(path), *flat])
    return rng.uniform(-1.0, 1.0, size=noise_dim)


def top_actions(prior: np.ndarray, k: int) -> list[int]:
    """The ``k`` most probable action ids, ties going to the lower id."""
    order = sorted(range(len(prior)), key=lambda a: (-prior[a], a))
    return order[: min(k, len(prior))]


def expand(node: PlanNode, model, top_k_actions: int, noise_seed: int) -> list[PlanNode]:
    """``top_k_actions * n_heads`` children: every selected action through every head."""
    if top_k_actions < 1:
        raise ValueError("top_k_actions must be >= 1")
    actions = top_actions(model.prior(node.keypoints), top_k_actions)
    pairs = [(a, j) for a in actions for j in range(model.n_heads)]
    base = node.path()
    noises = [child_noise(noise_seed, base + (p,), model.noise_dim) for p in pairs]
    succ = model.transition([node.keypoints] * len(pairs), [a for a, _ in pairs], [j for _, j in pairs], noises)
    values = model.value(succ)
    children = []
    for (a, j), h, v in zip(pairs, succ, values):
        total = node.value_sum + float(v)
        d = node.depth + 1
        children.append(PlanNode(h, d, a, j, float(v), total / d, node, total))
    return children


def _extract(best: PlanNode, model, context) -> Plan:
    nodes = best.lineage()
    frames = [model.render(n.keypoints, context) for n in nodes]
    return Plan([n.incoming_action for n in nodes], frames, best.score, [n.hypothesis_index for n in nodes])


def _root(root_obs, model):
    h, context = model.root(root_obs)
    v = float(model.value([h])[0])
    return PlanNode(h, 0, None, None, v, v), context


def search(root_obs, model, depth: int, beam: int, top_k_actions: int, seed: int = 0) -> Plan:
    """Beam search; level ``l`` keeps the ``beam`` best nodes by path-mean value."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if beam < 1:
        raise ValueError("beam must be >= 1")
    root, context = _root(root_obs, model)
    if depth == 0:
        return Plan([], [], root.value)
    frontier = [root]
    for _ in range(depth):
        children = [c for n in frontier for c in expand(n, model, top_k_actions, seed)]
        children.sort(key=rank_key)
        frontier = children[:beam]
    return _extract(frontier[0], model, context)


def greedy(root_obs, model, depth: int, top_k_actions: int, seed: int = 0) -> Plan:
    """Descend by always taking the best child."""
    node, context = _root(root_obs, model)
    if depth == 0:
        return Plan([], [], node.value)
    for _ in range(depth):
        node = min(expand(node, model, top_k_actions, seed), key=rank_key)
    return _extract(node, model, context)


def brute_force(root_obs, model, depth: int, top_k_actions: int, seed: int = 0) -> Plan:
    """Enumerate every path to ``depth`` and return the best by the search ranking."""
    root, context = _root(root_obs, model)
    if depth == 0:
        return Plan([], [], root.value)
    leaves = [root]
    for _ in range(depth):
        leaves = [c for n in leaves for c in expand(n, model, top_k_actions, seed)]
    return _extract(min(leaves, key=rank_key), model, context)


# -- learned model ----------------------------------------------------------------------


class ModelAdapter:
    """Plans in keypoint space with a trained :class:`ProspectModel`.

    Skip features come from the root observation and are used only to
    render frames.
    """

    def __init__(self, model: ProspectModel):
        self.model = model
        self.n_heads = model.config.n_heads
        self.vocab_size = model.config.vocab_size
        self.noise_dim = model.config.noise_dim

    def root(self, obs: Observation):
        hs = self.model.encode(obs)
        return hs.keypoints, hs.skip_features

    def prior(self, hidden) -> np.ndarray:
        return self.model.action_prior(hidden)

    def transition(self, hiddens, actions, heads, noises):
        kp = np.stack(hiddens)
        priors = self.model.action_prior(kp)
        out = self.model.transform(kp, np.asarray(actions), priors, np.stack(noises).reshape(len(kp), -1),
                                   np.asarray(heads))
        return list(out)

    def value(self, hiddens) -> np.ndarray:
        return np.asarray(self.model.value(np.stack(hiddens)))

    def render(self, hidden, context) -> Observation:
        frames, _ = self.model.decode(hidden[None], context)
        return frames[0]


# -- ground-truth oracle ------------------------------------------------------------------


@dataclass(frozen=True)
class OracleState:
    """A simulator snapshot plus a terminal flag: ``None``, ``"success"`` or ``"failure"``."""

    sim: Simulator
    terminal: str | None = None

    def key(self):
        s = self.sim.state
        return (
            self.terminal,
            self.sim.status,
            self.sim.steps,
            s.objects.round(9).tobytes(),
            s.effector.round(9).tobytes(),
            round(s.z, 9),
            s.held,
            tuple(s.support),
        )


def oracle_step(state: OracleState, action: int) -> OracleState:
    """Run one stacking action on a copy; a violated precondition fails absorbingly."""
    if state.terminal is not None:
        return state
    sim = state.sim
    if sim.status != "active":
        return OracleState(sim, "failure")
    s = sim.state
    kind, color = decode_action("stack", action)
    if kind == "done":
        return OracleState(sim, "success" if s.stacked() else "failure")
    nxt = sim.copy()
    ok = False
    if kind == "grasp":
        i = s.index_of(color)
        if i is not None and s.held is None and s.support[i] is None and s.is_free(i):
            ok = nxt.grasp(color) and nxt.state.held == i
    elif kind == "lift":
        if s.held is not None and s.z < 0.5:
            ok = nxt.lift()
    elif kind == "place_on":
        i = s.index_of(color)
        if i is not None and s.held is not None and i != s.held and s.is_free(i):
            ok = nxt.place_on(color) and nxt.state.support[s.held] == i
    return OracleState(nxt, None if ok else "failure")


class OracleAdapter:
    """Ground-truth transitions, a uniform prior and reachability values.

    The value of a state is 1 when some action sequence still ends in a
    successful ``done``, found by exhaustive search, else 0.
    """

    n_heads = 1
    noise_dim = 0

    def __init__(self, world: WorldConfig, horizon: int = 4):
        if world.domain != "stack":
            raise ValueError("the oracle adapter covers stacking worlds")
        self.world = world
        self.vocab_size = len(STACK_ACTIONS)
        self.horizon = horizon
        self._cache: dict = {}

    def root(self, obs=None):
        return OracleState(Simulator(self.world)), None

    def prior(self, hidden) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)

    def transition(self, hiddens, actions, heads, noises):
        return [oracle_step(h, a) for h, a in zip(hiddens, actions)]

    def reachable(self, state: OracleState, horizon: int) -> bool:
        if state.terminal is not None:
            return state.terminal == "success"
        if horizon == 0:
            return False
        key = (state.key(), horizon)
        if key not in self._cache:
            self._cache[key] = any(
                self.reachable(oracle_step(state, a), horizon - 1) for a in range(self.vocab_size)
            )
        return self._cache[key]

    def value(self, hiddens) -> np.ndarray:
        return np.array([float(self.reachable(h, self.horizon)) for h in hiddens])

    def render(self, hidden, context) -> Observation:
        return hidden.sim.state.observation()


def oracle_adapter(world: WorldConfig, horizon: int = 4) -> OracleAdapter:
    return OracleAdapter(world, horizon)


def execute_plan(world: WorldConfig, actions) -> bool:
    """Run a stacking plan through the simulator; True iff it ends in a successful ``done``
    or in a stacked, collision-free state."""
    state = OracleState(Simulator(world))
    for a in actions:
        state = oracle_step(state, a)
    if state.terminal is not None:
        return state.terminal == "success"
    return state.sim.status == "active" and state.sim.state.stacked()


def action_names(actions) -> list[str]:
    return [STACK_ACTIONS[a] for a in actions]

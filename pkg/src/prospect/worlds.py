"""Procedural 2D worlds: landmark navigation and block stacking with an obstacle.

Both domains share one kinematic model.  An effector (or mobile robot) has
a planar pose ``(x, y, theta)``, a height ``z`` (0 = low, 1 = high) and a
gripper opening.  It moves at most ``MAX_STEP`` per tick toward a waypoint.
Moving at low height through the obstacle square is a collision.  Scripted
controllers turn high-level actions into waypoint commands and record a
keyframe at every action boundary.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .observation import IMAGE_SIZE, Observation

COLORS = ("red", "green", "blue", "yellow")

PALETTE = {
    "background": (0.9, 0.9, 0.9),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "obstacle": (0.3, 0.3, 0.3),
    "marker_border": (1.0, 1.0, 1.0),
    "marker_low": (0.0, 0.0, 0.0),
    "marker_high": (0.5, 0.5, 0.5),
}

BLOCK_PX = 8
OBSTACLE_PX = 10
MARKER_PX = 6
PIXEL = 2.0 / (IMAGE_SIZE - 1)  # world units per pixel step
OBSTACLE_HALF = OBSTACLE_PX / 2 * PIXEL

MAX_STEP = 0.05
MAX_TURN = 0.25
MAX_LIFT = 0.25
GRASP_RADIUS = 0.08
NAV_RADIUS = 0.1
MIN_SEPARATION = 0.25
PLACEMENT_BOUND = 0.8
WAYPOINT_BOUND = 0.95
STEP_BUDGET = 120
MAX_SAMPLING_TRIES = 1000

GRIP_OPEN = 0.95
GRIP_HOLDING = 0.35
GRIP_EMPTY = 0.05
NAV_GRIPPER = 0.5

STACK_ACTIONS = (
    [f"grasp({c})" for c in COLORS] + [f"place_on({c})" for c in COLORS] + ["lift", "done"]
)
NAV_ACTIONS = [f"investigate({c})" for c in COLORS]
LIFT = STACK_ACTIONS.index("lift")
DONE = STACK_ACTIONS.index("done")


def vocabulary(domain: str) -> list[str]:
    if domain == "stack":
        return list(STACK_ACTIONS)
    if domain == "nav":
        return list(NAV_ACTIONS)
    raise ValueError(f"unknown domain {domain!r}")


def grasp_id(color: int) -> int:
    return color


def place_id(color: int) -> int:
    return 4 + color


def decode_action(domain: str, action: int) -> tuple[str, int | None]:
    """``(kind, color)`` for an action id, e.g. ``("grasp", 2)``."""
    name = vocabulary(domain)[action]
    if "(" not in name:
        return name, None
    kind, arg = name[:-1].split("(")
    return kind, COLORS.index(arg)


class WorldSamplingError(RuntimeError):
    pass


@dataclass
class WorldConfig:
    domain: str
    objects: np.ndarray  # (n, 2) block or landmark centres
    colors: tuple[int, ...]
    obstacle: np.ndarray | None  # (2,) centre, stack only
    start: np.ndarray  # (3,) x, y, theta
    seed: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, WorldConfig):
            return NotImplemented
        same_obstacle = (self.obstacle is None and other.obstacle is None) or (
            self.obstacle is not None
            and other.obstacle is not None
            and np.array_equal(self.obstacle, other.obstacle)
        )
        return (
            self.domain == other.domain
            and np.array_equal(self.objects, other.objects)
            and self.colors == other.colors
            and same_obstacle
            and np.array_equal(self.start, other.start)
            and self.seed == other.seed
        )


@dataclass
class WorldState:
    domain: str
    objects: np.ndarray  # (n, 2)
    colors: tuple[int, ...]
    obstacle: np.ndarray | None
    effector: np.ndarray | None  # (3,) x, y, theta
    z: float = 0.0
    gripper: float = GRIP_OPEN
    held: int | None = None
    support: list = field(default_factory=list)  # index of block underneath, or None

    @classmethod
    def from_config(cls, world: WorldConfig) -> "WorldState":
        n = len(world.objects)
        return cls(
            domain=world.domain,
            objects=world.objects.astype(np.float64).copy(),
            colors=tuple(world.colors),
            obstacle=None if world.obstacle is None else world.obstacle.astype(np.float64).copy(),
            effector=world.start.astype(np.float64).copy(),
            z=0.0,
            gripper=GRIP_OPEN if world.domain == "stack" else NAV_GRIPPER,
            support=[None] * n,
        )

    def copy(self) -> "WorldState":
        return WorldState(
            self.domain, self.objects.copy(), self.colors,
            None if self.obstacle is None else self.obstacle,
            None if self.effector is None else self.effector.copy(),
            self.z, self.gripper, self.held, list(self.support),
        )

    def index_of(self, color: int) -> int | None:
        return self.colors.index(color) if color in self.colors else None

    def is_free(self, i: int) -> bool:
        """Block ``i`` is not carried and nothing rests on it."""
        return self.held != i and all(s != i for s in self.support)

    def stacked(self) -> bool:
        return any(s is not None and i != self.held for i, s in enumerate(self.support))

    def observation(self) -> Observation:
        x, y, theta = self.effector
        return Observation(render(self), np.array([x, y, theta / math.pi]), self.gripper)


@dataclass
class Command:
    """Low-level command: a pose waypoint, a height target and a gripper actuation."""

    waypoint: np.ndarray  # (3,) x, y, theta
    z: float
    grip: str | None = None  # None | "open" | "close"

    @classmethod
    def hold(cls, state: WorldState) -> "Command":
        return cls(state.effector.copy(), state.z)


# -- sampling ----------------------------------------------------------------------


def segment_hits_square(p0, p1, centre, half: float) -> bool:
    """Whether segment ``p0 -> p1`` meets the closed axis-aligned square."""
    p0 = np.asarray(p0[:2], dtype=np.float64)
    d = np.asarray(p1[:2], dtype=np.float64) - p0
    lo_t, hi_t = 0.0, 1.0
    for k in range(2):
        lo = centre[k] - half - p0[k]
        hi = centre[k] + half - p0[k]
        if abs(d[k]) < 1e-15:
            if lo > 0 or hi < 0:
                return False
            continue
        t0, t1 = lo / d[k], hi / d[k]
        if t0 > t1:
            t0, t1 = t1, t0
        lo_t, hi_t = max(lo_t, t0), min(hi_t, t1)
        if lo_t > hi_t:
            return False
    return True


def reachable_blocks(world: WorldConfig) -> list[int]:
    """Blocks whose straight low-height path from the start avoids the obstacle."""
    if world.obstacle is None:
        return list(range(len(world.objects)))
    return [
        i
        for i, p in enumerate(world.objects)
        if not segment_hits_square(world.start, p, world.obstacle, OBSTACLE_HALF)
    ]


def sample_world(domain: str, seed: int, n_objects: int = 4) -> WorldConfig:
    """Random layout with pairwise centre separation >= ``MIN_SEPARATION``.

    Stacking layouts are resampled until at least one block is reachable
    from the start pose without crossing the obstacle.
    """
    if domain not in ("stack", "nav"):
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng(seed)
    n_points = n_objects + 1 + (domain == "stack")
    for _ in range(MAX_SAMPLING_TRIES):
        pts = rng.uniform(-PLACEMENT_BOUND, PLACEMENT_BOUND, size=(n_points, 2))
        theta = rng.uniform(-math.pi, math.pi)
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if dist[np.triu_indices(n_points, 1)].min() < MIN_SEPARATION:
            continue
        world = WorldConfig(
            domain=domain,
            objects=pts[:n_objects].copy(),
            colors=tuple(range(n_objects)),
            obstacle=pts[n_objects].copy() if domain == "stack" else None,
            start=np.array([*pts[-1], theta]),
            seed=seed,
        )
        if domain == "stack" and not reachable_blocks(world):
            continue
        return world
    raise WorldSamplingError(f"no valid {domain} layout after {MAX_SAMPLING_TRIES} tries (seed {seed})")


# -- kinematics --------------------------------------------------------------------


def _wrap(angle: float) -> float:
    if -math.pi <= angle < math.pi:
        return angle  # exact, so a held pose stays bit-identical
    return (angle + math.pi) % (2 * math.pi) - math.pi


def _approach(current: float, target: float, limit: float) -> float:
    delta = target - current
    return target if abs(delta) <= limit else current + math.copysign(limit, delta)


def _nearest_free(state: WorldState, exclude: int | None) -> int | None:
    best, best_d = None, GRASP_RADIUS
    for i, p in enumerate(state.objects):
        if i == exclude or not state.is_free(i):
            continue
        d = float(np.hypot(*(p - state.effector[:2])))
        if d <= best_d:
            best, best_d = i, d
    return best


def step(state: WorldState, cmd: Command) -> WorldState:
    """Advance one tick.  The input state is not modified."""
    new = state.copy()
    pos = new.effector
    delta = np.asarray(cmd.waypoint[:2], dtype=np.float64) - pos[:2]
    dist = float(np.hypot(*delta))
    if dist > MAX_STEP:
        pos[:2] += delta * (MAX_STEP / dist)
    else:
        pos[:2] = cmd.waypoint[:2]
    turn = _wrap(float(cmd.waypoint[2]) - pos[2])
    pos[2] = _wrap(pos[2] + (turn if abs(turn) <= MAX_TURN else math.copysign(MAX_TURN, turn)))
    if abs(turn) <= MAX_TURN:
        pos[2] = _wrap(float(cmd.waypoint[2]))
    new.z = _approach(new.z, cmd.z, MAX_LIFT)
    if new.held is not None:
        new.objects[new.held] = pos[:2]
    if cmd.grip == "close" and new.held is None:
        target = _nearest_free(new, None) if new.z < 0.5 else None
        if target is not None:
            new.held = target
            new.support[target] = None
            new.objects[target] = pos[:2]
        new.gripper = GRIP_HOLDING if target is not None else GRIP_EMPTY
    elif cmd.grip == "open":
        if new.held is not None:
            held, new.held = new.held, None
            below = _nearest_free(new, held)
            new.support[held] = below
            new.objects[held] = new.objects[below] if below is not None else pos[:2]
        new.gripper = GRIP_OPEN
    return new


def collides(prev: WorldState, new: WorldState) -> bool:
    if new.obstacle is None or min(prev.z, new.z) >= 0.5:
        return False
    return segment_hits_square(prev.effector, new.effector, new.obstacle, OBSTACLE_HALF)


# -- rendering -------------------------------------------------------------------------


def to_pixel(xy) -> tuple[float, float]:
    """World ``(x, y)`` to fractional ``(col, row)`` on the keypoint grid."""
    return (xy[0] + 1) / 2 * (IMAGE_SIZE - 1), (xy[1] + 1) / 2 * (IMAGE_SIZE - 1)


def _span(centre: float, size: int) -> slice:
    lo = math.ceil(centre - size / 2)
    hi = math.ceil(centre + size / 2)
    return slice(max(lo, 0), max(min(hi, IMAGE_SIZE), 0))


def _square(img, xy, size, color) -> None:
    col, row = to_pixel(xy)
    img[_span(row, size), _span(col, size)] = PALETTE[color]


def _marker(img, pose, high: bool) -> None:
    col, row = to_pixel(pose[:2])
    c, s = math.cos(pose[2]), math.sin(pose[2])
    r0, r1 = int(math.floor(row - 5)), int(math.ceil(row + 5))
    c0, c1 = int(math.floor(col - 5)), int(math.ceil(col + 5))
    rows = np.arange(max(r0, 0), min(r1, IMAGE_SIZE))
    cols = np.arange(max(c0, 0), min(c1, IMAGE_SIZE))
    if not len(rows) or not len(cols):
        return
    dr, dc = np.meshgrid(rows - row, cols - col, indexing="ij")
    u = c * dc + s * dr
    v = -s * dc + c * dr
    half = MARKER_PX / 2
    inside = (u >= -half) & (u < half) & (v >= -half) & (v < half)
    core = (u >= 1 - half) & (u < half - 1) & (v >= 1 - half) & (v < half - 1)
    patch = img[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    patch[inside & ~core] = PALETTE["marker_border"]
    patch[core] = PALETTE["marker_high" if high else "marker_low"]


def render(state: WorldState) -> np.ndarray:
    """Rasterise to a ``(64, 64, 3)`` float32 image."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = PALETTE["background"]
    if state.obstacle is not None:
        _square(img, state.obstacle, OBSTACLE_PX, "obstacle")
    n = len(state.objects)
    on_table = [i for i in range(n) if state.support[i] is None and i != state.held] if state.support else list(range(n))
    for i in on_table:
        _square(img, state.objects[i], BLOCK_PX, COLORS[state.colors[i]])
        for j in range(n):
            if state.support and state.support[j] == i:
                _square(img, state.objects[i], BLOCK_PX // 2, COLORS[state.colors[j]])
    if state.held is not None:
        _square(img, state.effector[:2], BLOCK_PX, COLORS[state.colors[state.held]])
    if state.effector is not None:
        _marker(img, state.effector, state.z >= 0.5)
    return img


# -- episodes ---------------------------------------------------------------------------


@dataclass
class Keyframe:
    obs: Observation
    action: int
    reward_to_go: float


@dataclass
class Episode:
    keyframes: list[Keyframe]
    success: bool
    domain: str
    world: WorldConfig | None = None
    failure_reason: str = "none"


@dataclass
class Trajectory:
    """Every simulator state of a run plus what counts as success."""

    domain: str
    states: list[WorldState]
    goal: int | None = None  # landmark index for navigation
    budget: int = STEP_BUDGET


def label_outcome(traj: Trajectory) -> tuple[bool, str]:
    """``(success, reason)`` with reason ``"none"``, ``"collision"`` or ``"timeout"``."""
    for prev, new in zip(traj.states, traj.states[1:]):
        if collides(prev, new):
            return False, "collision"
    final = traj.states[-1]
    within_budget = len(traj.states) - 1 <= traj.budget
    if traj.domain == "stack":
        ok = final.stacked()
    else:
        goal = final.objects[traj.goal]
        ok = float(np.hypot(*(final.effector[:2] - goal))) <= NAV_RADIUS
    return (True, "none") if ok and within_budget else (False, "timeout")


class Simulator:
    """Runs high-level actions through :func:`step`, watching collisions and the budget."""

    def __init__(self, world: WorldConfig, budget: int = STEP_BUDGET):
        self.world = world
        self.state = WorldState.from_config(world)
        self.states = [self.state]
        self.budget = budget
        self.status = "active"  # active | collision | timeout

    @property
    def steps(self) -> int:
        return len(self.states) - 1

    def copy(self) -> "Simulator":
        other = copy.copy(self)
        other.states = list(self.states)
        return other

    def tick(self, cmd: Command) -> bool:
        """Apply one command; False once the run has stopped."""
        if self.status != "active":
            return False
        if self.steps >= self.budget:
            self.status = "timeout"
            return False
        new = step(self.state, cmd)
        self.states.append(new)
        hit = collides(self.state, new)
        self.state = new
        if hit:
            self.status = "collision"
            return False
        return True

    def move_to(self, xy, theta: float, z: float | None = None) -> bool:
        target = np.array([xy[0], xy[1], theta])
        z = self.state.z if z is None else z
        while not (np.allclose(self.state.effector, target, atol=0, rtol=0) and self.state.z == z):
            if not self.tick(Command(target, z)):
                return False
        return True

    def set_height(self, z: float) -> bool:
        return self.move_to(self.state.effector[:2], self.state.effector[2], z)

    def actuate(self, grip: str) -> bool:
        return self.tick(Command(self.state.effector.copy(), self.state.z, grip))

    def idle(self) -> None:
        while self.tick(Command.hold(self.state)):
            pass

    def trajectory(self, goal: int | None = None) -> Trajectory:
        return Trajectory(self.world.domain, self.states, goal, self.budget)

    # high-level actions -----------------------------------------------------------

    def grasp(self, color: int, offset=(0.0, 0.0)) -> bool:
        i = self.state.index_of(color)
        xy = np.clip(self.state.objects[i] + offset, -WAYPOINT_BOUND, WAYPOINT_BOUND)
        return self.move_to(xy, 0.0) and self.set_height(0.0) and self.actuate("close")

    def lift(self) -> bool:
        return self.set_height(1.0)

    def place_on(self, color: int, offset=(0.0, 0.0), via=None) -> bool:
        i = self.state.index_of(color)
        if via is not None and not self.move_to(via, 0.0):
            return False
        xy = np.clip(self.state.objects[i] + offset, -WAYPOINT_BOUND, WAYPOINT_BOUND)
        return self.move_to(xy, 0.0) and self.set_height(0.0) and self.actuate("open")

    def investigate(self, landmark: int, offset=(0.0, 0.0)) -> bool:
        xy = np.clip(self.state.objects[landmark] + offset, -WAYPOINT_BOUND, WAYPOINT_BOUND)
        d = xy - self.state.effector[:2]
        heading = math.atan2(d[1], d[0]) if np.hypot(*d) > 0 else self.state.effector[2]
        return self.move_to(xy, heading)


BEHAVIORS = ("expert", "noisy", "adversarial")


def scripted_episode(
    world: WorldConfig,
    behavior: str = "expert",
    seed: int = 0,
    p_err: float = 0.2,
    stall_prob: float = 0.2,
    plan: tuple[int, int] | None = None,
) -> Episode:
    """Run a scripted controller and record a keyframe at each action boundary.

    ``plan`` fixes the stacking choice ``(grasp colour, target colour)`` or
    the navigation landmark as ``(landmark, _)``; by default it is drawn
    from ``seed``.
    """
    if behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior {behavior!r}")
    rng = np.random.default_rng(seed)
    sim = Simulator(world)
    keyframes: list[Keyframe] = []

    def mark(action: int) -> None:
        keyframes.append(Keyframe(sim.state.observation(), action, 0.0))

    def offset() -> np.ndarray:
        return rng.normal(0.0, p_err, size=2) if behavior == "noisy" else np.zeros(2)

    if world.domain == "nav":
        goal = int(rng.integers(len(world.objects))) if plan is None else plan[0]
        action = goal
        mark(action)
        if behavior == "adversarial":
            sim.idle()
        else:
            sim.investigate(goal, offset())
        mark(action)
        traj = sim.trajectory(goal)
    else:
        reachable = [world.colors[i] for i in reachable_blocks(world)]
        if plan is None:
            c1 = int(rng.choice(reachable))
            c2 = int(rng.choice([c for c in world.colors if c != c1]))
        else:
            c1, c2 = plan
        mark(grasp_id(c1))
        ok = sim.grasp(c1, offset())
        if behavior == "adversarial":
            stall = rng.random() < stall_prob
            if ok and stall:
                mark(LIFT)
                sim.idle()
            elif ok:
                mark(place_id(c2))
                # skip the lift and drag through the obstacle at low height
                sim.place_on(c2, via=world.obstacle)
                sim.idle()
        else:
            if ok:
                mark(LIFT)
                ok = sim.lift()
            if ok:
                mark(place_id(c2))
                ok = sim.place_on(c2, offset())
        mark(DONE)
        traj = sim.trajectory()
    success, reason = label_outcome(traj)
    for kf in keyframes:
        kf.reward_to_go = float(success)
    return Episode(keyframes, success, world.domain, world, reason)


MIXED_RECIPE = {"expert": 0.45, "noisy": 0.35, "adversarial": 0.20}


def generate_episodes(
    domain: str,
    n: int,
    seed: int,
    recipe: dict[str, float] | None = None,
    p_err: float = 0.2,
) -> list[Episode]:
    """``n`` episodes on fresh worlds, behaviours assigned in the given proportions."""
    recipe = dict(MIXED_RECIPE if recipe is None else recipe)
    total = sum(recipe.values())
    if total <= 0:
        raise ValueError("behaviour fractions must sum to a positive value")
    names = [b for b in BEHAVIORS if recipe.get(b, 0) > 0]
    probs = np.array([recipe[b] for b in names]) / total
    counts = np.floor(probs * n).astype(int)
    counts[: n - counts.sum()] += 1
    behaviors = [b for b, c in zip(names, counts) for _ in range(c)]
    rng = np.random.default_rng(seed)
    rng.shuffle(behaviors)
    episodes = []
    for i, behavior in enumerate(behaviors):
        world = sample_world(domain, seed * 1_000_003 + i)
        episodes.append(scripted_episode(world, behavior, seed * 1_000_003 + i, p_err=p_err))
    return episodes


# -- bimodal toy ----------------------------------------------------------------------

TOY_LAYOUT = np.array([[-0.45, 0.2], [-0.45, -0.6], [0.45, 0.2], [0.45, -0.6]])  # red, green, blue, yellow
TOY_OBSTACLE = np.array([0.0, 0.75])
TOY_START = np.array([0.0, -0.2, 0.0])
COARSE_ACTIONS = ["grasp", "lift", "place", "done"]


def toy_world(seed: int = 0) -> WorldConfig:
    """Fixed stacking layout with red and blue mirrored about the start pose."""
    return WorldConfig("stack", TOY_LAYOUT.copy(), (0, 1, 2, 3), TOY_OBSTACLE.copy(), TOY_START.copy(), seed)


def coarse_action(action: int) -> int:
    """Collapse a stacking action id onto ``COARSE_ACTIONS`` (drops the colour)."""
    kind, _ = decode_action("stack", action)
    return COARSE_ACTIONS.index("place" if kind == "place_on" else kind)


def toy_episodes(n: int, seed: int) -> list[Episode]:
    """Expert runs on :func:`toy_world` grasping red or blue with equal odds.

    Actions are coarse, so the first action does not say which block is taken.
    The two modes get exactly equal counts in shuffled order, so the data
    median under an absolute-error loss is not pulled toward either mode.
    """
    rng = np.random.default_rng(seed)
    red, blue = COLORS.index("red"), COLORS.index("blue")
    picks = rng.permutation([red] * (n // 2) + [blue] * (n - n // 2))
    out = []
    for i in range(n):
        c1 = int(picks[i])
        c2 = COLORS.index("green") if c1 == 0 else COLORS.index("yellow")
        ep = scripted_episode(toy_world(seed), "expert", seed + i, plan=(c1, c2))
        for kf in ep.keyframes:
            kf.action = coarse_action(kf.action)
        out.append(ep)
    return out


def toy_modes() -> np.ndarray:
    """The two normalised grasp poses ``(x, y, theta/pi)`` the toy expert can reach."""
    return np.array([[*TOY_LAYOUT[0], 0.0], [*TOY_LAYOUT[2], 0.0]])

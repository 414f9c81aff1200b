"""A deterministic 2D pick-and-place world with analytic ground-truth masks.

Arena coordinates are ``(x, y) in [0, 1]^2`` with y pointing down the image.
Pixel ``(row, col)`` is sampled at its centre ``((col + .5) / S, (row + .5) / S)``,
and both the renderer and :func:`gt_mask` use the same inside tests, so the
mask is exactly the set of pixels painted by the effector or the object.

The proprioceptive state carries the effector, gripper, held flag and goal;
the object is only visible in the image, so a policy has to look.

State slots:  ``[ee_x, ee_y, gripper, held, goal_x, goal_y, 0, ...]``
Action slots: ``[dx, dy, grip, 0, ...]``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mcr.errors import EpisodeFinishedError, InputError, SpecError
from mcr.trajectory_data import Trajectory, write_dataset

BACKGROUND = (128, 128, 128)
EFFECTOR = (230, 50, 50)
OBJECT = (50, 70, 230)
DISTRACTOR = ((50, 160, 60), (80, 205, 100))
SEMANTIC_STATE = 6
SEMANTIC_ACTION = 3
INSTRUCTIONS = (
    "pick up the blue block and place it on the goal",
    "move the blue cube to the target",
    "grasp the block and carry it to the goal",
    "put the blue block at the marked spot",
)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    effector_radius: float = 0.06
    object_half_width: float = 0.06
    max_step: float = 0.05
    horizon: int = 80
    goal_tolerance: float = 0.04
    state_dim: int = 14
    action_dim: int = 7
    # fixed distractor rectangle (x0, y0, x1, y1) and its checker cell size
    distractor: tuple[float, float, float, float] = (0.04, 0.70, 0.30, 0.96)
    distractor_cell: float = 0.065
    task: str = "pick_place"

    def __post_init__(self) -> None:
        if self.max_step <= 0 or self.goal_tolerance <= 0:
            raise SpecError("max_step and goal_tolerance must be positive")
        if self.effector_radius <= 0 or self.object_half_width <= 0:
            raise SpecError("radii must be positive")
        if self.state_dim < SEMANTIC_STATE or self.action_dim < SEMANTIC_ACTION:
            raise SpecError(
                f"state_dim >= {SEMANTIC_STATE} and action_dim >= {SEMANTIC_ACTION} required"
            )
        if self.horizon < self.expert_step_bound:
            raise SpecError(
                f"horizon {self.horizon} below the expert path bound {self.expert_step_bound}"
            )

    @property
    def margin(self) -> float:
        return max(self.effector_radius, self.object_half_width)

    @property
    def reach(self) -> float:
        return self.effector_radius + self.object_half_width

    @property
    def min_separation(self) -> float:
        return 2 * self.reach

    @property
    def expert_step_bound(self) -> int:
        """Steps the expert needs in the worst case.

        Each leg (to the object, then to the goal) covers at most the arena
        span per axis at ``max_step`` per step; one extra step per leg for the
        grip and the final settle.
        """
        span = 1.0 - 2 * self.margin
        return 2 * math.ceil(span / self.max_step) + 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distractor"] = list(self.distractor)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "distractor" in d:
            d["distractor"] = tuple(d["distractor"])
        return cls(**d)


@dataclass(frozen=True)
class WorldState:
    effector: tuple[float, float]
    gripper: int
    object: tuple[float, float]
    goal: tuple[float, float]
    held: bool = False

    def __post_init__(self) -> None:
        for name in ("effector", "object", "goal"):
            x, y = getattr(self, name)
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise InputError(f"{name} {x, y} outside the unit arena")
        if self.held and tuple(self.object) != tuple(self.effector):
            raise InputError("a held object must sit at the effector")


@dataclass
class Observation:
    image: np.ndarray
    state: np.ndarray
    world: WorldState


def state_vector(world: WorldState, config: SynthConfig) -> np.ndarray:
    s = np.zeros(config.state_dim, dtype=np.float32)
    s[:SEMANTIC_STATE] = (
        world.effector[0], world.effector[1], world.gripper, float(world.held),
        world.goal[0], world.goal[1],
    )
    return s


def _pixel_centres(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return c[None, :], c[:, None]  # x varies along columns, y along rows


def effector_pixels(world: WorldState, config: SynthConfig) -> np.ndarray:
    px, py = _pixel_centres(config.image_size)
    ex, ey = world.effector
    return (px - ex) ** 2 + (py - ey) ** 2 <= config.effector_radius ** 2


def object_pixels(world: WorldState, config: SynthConfig) -> np.ndarray:
    px, py = _pixel_centres(config.image_size)
    ox, oy = world.object
    r = config.object_half_width
    return (np.abs(px - ox) <= r) & (np.abs(py - oy) <= r)


def gt_mask(world: WorldState, config: SynthConfig) -> np.ndarray:
    """Pixels covered by the effector disc or the object square."""
    return effector_pixels(world, config) | object_pixels(world, config)


def _distractor_layer(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    px, py = _pixel_centres(config.image_size)
    x0, y0, x1, y1 = config.distractor
    inside = (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    checker = (np.floor((px - x0) / config.distractor_cell)
               + np.floor((py - y0) / config.distractor_cell)) % 2 == 1
    return inside, checker


def render(world: WorldState, config: SynthConfig) -> np.ndarray:
    """Flat-shaded ``(S, S, 3)`` uint8 image of the scene."""
    S = config.image_size
    img = np.empty((S, S, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    inside, checker = _distractor_layer(config)
    img[inside & ~checker] = DISTRACTOR[0]
    img[inside & checker] = DISTRACTOR[1]
    img[object_pixels(world, config)] = OBJECT
    img[effector_pixels(world, config)] = EFFECTOR
    return img


def _clip_step(delta: np.ndarray, max_step: float) -> np.ndarray:
    return np.clip(delta, -max_step, max_step)


def expert_action(world: WorldState, config: SynthConfig) -> np.ndarray:
    """Greedy controller: go to the object, grip on contact, carry it to the goal."""
    a = np.zeros(config.action_dim, dtype=np.float32)
    obj = np.asarray(world.object)
    goal = np.asarray(world.goal)
    ee = np.asarray(world.effector)
    if np.linalg.norm(obj - goal) <= config.goal_tolerance:
        return a
    if world.held:
        delta = _clip_step(goal - ee, config.max_step)
        a[:3] = (delta[0], delta[1], 1.0)
        return a
    delta = _clip_step(obj - ee, config.max_step)
    grip = 1.0 if np.linalg.norm(ee + delta - obj) <= config.reach else 0.0
    a[:3] = (delta[0], delta[1], grip)
    return a


def transition(world: WorldState, action: np.ndarray, config: SynthConfig) -> WorldState:
    """Pure dynamics: clipped move, then grip/release, then carry."""
    action = np.asarray(action, dtype=np.float64)
    delta = _clip_step(action[:2], config.max_step)
    ee = np.clip(np.asarray(world.effector) + delta, 0.0, 1.0)
    gripper = int(action[2] >= 0.5)
    held = world.held
    obj = np.asarray(world.object, dtype=np.float64)
    if gripper and not held and np.linalg.norm(ee - obj) <= config.reach:
        held = True
    elif not gripper:
        held = False
    if held:
        obj = ee.copy()
    return WorldState(
        effector=(float(ee[0]), float(ee[1])),
        gripper=gripper,
        object=(float(obj[0]), float(obj[1])),
        goal=world.goal,
        held=held,
    )


def is_success(world: WorldState, config: SynthConfig) -> bool:
    return bool(np.linalg.norm(np.subtract(world.object, world.goal)) <= config.goal_tolerance)


class SynthEnv:
    """Single-threaded episode state machine over :class:`WorldState`."""

    def __init__(self, config: SynthConfig | None = None):
        self.config = config or SynthConfig()
        self.world: WorldState | None = None
        self.steps = 0
        self.done = True

    def spawn(self) -> "SynthEnv":
        return SynthEnv(self.config)

    def sample_world(self, rng: np.random.Generator) -> WorldState:
        cfg = self.config
        lo, hi = cfg.margin, 1.0 - cfg.margin
        while True:
            pts = rng.uniform(lo, hi, size=(3, 2))
            d = [np.linalg.norm(pts[i] - pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
            if min(d) >= cfg.min_separation:
                break
        return WorldState(
            effector=(float(pts[0, 0]), float(pts[0, 1])),
            gripper=0,
            object=(float(pts[1, 0]), float(pts[1, 1])),
            goal=(float(pts[2, 0]), float(pts[2, 1])),
        )

    def observe(self) -> Observation:
        assert self.world is not None
        return Observation(render(self.world, self.config), state_vector(self.world, self.config),
                           self.world)

    def reset(self, rng: np.random.Generator, world: WorldState | None = None) -> Observation:
        self.world = world if world is not None else self.sample_world(rng)
        self.steps = 0
        self.done = False
        return self.observe()

    def step(self, action: np.ndarray) -> tuple[Observation, bool]:
        if self.done or self.world is None:
            raise EpisodeFinishedError("episode finished; call reset()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.config.action_dim,):
            raise InputError(f"action shape {action.shape} != ({self.config.action_dim},)")
        self.world = transition(self.world, action, self.config)
        self.steps += 1
        success = is_success(self.world, self.config)
        if success or self.steps >= self.config.horizon:
            self.done = True
        return self.observe(), success


def rollout_expert(
    env: SynthEnv, rng: np.random.Generator, world: WorldState | None = None
) -> tuple[list[Observation], list[np.ndarray], bool]:
    obs = env.reset(rng, world)
    observations, actions = [obs], []
    success = False
    while not env.done:
        a = expert_action(obs.world, env.config)
        obs, success = env.step(a)
        observations.append(obs)
        actions.append(a)
    return observations, actions, success


def generate_demos(
    env: SynthEnv,
    n: int,
    rng: np.random.Generator,
    out_dir: str | Path | None = None,
    id_prefix: str | None = None,
) -> list[Trajectory]:
    """``n`` successful expert rollouts, with per-frame ground-truth masks.

    When ``out_dir`` is given the set is also written as a dataset whose
    ``index.json`` records the generating config.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    cfg = env.config
    prefix = id_prefix or cfg.task
    demos, initial_worlds = [], {}
    for i in range(n):
        observations, actions, success = rollout_expert(env, rng)
        initial_worlds[f"{prefix}_{i:05d}"] = asdict(observations[0].world)
        if not success:
            raise RuntimeError(f"expert failed on demo {i}; geometry bound violated")
        demos.append(
            Trajectory(
                frames=np.stack([o.image for o in observations]),
                states=np.stack([o.state for o in observations]),
                actions=np.stack(actions).reshape(len(actions), cfg.action_dim),
                instruction=INSTRUCTIONS[int(rng.integers(len(INSTRUCTIONS)))],
                id=f"{prefix}_{i:05d}",
                masks=np.stack([gt_mask(o.world, cfg) for o in observations]),
            )
        )
    if out_dir is not None:
        write_dataset(
            demos, out_dir,
            extra={"synth_config": cfg.to_dict(), "initial_worlds": initial_worlds},
        )
    return demos


def replay(
    env: SynthEnv, world: WorldState, actions: Sequence[np.ndarray]
) -> tuple[list[WorldState], bool]:
    """Re-run ``actions`` from ``world``; returns the visited states and final success."""
    env.reset(np.random.default_rng(0), world=world)
    worlds, success = [world], False
    for a in actions:
        obs, success = env.step(a)
        worlds.append(obs.world)
    return worlds, success


def world_from_dict(d: dict) -> WorldState:
    """Inverse of ``asdict`` as stored in a dataset's ``initial_worlds``."""
    return WorldState(
        effector=tuple(d["effector"]),
        gripper=int(d["gripper"]),
        object=tuple(d["object"]),
        goal=tuple(d["goal"]),
        held=bool(d["held"]),
    )

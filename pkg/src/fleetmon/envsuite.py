"""Synthetic 2D multi-task manipulation suite with image observations.

Five tasks on the unit workspace: reach, push, lift-carry, two-stage reach,
and detour-reach around a hazard strip. Dynamics are deterministic point-mass
updates; observations are rendered 3x32x32 images plus a 4-d proprio vector.
Perturbed episodes scale the dynamics gain and render a novel distractor,
giving out-of-distribution episodes a ground-truth label.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from .seeding import seeded_rng

IMAGE_SIZE = 32
WORKSPACE_MARGIN = 0.03          # dynamics clip bound
SAFE_MARGIN = 0.025              # corridor: positions at the clip bound are unsafe
STEP_GAIN = 0.08
GRIP_RATE = 0.5
CONTACT_RADIUS = 0.07
GRASP_RADIUS = 0.06
STALL_EPS = 0.012
STALL_STEPS = 15
PROGRESS_EPS = 0.004
PROGRESS_STALL_STEPS = 12
PROGRESS_STALL_AFTER = 0.5       # fraction of horizon before progress stall counts

TASK_NAMES = ("reach", "push", "liftcarry", "twostage", "detour")


class EnvConfigError(Exception):
    pass


class EnvProtocolError(Exception):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    horizon: int
    goal_params: dict
    perturbation_profile: dict = field(default_factory=lambda: {"gain_scale": 0.6, "distractor": True})

    def validate(self):
        if self.horizon < 1:
            raise EnvConfigError(f"task {self.task_id}: horizon must be >= 1")
        if float(self.goal_params.get("goal_radius", 0.0)) <= 0.0:
            raise EnvConfigError(f"task {self.task_id}: goal region must have positive area")


@dataclass
class EnvState:
    agent: np.ndarray            # (2,) position
    grip: float
    objects: np.ndarray          # (K, 2) positions, possibly K=0
    phase: int                   # task-specific stage (grasped / waypoint visited / released)
    goal_reached: bool
    step_count: int
    stall_count: int = 0
    prog_stage: int = 0
    prog_best: float = 0.0
    prog_count: int = 0

    def copy(self) -> "EnvState":
        return dataclasses.replace(self, agent=self.agent.copy(), objects=self.objects.copy())


@dataclass
class Observation:
    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    proprio: np.ndarray          # (4,) float32: x, y, grip, step/horizon


def clamp_action(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (3,) or not np.all(np.isfinite(delta)):
        raise EnvProtocolError(f"action must be a finite 3-vector, got {delta!r}")
    return np.clip(delta, -1.0, 1.0)


def default_suite(horizon: int = 60, image_size: int = IMAGE_SIZE) -> "EnvSuite":
    tasks = [
        TaskSpec(0, "reach", horizon, {
            "goal": (0.80, 0.80), "goal_radius": 0.09,
            "agent_box": (0.10, 0.30, 0.10, 0.30),
        }),
        TaskSpec(1, "push", horizon, {
            "goal": (0.85, 0.50), "goal_radius": 0.10,
            "agent_box": (0.08, 0.22, 0.35, 0.65),
            "object": (0.45, 0.50), "object_jitter": 0.06,
        }),
        TaskSpec(2, "liftcarry", horizon, {
            "goal": (0.80, 0.82), "goal_radius": 0.10,
            "agent_box": (0.08, 0.22, 0.40, 0.60),
            "object": (0.50, 0.18), "object_jitter": 0.06,
        }),
        TaskSpec(3, "twostage", horizon, {
            "goal": (0.80, 0.20), "goal_radius": 0.09,
            "waypoint": (0.20, 0.80), "waypoint_radius": 0.08,
            "agent_box": (0.40, 0.60, 0.35, 0.55),
        }),
        TaskSpec(4, "detour", horizon, {
            "goal": (0.85, 0.50), "goal_radius": 0.09,
            "agent_box": (0.08, 0.20, 0.40, 0.60),
            "hazard": (0.40, 0.60, 0.12, 0.84),   # x0, x1, y0, y1
        }),
    ]
    return EnvSuite(tasks=tasks, image_size=image_size)


@dataclass
class EnvSuite:
    tasks: list[TaskSpec]
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise EnvConfigError("duplicate task ids in suite")
        for t in self.tasks:
            t.validate()

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise EnvConfigError(f"unknown task id {task_id}")

    def make_env(self, task_id: int, perturb: bool = False) -> "Env":
        return Env(self.task(task_id), image_size=self.image_size, perturb=perturb)

    # -- suite config file ---------------------------------------------------

    def save(self, path):
        doc = {
            "image_size": self.image_size,
            "tasks": [
                {
                    "task_id": t.task_id, "name": t.name, "horizon": t.horizon,
                    "goal_params": {k: list(v) if isinstance(v, tuple) else v
                                    for k, v in t.goal_params.items()},
                    "perturbation_profile": t.perturbation_profile,
                }
                for t in self.tasks
            ],
        }
        with open(path, "w") as f:
            yaml.safe_dump(doc, f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EnvSuite":
        with open(path) as f:
            doc = yaml.safe_load(f)
        tasks = []
        for td in doc["tasks"]:
            gp = {k: tuple(v) if isinstance(v, list) else v for k, v in td["goal_params"].items()}
            tasks.append(TaskSpec(td["task_id"], td["name"], td["horizon"], gp,
                                  td.get("perturbation_profile", {"gain_scale": 0.6, "distractor": True})))
        return cls(tasks=tasks, image_size=doc.get("image_size", IMAGE_SIZE))


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _in_disc(p, center, radius) -> bool:
    return _dist(p, center) < radius


class Env:
    """A single task environment; one caller steps an instance at a time."""

    def __init__(self, task: TaskSpec, image_size: int = IMAGE_SIZE, perturb: bool = False):
        self.task = task
        self.perturb = perturb
        self.image_size = image_size
        self.gain = STEP_GAIN * (task.perturbation_profile.get("gain_scale", 0.6) if perturb else 1.0)
        self._distractor: tuple | None = None
        n = image_size
        cols = (np.arange(n) + 0.5) / n
        rows = 1.0 - (np.arange(n) + 0.5) / n
        self._px, self._py = np.meshgrid(cols, rows)   # (n, n) pixel centers

    # -- lifecycle -------------------------------------------------------------

    def reset(self, seed: int) -> tuple[EnvState, Observation]:
        gp = self.task.goal_params
        rng = seeded_rng("env-reset", self.task.task_id, seed)
        x0, x1, y0, y1 = gp["agent_box"]
        agent = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        objects = np.zeros((0, 2))
        if "object" in gp:
            jitter = gp.get("object_jitter", 0.0)
            obj = np.asarray(gp["object"]) + rng.uniform(-jitter, jitter, size=2)
            objects = obj[None, :]
        if self.perturb and self.task.perturbation_profile.get("distractor", True):
            drng = seeded_rng("env-distractor", self.task.task_id, seed)
            self._distractor = (drng.uniform(0.55, 0.75), drng.uniform(0.15, 0.35))
        else:
            self._distractor = None
        state = EnvState(agent=agent, grip=0.0, objects=objects, phase=0,
                         goal_reached=False, step_count=0)
        stage, value = self._progress(state)
        state.prog_stage, state.prog_best = stage, value
        return state, self.observe(state)

    def step(self, state: EnvState, action) -> tuple[EnvState, Observation, int]:
        if state.step_count >= self.task.horizon:
            raise EnvProtocolError("episode already terminated")
        delta = clamp_action(action)
        s = state.copy()
        prev_agent = s.agent.copy()

        s.agent = np.clip(s.agent + self.gain * delta[:2], WORKSPACE_MARGIN, 1.0 - WORKSPACE_MARGIN)
        s.grip = float(np.clip(s.grip + GRIP_RATE * delta[2], 0.0, 1.0))
        self._interact(s, prev_agent, s.agent - prev_agent)
        s.step_count += 1

        if np.hypot(*(s.agent - prev_agent)) < STALL_EPS:
            s.stall_count += 1
        else:
            s.stall_count = 0

        stage, value = self._progress(s)
        if stage != s.prog_stage:
            s.prog_stage, s.prog_best, s.prog_count = stage, value, 0
        elif value < s.prog_best - PROGRESS_EPS:
            s.prog_best, s.prog_count = value, 0
        else:
            s.prog_count += 1

        if not s.goal_reached and self._goal_predicate(s):
            s.goal_reached = True
        return s, self.observe(s), int(s.goal_reached)

    # -- task mechanics ----------------------------------------------------------

    def _interact(self, s: EnvState, prev_agent: np.ndarray, agent_delta: np.ndarray):
        name = self.task.name
        if name == "push" and len(s.objects):
            # contact judged before the move, so a carried object stays carried
            if _dist(prev_agent, s.objects[0]) < CONTACT_RADIUS:
                s.objects[0] = np.clip(s.objects[0] + agent_delta, WORKSPACE_MARGIN, 1.0 - WORKSPACE_MARGIN)
        elif name == "liftcarry" and len(s.objects):
            near = _dist(s.agent, s.objects[0]) < GRASP_RADIUS
            if s.phase in (0, 2) and near and s.grip > 0.6:
                s.phase = 1
            elif s.phase == 1 and s.grip < 0.4:
                s.phase = 2
            if s.phase == 1:
                s.objects[0] = s.agent.copy()
        elif name == "twostage":
            gp = self.task.goal_params
            if s.phase == 0 and _in_disc(s.agent, gp["waypoint"], gp["waypoint_radius"]):
                s.phase = 1

    def _goal_predicate(self, s: EnvState) -> bool:
        gp = self.task.goal_params
        goal, r = gp["goal"], gp["goal_radius"]
        name = self.task.name
        if name in ("reach", "detour"):
            return _in_disc(s.agent, goal, r)
        if name in ("push", "liftcarry"):
            return len(s.objects) > 0 and _in_disc(s.objects[0], goal, r)
        if name == "twostage":
            return s.phase >= 1 and _in_disc(s.agent, goal, r)
        raise EnvConfigError(f"no goal predicate for task {name}")

    def _progress(self, s: EnvState) -> tuple[int, float]:
        """(stage, distance-to-current-subgoal); stage changes reset stall tracking."""
        gp = self.task.goal_params
        goal = gp["goal"]
        name = self.task.name
        if name in ("reach", "detour"):
            return 0, _dist(s.agent, goal)
        if name == "push":
            if len(s.objects) and _dist(s.agent, s.objects[0]) < CONTACT_RADIUS:
                return 1, _dist(s.objects[0], goal)
            return 0, _dist(s.agent, s.objects[0]) if len(s.objects) else 0.0
        if name == "liftcarry":
            if s.phase == 1:
                return 1, _dist(s.objects[0], goal)
            return 0, _dist(s.agent, s.objects[0]) if len(s.objects) else 0.0
        if name == "twostage":
            if s.phase == 0:
                return 0, _dist(s.agent, gp["waypoint"])
            return 1, _dist(s.agent, goal)
        raise EnvConfigError(f"no progress metric for task {name}")

    # -- oracle-side predicates ----------------------------------------------

    def true_failure(self, s: EnvState) -> bool:
        """Hand-coded hazard: unsafe region, dropped object, or stalled execution."""
        if s.goal_reached:
            return False
        a = s.agent
        if not (SAFE_MARGIN < a[0] < 1.0 - SAFE_MARGIN and SAFE_MARGIN < a[1] < 1.0 - SAFE_MARGIN):
            return True
        hz = self.task.goal_params.get("hazard")
        if hz is not None and hz[0] < a[0] < hz[1] and hz[2] < a[1] < hz[3]:
            return True
        if self.task.name == "liftcarry" and s.phase == 2:
            return True   # released outside the goal region
        if s.stall_count >= STALL_STEPS:
            return True
        if (s.prog_count >= PROGRESS_STALL_STEPS
                and s.step_count >= PROGRESS_STALL_AFTER * self.task.horizon):
            return True
        return False

    def goal_regressing(self, s: EnvState) -> bool:
        """Oracle check: execution has not improved its subgoal distance recently."""
        return s.prog_count >= 6

    # -- expert ---------------------------------------------------------------

    def expert_target(self, s: EnvState) -> tuple[np.ndarray, float]:
        """Current spatial subgoal and desired gripper command."""
        gp = self.task.goal_params
        goal = np.asarray(gp["goal"])
        name = self.task.name
        if name == "reach":
            return goal, 0.0
        if name == "push":
            if len(s.objects) and _dist(s.agent, s.objects[0]) >= CONTACT_RADIUS * 0.8:
                return s.objects[0].copy(), 0.0
            return goal, 0.0
        if name == "liftcarry":
            if s.phase == 1:
                return goal, 1.0
            obj = s.objects[0]
            if _dist(s.agent, obj) < GRASP_RADIUS * 0.9:
                return obj.copy(), 1.0
            return obj.copy(), -0.2
        if name == "twostage":
            if s.phase == 0:
                return np.asarray(gp["waypoint"]), 0.0
            return goal, 0.0
        if name == "detour":
            x, y = s.agent
            if x >= 0.63:
                return goal, 0.0
            if y >= 0.89:
                return np.array([0.70, 0.93]), 0.0
            if x <= 0.37:
                return np.array([0.30, 0.93]), 0.0
            return (np.array([0.30, 0.93]) if x < 0.5 else np.array([0.70, 0.93])), 0.0
        raise EnvConfigError(f"no expert for task {name}")

    def expert_action(self, s: EnvState, noise_seed: int, noise_scale: float = 0.05,
                      speed: float = 0.5) -> np.ndarray:
        """Proportional controller toward the current subgoal plus seeded noise.

        Demonstrations use half speed so episodes are long enough to carry
        history windows; the oracle rescues at speed=1.0.
        """
        target, grip_cmd = self.expert_target(s)
        v = target - s.agent
        n = float(np.hypot(*v))
        if n > 1e-9:
            step = min(n, speed * STEP_GAIN) * (v / n)
        else:
            step = np.zeros(2)
        delta = np.empty(3)
        delta[:2] = step / STEP_GAIN
        delta[2] = grip_cmd
        if noise_scale > 0:
            rng = seeded_rng("expert-noise", self.task.task_id, noise_seed, s.step_count)
            delta[:2] += rng.normal(0.0, noise_scale, size=2)
        return np.clip(delta, -1.0, 1.0)

    # -- rendering --------------------------------------------------------------

    def observe(self, s: EnvState) -> Observation:
        img = self.render(s)
        proprio = np.array([s.agent[0], s.agent[1], s.grip,
                            s.step_count / self.task.horizon], dtype=np.float32)
        return Observation(image=img, proprio=proprio)

    def render(self, s: EnvState) -> np.ndarray:
        px, py = self._px, self._py
        img = np.full((3, self.image_size, self.image_size), 0.10, dtype=np.float32)
        gp = self.task.goal_params

        hz = gp.get("hazard")
        if hz is not None:
            m = (px > hz[0]) & (px < hz[1]) & (py > hz[2]) & (py < hz[3])
            img[0][m] = 0.55
            img[1][m] = 0.12
            img[2][m] = 0.12

        self._disc(img, gp["goal"], gp["goal_radius"], (0.15, 0.75, 0.15))
        wp = gp.get("waypoint")
        if wp is not None:
            color = (0.15, 0.65, 0.75) if s.phase == 0 else (0.12, 0.30, 0.33)
            self._disc(img, wp, gp["waypoint_radius"], color)

        if self._distractor is not None:
            dx, dy = self._distractor
            m = (np.abs(px - dx) + np.abs(py - dy)) < 0.07   # diamond: a shape no task uses
            img[0][m] = 0.95
            img[1][m] = 0.15
            img[2][m] = 0.85

        for obj in s.objects:
            self._disc(img, obj, 0.045, (0.95, 0.55, 0.10))
        agent_color = (0.25, 0.35, 0.95) if s.grip <= 0.5 else (0.55, 0.65, 1.0)
        self._disc(img, s.agent, 0.045, agent_color)
        return img

    def _disc(self, img, center, radius, color):
        m = (self._px - center[0]) ** 2 + (self._py - center[1]) ** 2 < radius ** 2
        for c in range(3):
            img[c][m] = color[c]


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Float [0,1] image to uint8; the storage and model-input representation."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def dequantize_image(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / 255.0

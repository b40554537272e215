"""Kinematic tabletop with two discs, a goal zone and a point gripper.

Coordinates are meters in the unit workspace cube; the table is the plane
z = 0. A disc's ``pos`` is the center of its bottom face. The gripper ``pos``
is its fingertip. Actions are ``(dx, dy, dz, grip)`` with ``grip >= 0.5``
meaning "closed".

Physics rules, all kinematic:

* the gripper moves by the per-axis-clamped delta and stays inside the cube;
* closing while the fingertip is within ``grasp_radius`` of a disc center
  (horizontally) and within ``grasp_dz`` of its top face grasps that disc;
* a held disc hangs rigidly below the fingertip;
* opening drops the held disc straight down onto whatever supports it; a
  drop onto another disc from more than ``drop_tol`` above it topples the
  disc off onto the table;
* an open gripper below ``push_height`` shoves discs it touches radially
  out of contact.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from lamp.errors import GenerationError
from lamp.gradcore.rng import Rng

TASK_KINDS = ("push", "pick_place", "stack")
COLORS = {"red": (0.9, 0.15, 0.1), "blue": (0.1, 0.25, 0.9)}
COLOR_IDS = {"red": 0, "blue": 1}
GOAL_COLOR = (0.2, 0.75, 0.25)

# (kind, target color, base color or None)
INSTRUCTIONS: tuple[tuple[str, str, str | None, str], ...] = (
    ("push", "red", None, "push the red disc to the green zone"),
    ("push", "blue", None, "push the blue disc to the green zone"),
    ("pick_place", "red", None, "put the red disc in the green zone"),
    ("pick_place", "blue", None, "put the blue disc in the green zone"),
    ("stack", "red", "blue", "stack the red disc on the blue disc"),
    ("stack", "blue", "red", "stack the blue disc on the red disc"),
)
NUM_INSTRUCTIONS = len(INSTRUCTIONS)


@dataclass(frozen=True)
class WorldConfig:
    disc_radius: float = 0.1
    disc_height: float = 0.06
    goal_radius: float = 0.12
    max_step: float = 0.05
    grasp_radius: float = 0.05
    grasp_dz: float = 0.03
    drop_tol: float = 0.04
    push_height: float = 0.03
    finger_radius: float = 0.03
    hover: float = 0.15
    place_lo: float = 0.2
    place_hi: float = 0.8
    min_separation: float = 0.26
    max_placement_tries: int = 200
    step_budget: int = 80


@dataclass
class Disc:
    id: int
    color: str
    radius: float
    height: float
    pos: np.ndarray

    @property
    def top(self) -> float:
        return float(self.pos[2] + self.height)


@dataclass
class Goal:
    pos: np.ndarray
    radius: float


@dataclass
class WorldState:
    gripper: np.ndarray
    closed: bool
    objects: list[Disc]
    goals: list[Goal]
    held: int | None = None
    step: int = 0

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def disc(self, color: str) -> Disc:
        for d in self.objects:
            if d.color == color:
                return d
        raise KeyError(color)

    def robot_state(self) -> np.ndarray:
        """(x, y, z, closed) of the gripper."""
        return np.array([*self.gripper, float(self.closed)])

    def fingerprint(self) -> bytes:
        parts = [self.gripper, [float(self.closed), -1.0 if self.held is None else float(self.held)]]
        parts += [d.pos for d in self.objects] + [g.pos for g in self.goals]
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts]).tobytes()


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    instruction_id: int
    stage_count: int = 2

    def __post_init__(self):
        if not 0 <= self.instruction_id < NUM_INSTRUCTIONS:
            raise ValueError(f"invalid instruction id {self.instruction_id}")
        if INSTRUCTIONS[self.instruction_id][0] != self.kind:
            raise ValueError(f"instruction {self.instruction_id} is not a {self.kind} task")
        if self.stage_count < 1:
            raise ValueError("stage count must be >= 1")

    @classmethod
    def from_instruction(cls, instruction_id: int) -> "TaskSpec":
        return cls(INSTRUCTIONS[instruction_id][0], instruction_id)

    @property
    def target(self) -> str:
        return INSTRUCTIONS[self.instruction_id][1]

    @property
    def base(self) -> str | None:
        return INSTRUCTIONS[self.instruction_id][2]

    @property
    def text(self) -> str:
        return INSTRUCTIONS[self.instruction_id][3]


def instructions_for(kind: str) -> list[int]:
    return [i for i, ins in enumerate(INSTRUCTIONS) if ins[0] == kind]


def sample_task(kind: str, rng: Rng) -> TaskSpec:
    ids = instructions_for(kind)
    return TaskSpec(kind, ids[int(rng.integers(0, len(ids)))])


def _hdist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def reset(task: TaskSpec, rng: Rng, cfg: WorldConfig = WorldConfig()) -> WorldState:
    """Random placement of both discs and the goal with pairwise separation."""
    for _ in range(cfg.max_placement_tries):
        pts = cfg.place_lo + (cfg.place_hi - cfg.place_lo) * rng.uniform((3, 2))
        d01 = np.hypot(*(pts[0] - pts[1]))
        d02 = np.hypot(*(pts[0] - pts[2]))
        d12 = np.hypot(*(pts[1] - pts[2]))
        if min(d01, d02, d12) >= cfg.min_separation:
            break
    else:
        raise GenerationError("object placement failed after bounded retries")
    grip_xy = cfg.place_lo + (cfg.place_hi - cfg.place_lo) * rng.uniform(2)
    grip_z = 0.2 + 0.15 * float(rng.uniform())
    objects = [
        Disc(0, "red", cfg.disc_radius, cfg.disc_height, np.array([pts[0, 0], pts[0, 1], 0.0])),
        Disc(1, "blue", cfg.disc_radius, cfg.disc_height, np.array([pts[1, 0], pts[1, 1], 0.0])),
    ]
    goals = [Goal(np.array([pts[2, 0], pts[2, 1], 0.0]), cfg.goal_radius)]
    return WorldState(np.array([grip_xy[0], grip_xy[1], grip_z]), False, objects, goals)


def _support_top(state: WorldState, disc: Disc) -> tuple[float, Disc | None]:
    best, base = 0.0, None
    for other in state.objects:
        if other.id == disc.id:
            continue
        if _hdist(other.pos, disc.pos) < other.radius and other.top <= disc.pos[2] + 1e-9:
            if other.top > best:
                best, base = other.top, other
    return best, base


def step(state: WorldState, action, cfg: WorldConfig = WorldConfig()) -> WorldState:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (4,) or not np.all(np.isfinite(action)):
        raise ValueError("action must be a finite 4-vector")
    s = state.copy()
    delta = np.clip(action[:3], -cfg.max_step, cfg.max_step)
    s.gripper = np.clip(s.gripper + delta, 0.0, 1.0)
    held = s.objects[s.held] if s.held is not None else None
    if held is not None:
        s.gripper[2] = max(s.gripper[2], held.height)
        held.pos = s.gripper - np.array([0.0, 0.0, held.height])

    want_closed = bool(action[3] >= 0.5)
    if want_closed and not s.closed:
        for d in s.objects:
            if (_hdist(d.pos, s.gripper) <= cfg.grasp_radius
                    and abs(s.gripper[2] - d.top) <= cfg.grasp_dz):
                s.held = d.id
                d.pos = s.gripper - np.array([0.0, 0.0, d.height])
                break
    elif not want_closed and s.closed and held is not None:
        s.held = None
        top, base = _support_top(s, held)
        if base is not None and held.pos[2] - top > cfg.drop_tol:
            away = held.pos[:2] - base.pos[:2]
            n = np.hypot(*away)
            away = np.array([1.0, 0.0]) if n < 1e-9 else away / n
            xy = base.pos[:2] + away * (base.radius + held.radius)
            held.pos = np.array([*np.clip(xy, 0.0, 1.0), 0.0])
        else:
            held.pos = np.array([held.pos[0], held.pos[1], top])
    s.closed = want_closed

    if not s.closed and s.held is None:
        for d in s.objects:
            if s.gripper[2] >= d.pos[2] + cfg.push_height or s.gripper[2] < d.pos[2] - 1e-9:
                continue
            contact = d.radius + cfg.finger_radius
            rel = d.pos[:2] - s.gripper[:2]
            n = np.hypot(*rel)
            if n < contact:
                direction = np.array([1.0, 0.0]) if n < 1e-9 else rel / n
                xy = np.clip(s.gripper[:2] + direction * contact, 0.0, 1.0)
                d.pos = np.array([xy[0], xy[1], d.pos[2]])
    s.step = state.step + 1
    return s


# -- task predicates ---------------------------------------------------------

def is_success(state: WorldState, task: TaskSpec) -> bool:
    target = state.disc(task.target)
    if state.held == target.id:
        return False
    if task.kind == "stack":
        base = state.disc(task.base)
        return (_hdist(target.pos, base.pos) < base.radius
                and abs(target.pos[2] - base.top) < 1e-6 and state.held is None)
    goal = state.goals[0]
    return _hdist(target.pos, goal.pos) < goal.radius and abs(target.pos[2]) < 1e-6


def _stage_one(state: WorldState, task: TaskSpec, initial: WorldState) -> bool:
    target = state.disc(task.target)
    if task.kind == "push":
        return _hdist(target.pos, initial.disc(task.target).pos) >= 0.02
    return state.held == target.id


def progress_score(trajectory, task: TaskSpec) -> float:
    """0.5 per completed stage of the two-stage tasks; success is 1.0."""
    trajectory = list(trajectory)
    if not trajectory:
        return 0.0
    if is_success(trajectory[-1], task):
        return 1.0
    if any(_stage_one(s, task, trajectory[0]) for s in trajectory):
        return 1.0 / task.stage_count
    return 0.0


# -- scripted expert -----------------------------------------------------------

def _toward(pos, target, cfg: WorldConfig) -> np.ndarray:
    delta = np.asarray(target, dtype=np.float64) - pos
    n = float(np.linalg.norm(delta))
    if n > cfg.max_step:
        delta = delta * (cfg.max_step / n)
    return delta


def _carry_to(state: WorldState, dest_xy, place_z: float, cfg: WorldConfig) -> np.ndarray:
    g = state.gripper
    carry_z = place_z + cfg.hover
    if _hdist(g, dest_xy) > 0.01:
        target = (dest_xy[0], dest_xy[1], max(carry_z, g[2]) if _hdist(g, dest_xy) > 0.1 else carry_z)
        return np.array([*_toward(g, target, cfg), 1.0])
    if g[2] > place_z + 0.005:
        return np.array([*_toward(g, (dest_xy[0], dest_xy[1], place_z), cfg), 1.0])
    return np.array([0.0, 0.0, 0.0, 0.0])


def _pick(state: WorldState, disc: Disc, cfg: WorldConfig) -> np.ndarray:
    g = state.gripper
    if state.closed:
        return np.array([0.0, 0.0, 0.0, 0.0])
    top = disc.top
    if _hdist(g, disc.pos) > 0.01:
        z = max(top + cfg.hover, g[2]) if _hdist(g, disc.pos) > 0.1 else top + cfg.hover
        return np.array([*_toward(g, (disc.pos[0], disc.pos[1], z), cfg), 0.0])
    if g[2] > top + 0.005:
        return np.array([*_toward(g, (disc.pos[0], disc.pos[1], top), cfg), 0.0])
    return np.array([0.0, 0.0, 0.0, 1.0])


def _push(state: WorldState, task: TaskSpec, cfg: WorldConfig) -> np.ndarray:
    g = state.gripper
    disc = state.disc(task.target)
    goal = state.goals[0].pos
    to_goal = goal[:2] - disc.pos[:2]
    dist = float(np.hypot(*to_goal))
    if dist < 0.03:
        return np.zeros(4)
    u = to_goal / dist
    contact = disc.radius + cfg.finger_radius
    low = 0.01
    rel = g[:2] - disc.pos[:2]
    along = float(rel @ u)
    lateral = float(np.hypot(*(rel - along * u)))
    if g[2] < cfg.push_height and lateral < 0.02 and along < 0:
        dest = goal[:2] - u * contact
        return np.array([*_toward(g, (dest[0], dest[1], low), cfg), 0.0])
    pre = disc.pos[:2] - u * (contact + 0.04)
    if _hdist(g, pre) > 0.01:
        if g[2] < disc.top + 0.03 and _hdist(g, disc.pos) < contact + 0.06:
            return np.array([0.0, 0.0, cfg.max_step, 0.0])
        z = disc.top + 0.09
        return np.array([*_toward(g, (pre[0], pre[1], z), cfg), 0.0])
    return np.array([*_toward(g, (pre[0], pre[1], low), cfg), 0.0])


def scripted_expert(state: WorldState, task: TaskSpec, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """Stateless proportional controller through the task's stage sequence."""
    if is_success(state, task):
        return np.zeros(4)
    if task.kind == "push":
        return _push(state, task, cfg)
    target = state.disc(task.target)
    if state.held == target.id:
        if task.kind == "stack":
            base = state.disc(task.base)
            return _carry_to(state, base.pos[:2], base.top + target.height, cfg)
        return _carry_to(state, state.goals[0].pos[:2], target.height, cfg)
    if state.held is not None:
        return np.array([0.0, 0.0, 0.0, 0.0])
    return _pick(state, target, cfg)


def run_expert(state: WorldState, task: TaskSpec, cfg: WorldConfig = WorldConfig(),
               budget: int | None = None, settle: int = 0):
    """Roll the expert out. Returns (states, actions, success); ``settle`` idle steps follow success."""
    budget = cfg.step_budget if budget is None else budget
    states, actions = [state], []
    done_at = None
    for _ in range(budget):
        if is_success(states[-1], task):
            done_at = len(actions)
            break
        a = scripted_expert(states[-1], task, cfg)
        actions.append(a)
        states.append(step(states[-1], a, cfg))
    else:
        if is_success(states[-1], task):
            done_at = len(actions)
    if done_at is None:
        return states, actions, False
    for _ in range(settle):
        a = scripted_expert(states[-1], task, cfg)
        actions.append(a)
        states.append(step(states[-1], a, cfg))
    return states, actions, True

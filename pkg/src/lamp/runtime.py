"""Inference, closed-loop rollouts, paired evaluation and motion visualization.

A decision runs four steps: encode the observation, take one Euler step of
the motion expert and keep its final-block hidden tokens, fuse them into
the context, and denoise an action chunk with N Euler steps. In mode
``none`` the motion expert is skipped. Each chunk is executed in full
before the next observation.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lamp import flowmatch
from lamp.action_expert import ActionExpert, sample_chunk
from lamp.checkpoint import Checkpoint
from lamp.errors import ConfigError, NumericError, ShapeError
from lamp.gradcore import Rng, no_grad
from lamp.guidance import GuidanceModule
from lamp.motion_expert import MotionExpert, generate_flow, one_step_hidden
from lamp.motionrep import GridSpec, MotionNormalizer, increments_to_tracks, make_grid
from lamp.percept import PerceptionEncoder
from lamp.toyworld.dataset import ActionNormalizer
from lamp.toyworld.render import default_camera, render
from lamp.toyworld.world import (
    TASK_KINDS,
    TaskSpec,
    WorldConfig,
    WorldState,
    is_success,
    progress_score,
    reset,
    run_expert,
    sample_task,
    step,
)


# -- policy bundle and the four-step decision ----------------------------------------

@dataclass
class PolicyBundle:
    percept: PerceptionEncoder
    motion: MotionExpert
    guidance: GuidanceModule
    action: ActionExpert
    motion_norm: MotionNormalizer
    action_norm: ActionNormalizer
    grid: GridSpec
    schedule: flowmatch.SolverSchedule = field(default_factory=flowmatch.SolverSchedule)
    label: str = ""

    def __post_init__(self):
        self.validate()
        for m in (self.percept, self.motion, self.guidance, self.action):
            m.freeze()

    @property
    def mode(self) -> str:
        return self.guidance.cfg.mode

    @property
    def horizon(self) -> int:
        return self.action.cfg.horizon

    def validate(self) -> None:
        pc, mc, gc, ac = self.percept.cfg, self.motion.cfg, self.guidance.cfg, self.action.cfg
        problems = []
        if mc.d_z != pc.d_z or gc.d_z != pc.d_z or ac.d_z != pc.d_z:
            problems.append("context widths differ")
        if gc.uses_motion and gc.d_m != mc.d_m:
            problems.append("guidance motion width differs from the motion expert")
        if mc.grid != self.grid:
            problems.append("motion grid differs from the bundle grid")
        if gc.mode == "add" and (gc.z_tokens != pc.num_tokens or gc.m_tokens != mc.num_tokens):
            problems.append("add-guidance token counts differ")
        if problems:
            raise ConfigError("inconsistent policy bundle: " + "; ".join(problems))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, solver_steps: int = 10, label: str = "") -> "PolicyBundle":
        from lamp.trainer import normalizers

        if ckpt.config.get("kind") != "stage2":
            raise ConfigError("a policy bundle needs a stage-2 checkpoint")
        m_norm, a_norm = normalizers(ckpt.config)
        mods = ckpt.modules
        return cls(mods["percept"], mods["motion"], mods["guidance"], mods["action"], m_norm, a_norm,
                   GridSpec(**ckpt.config["grid"]), flowmatch.SolverSchedule(solver_steps),
                   label or ckpt.config["stage2"]["guidance_mode"])


def observe(states, grid: GridSpec) -> np.ndarray:
    """Render RGB-D observations [B, 4, H, W] from world states."""
    cam = default_camera(grid.width, grid.height)
    out = np.empty((len(states), 4, grid.height, grid.width), dtype=np.float32)
    for i, s in enumerate(states):
        rgb, depth = render(s, cam, grid.width, grid.height)
        out[i, :3], out[i, 3] = rgb, depth
    return out


def infer(bundle: PolicyBundle, obs, instruction, state, rng: Rng) -> np.ndarray:
    """One decision for a batch: [B, H, 4] action chunks in action units."""
    obs = np.asarray(obs)
    state = np.asarray(state, dtype=np.float32).reshape(len(obs), -1)
    with no_grad():
        z = bundle.percept(obs, instruction)
        z_m = (one_step_hidden(bundle.motion, z, bundle.schedule, rng.spawn(0))
               if bundle.guidance.cfg.uses_motion else None)
        z_g = bundle.guidance(z, z_m)
        chunk = sample_chunk(bundle.action, z_g, state, bundle.schedule.t1, bundle.schedule,
                             rng.spawn(1), bundle.action_norm)
    if not np.all(np.isfinite(chunk)):
        raise NumericError("non-finite action chunk")
    return chunk


# -- policies usable by the rollout loop ----------------------------------------------

class BundlePolicy:
    def __init__(self, bundle: PolicyBundle):
        self.bundle = bundle
        self.horizon = bundle.horizon
        self.decisions = 0
        self.wall = 0.0

    def act(self, states, tasks, rng: Rng) -> np.ndarray:
        t0 = time.perf_counter()
        obs = observe(states, self.bundle.grid)
        ins = np.array([t.instruction_id for t in tasks])
        robot = np.stack([s.robot_state() for s in states])
        chunk = infer(self.bundle, obs, ins, robot, rng)
        self.decisions += len(states)
        self.wall += time.perf_counter() - t0
        return chunk


class ExpertPolicy:
    """The scripted expert packaged as a chunked policy (reads the true state)."""

    def __init__(self, horizon: int = 4, cfg: WorldConfig = WorldConfig()):
        self.horizon, self.cfg = horizon, cfg

    def act(self, states, tasks, rng: Rng) -> np.ndarray:
        out = np.zeros((len(states), self.horizon, 4))
        for i, (s, task) in enumerate(zip(states, tasks)):
            _, actions, _ = run_expert(s, task, self.cfg, budget=self.horizon)
            out[i, :len(actions)] = actions
        return out


class ZeroPolicy:
    def __init__(self, horizon: int = 4):
        self.horizon = horizon

    def act(self, states, tasks, rng: Rng) -> np.ndarray:
        return np.zeros((len(states), self.horizon, 4))


# -- rollouts ---------------------------------------------------------------------------

@dataclass
class Episode:
    task: TaskSpec
    states: list[WorldState]
    score: float
    success: bool
    steps: int


def rollout_batch(policy, tasks, starts, max_steps: int, rng: Rng,
                  cfg: WorldConfig = WorldConfig()) -> list[Episode]:
    """Run episodes side by side; each decision batches every unfinished episode.

    An episode ends at success or after ``max_steps`` environment steps.
    """
    trajs = [[s] for s in starts]
    done = [is_success(s, t) for s, t in zip(starts, tasks)]
    decision = 0
    while True:
        active = [i for i, tr in enumerate(trajs) if not done[i] and len(tr) - 1 < max_steps]
        if not active:
            break
        chunk = np.asarray(policy.act([trajs[i][-1] for i in active], [tasks[i] for i in active],
                                      rng.spawn(decision)))
        if chunk.shape[0] != len(active) or chunk.ndim != 3 or chunk.shape[2] != 4:
            raise ShapeError(f"policy returned chunk of shape {chunk.shape}")
        for row, i in enumerate(active):
            for a in chunk[row]:
                if len(trajs[i]) - 1 >= max_steps:
                    break
                trajs[i].append(step(trajs[i][-1], a, cfg))
                if is_success(trajs[i][-1], tasks[i]):
                    done[i] = True
                    break
        decision += 1
    return [Episode(t, tr, progress_score(tr, t), is_success(tr[-1], t), len(tr) - 1)
            for t, tr in zip(tasks, trajs)]


def rollout(policy, task: TaskSpec, max_steps: int, rng: Rng, start: WorldState | None = None,
            cfg: WorldConfig = WorldConfig()) -> Episode:
    start = reset(task, rng.spawn(0), cfg) if start is None else start
    return rollout_batch(policy, [task], [start], max_steps, rng.spawn(1), cfg)[0]


def episode_start(kind: str, seed: int, episode: int, cfg: WorldConfig = WorldConfig()):
    """Paired initial condition: a pure function of (task kind, seed, episode index)."""
    r = Rng(seed).spawn(TASK_KINDS.index(kind), episode)
    task = sample_task(kind, r)
    return task, reset(task, r, cfg)


# -- evaluation reports --------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-episode rows plus aggregates derived from them.

    JSON fields:
      rows: list of {variant, task, seed, episode, instruction, score, success,
            steps, init_hash}
      aggregates: {variant: {task | "all": {success_mean, success_se,
            progress_mean, progress_se, episodes}}}; means run over episodes,
            standard errors over per-seed means
      calls: {variant: {motion_per_decision, action_per_decision}}
    """

    rows: list[dict]
    calls: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out: dict = {}
        for v in sorted({r["variant"] for r in self.rows}):
            vrows = [r for r in self.rows if r["variant"] == v]
            out[v] = {}
            for task in sorted({r["task"] for r in vrows}) + ["all"]:
                trows = vrows if task == "all" else [r for r in vrows if r["task"] == task]
                out[v][task] = _summarize(trows)
        return out

    def to_json(self) -> str:
        doc = {"rows": self.rows, "aggregates": self.aggregates(), "calls": self.calls}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(doc["rows"], doc.get("calls", {}))

    def table(self) -> str:
        agg = self.aggregates()
        lines = [f"{'variant':<14}{'task':<12}{'success':>9}{'+-se':>8}{'progress':>10}{'+-se':>8}{'n':>6}"]
        for v, per in agg.items():
            for task, a in per.items():
                lines.append(f"{v:<14}{task:<12}{a['success_mean']:>9.3f}{a['success_se']:>8.3f}"
                             f"{a['progress_mean']:>10.3f}{a['progress_se']:>8.3f}{a['episodes']:>6d}")
        return "\n".join(lines) + "\n"


def _seed_se(rows, key: str) -> float:
    seeds = sorted({r["seed"] for r in rows})
    if len(seeds) < 2:
        vals = np.array([float(r[key]) for r in rows])
        return float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    means = np.array([np.mean([float(r[key]) for r in rows if r["seed"] == s]) for s in seeds])
    return float(means.std(ddof=1) / math.sqrt(len(seeds)))


def _summarize(rows) -> dict:
    return {"success_mean": float(np.mean([float(r["success"]) for r in rows])),
            "success_se": _seed_se(rows, "success"),
            "progress_mean": float(np.mean([r["score"] for r in rows])),
            "progress_se": _seed_se(rows, "score"),
            "episodes": len(rows)}


def evaluate(policies: dict, tasks, episodes: int, seeds, max_steps: int = 80,
             cfg: WorldConfig = WorldConfig()) -> EvalReport:
    """Paired evaluation: every variant sees the same initial states per (task, seed, episode)."""
    if not policies:
        raise ConfigError("evaluate needs at least one variant")
    if len(set(policies)) != len(policies):
        raise ConfigError("variant labels collide")
    rows, calls = [], {}
    for label, policy in policies.items():
        bundle = getattr(policy, "bundle", None)
        m0 = bundle.motion.velocity_calls if bundle else 0
        a0 = bundle.action.velocity_calls if bundle else 0
        decisions0 = getattr(policy, "decisions", 0)
        for kind in tasks:
            for seed in seeds:
                starts = [episode_start(kind, seed, e, cfg) for e in range(episodes)]
                eps = rollout_batch(policy, [t for t, _ in starts], [s for _, s in starts], max_steps,
                                    Rng(seed).spawn(97, TASK_KINDS.index(kind)), cfg)
                for e, ((task, start), ep) in enumerate(zip(starts, eps)):
                    rows.append({"variant": label, "task": kind, "seed": int(seed), "episode": e,
                                 "instruction": task.instruction_id, "score": ep.score,
                                 "success": bool(ep.success), "steps": ep.steps,
                                 "init_hash": hashlib.sha256(start.fingerprint()).hexdigest()[:16]})
        if bundle:
            n = max(policy.decisions - decisions0, 1)
            # batched calls: one velocity evaluation serves every episode in the batch
            calls[label] = {"motion_calls": bundle.motion.velocity_calls - m0,
                            "action_calls": bundle.action.velocity_calls - a0,
                            "episode_decisions": n}
    check_pairing(rows)
    return EvalReport(rows, calls)


def check_pairing(rows) -> None:
    by_key: dict = {}
    for r in rows:
        key = (r["task"], r["seed"], r["episode"])
        if by_key.setdefault(key, r["init_hash"]) != r["init_hash"]:
            raise ConfigError(f"unpaired initial state at {key}")


# -- visualization -------------------------------------------------------------------------

def _lerp_color(frac: float) -> tuple[int, int, int]:
    """Blue at the start of the horizon, red at the end."""
    return int(round(255 * frac)), 0, int(round(255 * (1 - frac)))


def motion_segments(tracks: np.ndarray, min_len: float = 1e-9):
    """Colored polyline pieces (u0, v0, u1, v1, rgb) from tracks [K, T+1, >=2]; zero-length pieces dropped."""
    k, t1 = tracks.shape[:2]
    segs = []
    for i in range(k):
        for t in range(t1 - 1):
            (u0, v0), (u1, v1) = tracks[i, t, :2], tracks[i, t + 1, :2]
            if math.hypot(u1 - u0, v1 - v0) > min_len:
                segs.append((float(u0), float(v0), float(u1), float(v1), _lerp_color(t / max(t1 - 2, 1))))
    return segs


def _draw_line(img, x0, y0, x1, y1, color):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    for s in np.linspace(0.0, 1.0, n + 1):
        x, y = int(round(x0 + s * (x1 - x0))), int(round(y0 + s * (y1 - y0)))
        if 0 <= y < img.shape[0] and 0 <= x < img.shape[1]:
            img[y, x] = color


def write_overlay(obs: np.ndarray, tracks: np.ndarray, path, scale: int = 8) -> tuple[Path, Path]:
    """Write ``<path>.ppm`` (raster) and ``<path>.svg`` (vector) overlays of tracks on an RGB-D observation."""
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".ppm", ".svg") else base
    rgb = np.clip(np.asarray(obs)[:3], 0, 1)
    h, w = rgb.shape[1:]
    img = (np.repeat(np.repeat(rgb.transpose(1, 2, 0), scale, 0), scale, 1) * 255).round().astype(np.uint8)
    segs = motion_segments(tracks)
    for u0, v0, u1, v1, col in segs:
        _draw_line(img, u0 * scale, v0 * scale, u1 * scale, v1 * scale, col)
    for u, v in tracks[:, 0, :2]:
        x, y = int(u * scale), int(v * scale)
        img[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2] = (255, 255, 0)
    ppm = base.with_suffix(".ppm")
    ppm.write_bytes(f"P6\n{w * scale} {h * scale}\n255\n".encode() + img.tobytes())

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" '
             f'viewBox="0 0 {w} {h}">']
    for y in range(h):
        for x in range(w):
            r, g, b = (int(round(c * 255)) for c in rgb[:, y, x])
            parts.append(f'<rect x="{x}" y="{y}" width="1" height="1" fill="rgb({r},{g},{b})"/>')
    for u0, v0, u1, v1, (r, g, b) in segs:
        parts.append(f'<line class="motion" x1="{u0:.4f}" y1="{v0:.4f}" x2="{u1:.4f}" y2="{v1:.4f}" '
                     f'stroke="rgb({r},{g},{b})" stroke-width="0.25"/>')
    for u, v in tracks[:, 0, :2]:
        parts.append(f'<circle class="anchor" cx="{u:.4f}" cy="{v:.4f}" r="0.3" fill="yellow"/>')
    parts.append("</svg>")
    svg = base.with_suffix(".svg")
    svg.write_text("\n".join(parts) + "\n")
    return ppm, svg


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 pixmap (format self-check)."""
    data = Path(path).read_bytes()
    tokens = data.split(maxsplit=4)
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("not a P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    pix = tokens[4]
    if len(pix) != w * h * 3:
        raise ValueError("pixmap size mismatch")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3)


def read_svg(path) -> ET.Element:
    root = ET.fromstring(Path(path).read_text())
    if not root.tag.endswith("svg"):
        raise ValueError("not an SVG document")
    return root


def tracks_from_field(field: np.ndarray, obs: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Anchor the frame-0 keypoints at observed depth and accumulate increments [K_h, K_w, T, 3]."""
    uv = make_grid(grid)
    depth = np.asarray(obs)[3]
    px = np.clip(uv.astype(int), 0, [grid.width - 1, grid.height - 1])
    anchors = np.concatenate([uv, depth[px[:, 1], px[:, 0]][:, None]], axis=1)
    return increments_to_tracks(np.asarray(field, dtype=np.float64).reshape(grid.K, grid.T, 3), anchors)


def visualize_motion(bundle: PolicyBundle, obs, instruction: int, path, rng: Rng):
    """Full N-step motion generation rendered as blue-to-red trajectories over the observation."""
    obs = np.asarray(obs)
    with no_grad():
        z = bundle.percept(obs[None], [instruction])
        field = generate_flow(bundle.motion, z, bundle.schedule, rng, bundle.motion_norm)[0]
    tracks = tracks_from_field(field, obs, bundle.grid)
    return write_overlay(obs, tracks, path), tracks

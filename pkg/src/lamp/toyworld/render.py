"""Top-down RGB-D rendering and analytic ground-truth scene flow."""

from __future__ import annotations

import numpy as np

from lamp.motionrep import (
    CameraPose,
    GridSpec,
    Intrinsics,
    make_grid,
    to_reference_frame,
    tracks_to_increments,
)
from lamp.toyworld.world import COLORS, GOAL_COLOR, WorldState

TABLE_COLOR = (0.55, 0.45, 0.35)
GRIPPER_OPEN = (0.95, 0.95, 0.95)
GRIPPER_CLOSED = (0.35, 0.35, 0.35)
GRIPPER_RADIUS = 0.07
CAMERA_HEIGHT = 1.5

# world -> camera for a camera looking straight down: x right, y toward -y_world
DOWN = np.diag([1.0, -1.0, -1.0])

TABLE, GRIPPER = -1, -2


def default_camera(width: int = 32, height: int = 32, center=(0.5, 0.5, CAMERA_HEIGHT)) -> CameraPose:
    """Camera whose image exactly spans the unit table square at z = 0."""
    f = width * CAMERA_HEIGHT
    k = Intrinsics(fx=f, fy=height * CAMERA_HEIGHT, cx=width / 2, cy=height / 2)
    return CameraPose.look_from(center, DOWN, k)


def far_depth(camera: CameraPose) -> float:
    """Depth of the table plane along the optical axis (uniform for a downward camera)."""
    return float(camera.world_to_camera(np.array([[0.5, 0.5, 0.0]]))[0, 2])


def _entities(state: WorldState):
    """(entity id, world center of top face, world radius, color) in painter's order."""
    ents = []
    for d in state.objects:
        ents.append((d.id, np.array([d.pos[0], d.pos[1], d.top]), d.radius, COLORS[d.color]))
    ents.append((GRIPPER, state.gripper.copy(), GRIPPER_RADIUS,
                 GRIPPER_CLOSED if state.closed else GRIPPER_OPEN))
    return ents


def _projected(state: WorldState, camera: CameraPose):
    out = []
    for eid, center, radius, color in _entities(state):
        uvd = camera.project(center[None])[0]
        r_px = camera.intrinsics.fx * radius / uvd[2]
        out.append((eid, uvd, r_px, color))
    # far first; ties keep the listed order so the gripper wins equal depths
    out.sort(key=lambda e: -e[1][2])
    return out


def render(state: WorldState, camera: CameraPose, width: int = 32, height: int = 32):
    """Painter's-order rasterization. Returns (rgb [3, H, W] in [0, 1], depth [H, W] meters)."""
    far = far_depth(camera)
    rgb = np.empty((3, height, width))
    rgb[:] = np.asarray(TABLE_COLOR)[:, None, None]
    depth = np.full((height, width), far)
    vs, us = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")

    for goal in state.goals:
        uvd = camera.project(goal.pos[None])[0]
        r_px = camera.intrinsics.fx * goal.radius / uvd[2]
        dist = np.hypot(us - uvd[0], vs - uvd[1])
        alpha = np.clip(r_px - dist + 0.5, 0.0, 1.0)
        rgb = rgb * (1 - alpha) + np.asarray(GOAL_COLOR)[:, None, None] * alpha

    for _, uvd, r_px, color in _projected(state, camera):
        dist = np.hypot(us - uvd[0], vs - uvd[1])
        alpha = np.clip(r_px - dist + 0.5, 0.0, 1.0)
        rgb = rgb * (1 - alpha) + np.asarray(color)[:, None, None] * alpha
        depth = np.where(dist <= r_px, uvd[2], depth)
    return rgb.astype(np.float32), depth.astype(np.float32)


def entity_at(state: WorldState, camera: CameraPose, uv: np.ndarray):
    """Nearest visible entity at each pixel location uv [K, 2] and its surface depth."""
    ids = np.full(len(uv), TABLE, dtype=np.int64)
    depth = np.full(len(uv), far_depth(camera))
    for eid, e_uvd, r_px, _ in _projected(state, camera):
        inside = np.hypot(uv[:, 0] - e_uvd[0], uv[:, 1] - e_uvd[1]) <= r_px
        ids[inside] = eid
        depth[inside] = e_uvd[2]
    return ids, depth


def _entity_position(state: WorldState, eid: int) -> np.ndarray:
    if eid == GRIPPER:
        return state.gripper
    if eid == TABLE:
        return np.zeros(3)
    return state.objects[eid].pos


def ground_truth_flow(states, cameras, cam_ref: CameraPose, grid: GridSpec):
    """Analytic scene flow for the frame-0 keypoint grid.

    Each keypoint is attached to the surface it sees in frame 0 and moved
    with that entity's translation. Returns (field [K_h, K_w, T, 3] float64,
    valid [K_h, K_w] bool, tracks [K, T+1, 3] in the reference frame).
    Keypoints whose track leaves the image are clamped to the border and
    marked invalid.
    """
    states = list(states)
    if len(states) != grid.T + 1 or len(cameras) != grid.T + 1:
        raise ValueError(f"need {grid.T + 1} states and cameras, got {len(states)} and {len(cameras)}")
    uv = make_grid(grid)
    ids, depth = entity_at(states[0], cameras[0], uv)
    anchors = cameras[0].unproject(np.concatenate([uv, depth[:, None]], axis=1))
    world = np.empty((grid.K, grid.T + 1, 3))
    for k in range(grid.K):
        p0 = _entity_position(states[0], ids[k])
        for t, s in enumerate(states):
            world[k, t] = anchors[k] + (_entity_position(s, ids[k]) - p0)
    tracks = to_reference_frame(world, cameras, cam_ref)
    inside = ((tracks[..., 0] >= 0) & (tracks[..., 0] <= grid.width)
              & (tracks[..., 1] >= 0) & (tracks[..., 1] <= grid.height))
    valid = inside.all(axis=1)
    tracks[..., 0] = np.clip(tracks[..., 0], 0, grid.width)
    tracks[..., 1] = np.clip(tracks[..., 1], 0, grid.height)
    incr = tracks_to_increments(tracks)
    field = incr.reshape(grid.K_h, grid.K_w, grid.T, 3)
    return field, valid.reshape(grid.K_h, grid.K_w), tracks

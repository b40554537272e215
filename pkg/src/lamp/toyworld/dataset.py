"""Expert-demonstration datasets in the ``LAMPDS1`` binary format.

Byte layout (all little-endian)::

    offset  size        field
    0       8           magic b"LAMPDS1\\0"
    8       4  u32      format version (1)
    12      4  u32      episode count
    16      4  u32      record count N
    20      24 6 x u32  K_h, K_w, T, H, image width, image height
    44      12 3 x f32  motion mean (du, dv, dd)
    56      12 3 x f32  motion std
    68      16 4 x f32  action mean (dx, dy, dz, grip)
    84      16 4 x f32  action std
    100     16 N        index: u64 record offset (from file start), u32 episode, u32 step
    ...     R N         records, fixed size R each (see ``record_dtype``)
    end-32  32          SHA-256 of every preceding byte

A record packs: u32 instruction id, u32 task kind, f32 robot state[4],
f32 rgb[3, H, W], f32 depth[H, W], f32 flow[K_h, K_w, T, 3],
f32 validity[K_h, K_w] (1 = valid keypoint), f32 actions[H, 4].
Normalizer statistics are computed from the stored float32 payload: motion
over valid keypoints only, actions over every chunk entry.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lamp.errors import FormatError, GenerationError
from lamp.gradcore.rng import Rng
from lamp.motionrep import GridSpec, MotionNormalizer
from lamp.toyworld.render import default_camera, ground_truth_flow, render
from lamp.toyworld.world import TASK_KINDS, TaskSpec, WorldConfig, reset, run_expert, sample_task

log = logging.getLogger(__name__)

MAGIC = b"LAMPDS1\0"
VERSION = 1
_HEADER = struct.Struct("<8sIII6I3f3f4f4f")
_INDEX = np.dtype([("offset", "<u8"), ("episode", "<u4"), ("step", "<u4")])
DIGEST_SIZE = 32


def record_dtype(grid: GridSpec, horizon: int) -> np.dtype:
    return np.dtype([
        ("instruction", "<u4"),
        ("task", "<u4"),
        ("state", "<f4", (4,)),
        ("rgb", "<f4", (3, grid.height, grid.width)),
        ("depth", "<f4", (grid.height, grid.width)),
        ("flow", "<f4", grid.field_shape),
        ("valid", "<f4", (grid.K_h, grid.K_w)),
        ("actions", "<f4", (horizon, 4)),
    ])


@dataclass
class ActionNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(4), 1e-6)

    @classmethod
    def identity(cls) -> "ActionNormalizer":
        return cls(np.zeros(4), np.ones(4))

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return (a - self.mean) / self.std

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        """Back to action units; the gripper command is thresholded at 0.5."""
        out = np.asarray(a, dtype=np.float64) * self.std + self.mean
        out[..., 3] = (out[..., 3] >= 0.5).astype(np.float64)
        return out


@dataclass
class Dataset:
    grid: GridSpec
    horizon: int
    n_episodes: int
    records: np.ndarray
    index: np.ndarray
    motion_norm: MotionNormalizer
    action_norm: ActionNormalizer
    sha256: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def observations(self, idx) -> np.ndarray:
        """RGB-D stacked as [B, 4, H, W]."""
        r = self.records[idx]
        return np.concatenate([r["rgb"], r["depth"][:, None]], axis=1)

    def episode_ids(self) -> np.ndarray:
        return self.index["episode"]


def compute_stats(records: np.ndarray) -> tuple[MotionNormalizer, ActionNormalizer]:
    if len(records) == 0:
        return MotionNormalizer(), ActionNormalizer.identity()
    motion = MotionNormalizer.fit(records["flow"].astype(np.float64), records["valid"] > 0.5)
    acts = records["actions"].astype(np.float64).reshape(-1, 4)
    return motion, ActionNormalizer(acts.mean(axis=0), acts.std(axis=0))


def episode_records(states, actions, task: TaskSpec, grid: GridSpec, horizon: int,
                    camera, dtype: np.dtype) -> np.ndarray:
    """One record per pre-action state of an expert episode; futures pad with the last state."""
    n = len(actions)
    recs = np.zeros(n, dtype=dtype)
    pad_action = np.zeros(4)
    cams = [camera] * (grid.T + 1)
    for t in range(n):
        s = states[t]
        rgb, depth = render(s, camera, grid.width, grid.height)
        future = [states[min(t + k, len(states) - 1)] for k in range(grid.T + 1)]
        field, valid, _ = ground_truth_flow(future, cams, camera, grid)
        chunk = [actions[t + k] if t + k < n else pad_action for k in range(horizon)]
        recs["instruction"][t] = task.instruction_id
        recs["task"][t] = TASK_KINDS.index(task.kind)
        recs["state"][t] = s.robot_state()
        recs["rgb"][t] = rgb
        recs["depth"][t] = depth
        recs["flow"][t] = field
        recs["valid"][t] = valid
        recs["actions"][t] = np.asarray(chunk)
    return recs


def generate_records(task_mix, episodes: int, grid: GridSpec, horizon: int, rng: Rng,
                     cfg: WorldConfig = WorldConfig(), settle: int = 4,
                     max_failure_rate: float = 0.05, max_attempts: int = 20):
    dtype = record_dtype(grid, horizon)
    camera = default_camera(grid.width, grid.height)
    task_mix = list(task_mix)
    chunks, index_rows, failures = [], [], 0
    for ep in range(episodes):
        kind = task_mix[ep % len(task_mix)]
        for attempt in range(max_attempts):
            erng = rng.spawn(ep, attempt)
            task = sample_task(kind, erng)
            start = reset(task, erng, cfg)
            states, actions, ok = run_expert(start, task, cfg, settle=settle)
            if ok:
                break
            failures += 1
        else:
            raise GenerationError(f"expert failed {max_attempts} times on episode {ep}")
        recs = episode_records(states, actions, task, grid, horizon, camera, dtype)
        chunks.append(recs)
        index_rows.extend((ep, t) for t in range(len(recs)))
    if failures:
        log.info("expert failures resampled: %d", failures)
    if episodes and failures / (episodes + failures) > max_failure_rate:
        raise GenerationError(f"expert failure rate {failures}/{episodes + failures} above threshold")
    records = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dtype)
    return records, index_rows


def dataset_bytes(records: np.ndarray, index_rows, n_episodes: int, grid: GridSpec,
                  horizon: int) -> bytes:
    motion, action = compute_stats(records)
    n = len(records)
    header = _HEADER.pack(MAGIC, VERSION, n_episodes, n, grid.K_h, grid.K_w, grid.T, horizon,
                          grid.width, grid.height, *motion.mean, *motion.std,
                          *action.mean, *action.std)
    start = _HEADER.size + n * _INDEX.itemsize
    index = np.zeros(n, dtype=_INDEX)
    if n:
        index["offset"] = start + np.arange(n, dtype=np.uint64) * records.dtype.itemsize
        index["episode"] = [e for e, _ in index_rows]
        index["step"] = [s for _, s in index_rows]
    body = header + index.tobytes() + records.tobytes()
    return body + hashlib.sha256(body).digest()


def generate_dataset(task_mix, episodes: int, grid: GridSpec, horizon: int, rng: Rng, path,
                     cfg: WorldConfig = WorldConfig()) -> Dataset:
    records, rows = generate_records(task_mix, episodes, grid, horizon, rng, cfg)
    blob = dataset_bytes(records, rows, episodes, grid, horizon)
    Path(path).write_bytes(blob)
    return parse_dataset(blob)


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size + DIGEST_SIZE:
        raise FormatError("dataset file is truncated")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("dataset checksum mismatch")
    fields = _HEADER.unpack_from(body, 0)
    magic, version, n_ep, n = fields[:4]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    kh, kw, t, h, w, ih = fields[4:10]
    stats = np.asarray(fields[10:], dtype=np.float64)
    grid = GridSpec(K_h=kh, K_w=kw, T=t, width=w, height=ih)
    dtype = record_dtype(grid, h)
    index = np.frombuffer(body, dtype=_INDEX, count=n, offset=_HEADER.size)
    start = _HEADER.size + n * _INDEX.itemsize
    if len(body) != start + n * dtype.itemsize:
        raise FormatError("record payload size does not match header")
    if n and (index["offset"][0] != start or np.any(np.diff(index["offset"].astype(np.int64)) != dtype.itemsize)):
        raise FormatError("index offsets are inconsistent")
    records = np.frombuffer(body, dtype=dtype, count=n, offset=start)
    return Dataset(grid, h, n_ep, records, index,
                   MotionNormalizer(stats[0:3], stats[3:6]),
                   ActionNormalizer(stats[6:10], stats[10:14]), digest.hex())


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())

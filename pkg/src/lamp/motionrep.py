"""Dense 3D scene-flow representation.

A scene-flow field is an array ``[K_h, K_w, T, 3]`` of per-timestep
displacement increments with channels ``(du, dv, dd)``: pixel motion on the
reference image plane and depth change along the reference optical axis.

Motion tokens group each 2x2 block of keypoints. Token ``(t, i, j)`` holds the
keypoints ``(2i, 2j), (2i, 2j+1), (2i+1, 2j), (2i+1, 2j+1)`` in that order
(row-major inside the patch) with the three channels innermost, giving 12
features. Tokens are laid out ``[T, K_h/2, K_w/2, 12]``; time is never
patched.

Camera convention: a pose maps world points to camera coordinates with
``p_cam = R @ p_world + t``; pixels follow ``u = fx * x / z + cx``,
``v = fy * y / z + cy`` and depth is ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lamp.errors import ConfigError, NumericError, ProjectionError, ShapeError

CHANNELS = ("du", "dv", "dd")


@dataclass(frozen=True)
class GridSpec:
    K_h: int = 8
    K_w: int = 8
    T: int = 8
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if self.K_h <= 0 or self.K_w <= 0 or self.T <= 0:
            raise ConfigError("grid extents must be positive")
        if self.K_h % 2 or self.K_w % 2:
            raise ConfigError(f"grid {self.K_h}x{self.K_w} must have even extents for 2x2 patches")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image extent must be positive")

    @property
    def K(self) -> int:
        return self.K_h * self.K_w

    @property
    def tokens_per_step(self) -> int:
        return (self.K_h // 2) * (self.K_w // 2)

    @property
    def num_tokens(self) -> int:
        return self.T * self.tokens_per_step

    @property
    def field_shape(self) -> tuple[int, int, int, int]:
        return (self.K_h, self.K_w, self.T, 3)


PAPER_GRID = GridSpec(K_h=20, K_w=20, T=32, width=224, height=224)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ConfigError("rotation must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def look_from(cls, center, rotation, intrinsics: Intrinsics) -> "CameraPose":
        """Pose of a camera located at ``center`` (world) with world-to-camera ``rotation``."""
        r = np.asarray(rotation, dtype=np.float64)
        return cls(r, -r @ np.asarray(center, dtype=np.float64), intrinsics)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def project(self, points_world: np.ndarray, eps: float = 1e-9) -> np.ndarray:
        """World points [..., 3] -> (u, v, d) [..., 3]."""
        pc = self.world_to_camera(np.asarray(points_world, dtype=np.float64))
        z = pc[..., 2]
        bad = z <= eps
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ProjectionError(f"point at index {idx} lies at or behind the camera plane (d={z[idx]:.3g})")
        k = self.intrinsics
        return np.stack([k.fx * pc[..., 0] / z + k.cx, k.fy * pc[..., 1] / z + k.cy, z], axis=-1)

    def unproject(self, uvd: np.ndarray) -> np.ndarray:
        """(u, v, d) [..., 3] -> world points [..., 3]."""
        uvd = np.asarray(uvd, dtype=np.float64)
        k = self.intrinsics
        d = uvd[..., 2]
        pc = np.stack([(uvd[..., 0] - k.cx) * d / k.fx, (uvd[..., 1] - k.cy) * d / k.fy, d], axis=-1)
        return self.camera_to_world(pc)


def make_grid(spec: GridSpec) -> np.ndarray:
    """Keypoint pixel coordinates [K, 2] as (u, v), row-major, half-cell margins."""
    us = (np.arange(spec.K_w) + 0.5) * spec.width / spec.K_w
    vs = (np.arange(spec.K_h) + 0.5) * spec.height / spec.K_h
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)


def tracks_to_increments(tracks: np.ndarray) -> np.ndarray:
    """Tracks [..., T+1, 3] -> increments [..., T, 3], computed in float64.

    The difference of two float32 values of similar magnitude is exact in
    float64, which makes the round trip with :func:`increments_to_tracks`
    bit-exact for float32 tracks.
    """
    tracks = np.asarray(tracks, dtype=np.float64)
    if not np.all(np.isfinite(tracks)):
        raise NumericError("tracks contain non-finite values")
    return tracks[..., 1:, :] - tracks[..., :-1, :]


def increments_to_tracks(field: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Prefix sums of increments [..., T, 3] from anchors [..., 3] -> tracks [..., T+1, 3]."""
    field = np.asarray(field, dtype=np.float64)
    out = np.empty(field.shape[:-2] + (field.shape[-2] + 1, 3), dtype=np.float64)
    out[..., 0, :] = anchors
    for t in range(field.shape[-2]):
        out[..., t + 1, :] = out[..., t, :] + field[..., t, :]
    return out


def to_reference_frame(tracks_world: np.ndarray, cam_per_frame, cam_ref: CameraPose) -> np.ndarray:
    """World tracks [K, T+1, 3] -> (u, v, d) tracks in ``cam_ref``.

    Points are already in world coordinates, so per-frame cameras drop out
    entirely; they are accepted to validate the frame count.
    """
    tracks_world = np.asarray(tracks_world, dtype=np.float64)
    if cam_per_frame is not None and len(cam_per_frame) != tracks_world.shape[-2]:
        raise ShapeError(f"{len(cam_per_frame)} cameras for {tracks_world.shape[-2]} frames")
    try:
        return cam_ref.project(tracks_world)
    except ProjectionError as exc:
        bad = np.argwhere(cam_ref.world_to_camera(tracks_world)[..., 2] <= 1e-9)[0]
        raise ProjectionError(f"keypoint {int(bad[0])} frame {int(bad[1])}: {exc}") from None


def camera_tracks_to_world(tracks_uvd: np.ndarray, cam_per_frame) -> np.ndarray:
    """Observed (u, v, d) per frame [K, T+1, 3] -> world points, undoing each frame's camera."""
    tracks_uvd = np.asarray(tracks_uvd, dtype=np.float64)
    out = np.empty_like(tracks_uvd)
    for f, cam in enumerate(cam_per_frame):
        out[:, f] = cam.unproject(tracks_uvd[:, f])
    return out


@dataclass
class MotionNormalizer:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    fitted: bool = True

    STD_FLOOR = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), self.STD_FLOOR)

    @classmethod
    def unfitted(cls) -> "MotionNormalizer":
        return cls(fitted=False)

    @classmethod
    def fit(cls, fields: np.ndarray, valid: np.ndarray | None = None) -> "MotionNormalizer":
        """Per-channel statistics of fields [N, K_h, K_w, T, 3]; ``valid`` [N, K_h, K_w] masks keypoints."""
        fields = np.asarray(fields, dtype=np.float64)
        vals = fields[np.asarray(valid, bool)] if valid is not None else fields
        vals = vals.reshape(-1, 3)
        if len(vals) == 0:
            return cls()
        return cls(vals.mean(axis=0), vals.std(axis=0))

    def _check(self):
        if not self.fitted:
            raise ConfigError("normalizer has not been fitted")


def normalize(field: np.ndarray, norm: MotionNormalizer) -> np.ndarray:
    norm._check()
    f = np.asarray(field)
    return ((f - norm.mean) / norm.std).astype(f.dtype if f.dtype.kind == "f" else np.float64)


def denormalize(field: np.ndarray, norm: MotionNormalizer) -> np.ndarray:
    norm._check()
    f = np.asarray(field)
    return (f * norm.std + norm.mean).astype(f.dtype if f.dtype.kind == "f" else np.float64)


def mask_depth(field: np.ndarray) -> np.ndarray:
    """Zero the depth-change channel; du and dv are copied untouched."""
    out = np.array(field, copy=True)
    out[..., 2] = 0
    return out


def patchify(field: np.ndarray) -> np.ndarray:
    """[..., K_h, K_w, T, 3] -> [..., T, K_h/2, K_w/2, 12]."""
    field = np.asarray(field)
    *lead, kh, kw, t, c = field.shape
    if kh % 2 or kw % 2:
        raise ConfigError(f"grid {kh}x{kw} has odd extents")
    nl = len(lead)
    x = field.reshape(*lead, kh // 2, 2, kw // 2, 2, t, c)
    # -> [..., T, i, j, pi, pj, C]
    x = x.transpose(*range(nl), nl + 4, nl, nl + 2, nl + 1, nl + 3, nl + 5)
    return np.ascontiguousarray(x).reshape(*lead, t, kh // 2, kw // 2, 4 * c)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    """[..., T, K_h/2, K_w/2, 12] -> [..., K_h, K_w, T, 3]."""
    tokens = np.asarray(tokens)
    *lead, t, hh, hw, f = tokens.shape
    if f % 4:
        raise ShapeError(f"token width {f} is not 4 x channels")
    c = f // 4
    nl = len(lead)
    x = tokens.reshape(*lead, t, hh, hw, 2, 2, c)
    # [..., T, i, j, pi, pj, C] -> [..., i, pi, j, pj, T, C]
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl + 2, nl + 4, nl, nl + 5)
    return np.ascontiguousarray(x).reshape(*lead, 2 * hh, 2 * hw, t, c)


def flatten_tokens(tokens: np.ndarray) -> np.ndarray:
    """[..., T, h, w, F] -> [..., T*h*w, F] sequence for the transformer."""
    *lead, t, h, w, f = tokens.shape
    return tokens.reshape(*lead, t * h * w, f)


def unflatten_tokens(seq: np.ndarray, spec: GridSpec) -> np.ndarray:
    *lead, _, f = seq.shape
    return seq.reshape(*lead, spec.T, spec.K_h // 2, spec.K_w // 2, f)

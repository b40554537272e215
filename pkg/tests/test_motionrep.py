import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lamp.errors import ConfigError, NumericError, ProjectionError, ShapeError
from lamp.motionrep import (
    CameraPose,
    GridSpec,
    Intrinsics,
    MotionNormalizer,
    denormalize,
    flatten_tokens,
    increments_to_tracks,
    make_grid,
    mask_depth,
    normalize,
    patchify,
    to_reference_frame,
    tracks_to_increments,
    unflatten_tokens,
    unpatchify,
)
from lamp.selftest import camera_compensation_error, check_bijections

K = Intrinsics(fx=10.0, fy=10.0, cx=0.0, cy=0.0)


def test_bijection_check_passes():
    res = check_bijections()
    assert res.passed, res.detail


# magnitudes within a 2^20 band keep every float32 difference exact in float64
finite32 = st.floats(-1e3, 1e3, width=32).filter(lambda x: x == 0 or abs(x) >= 1e-3)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (3, 5, 3), elements=finite32))
def test_tracks_round_trip_is_bit_exact(tracks):
    back = increments_to_tracks(tracks_to_increments(tracks), tracks[:, 0])
    assert np.array_equal(back, tracks.astype(np.float64))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (4, 2, 3, 3), elements=finite32))
def test_patchify_round_trip(field):
    assert np.array_equal(unpatchify(patchify(field)), field)


def test_patch_layout_is_row_major_within_cell():
    field = np.arange(4 * 4 * 1 * 3, dtype=np.float64).reshape(4, 4, 1, 3)
    tok = patchify(field)
    assert tok.shape == (1, 2, 2, 12)
    cell = tok[0, 0, 1].reshape(4, 3)
    np.testing.assert_array_equal(cell, [field[0, 2, 0], field[0, 3, 0], field[1, 2, 0], field[1, 3, 0]])


def test_flatten_tokens_round_trip():
    g = GridSpec()
    tok = np.random.default_rng(0).normal(size=(2, g.T, 4, 4, 12))
    seq = flatten_tokens(tok)
    assert seq.shape == (2, g.num_tokens, 12) and g.num_tokens == 128
    assert np.array_equal(unflatten_tokens(seq, g), tok)


def test_odd_grid_rejected():
    with pytest.raises(ConfigError):
        GridSpec(K_h=3)
    with pytest.raises(ConfigError):
        patchify(np.zeros((3, 4, 2, 3)))


def test_increments_reject_non_finite():
    t = np.zeros((2, 3, 3))
    t[1, 2, 0] = np.inf
    with pytest.raises(NumericError):
        tracks_to_increments(t)


def test_make_grid_uses_half_cell_margins():
    uv = make_grid(GridSpec(K_h=2, K_w=4, T=1, width=8, height=4))
    np.testing.assert_array_equal(uv[:4, 0], [1, 3, 5, 7])
    np.testing.assert_array_equal(uv[::4, 1], [1, 3])


def test_projection_round_trip_and_behind_camera():
    cam = CameraPose(np.eye(3), np.zeros(3), K)
    p = np.array([[0.3, -0.2, 2.0], [1.0, 1.0, 5.0]])
    uvd = cam.project(p)
    np.testing.assert_allclose(uvd[0], [1.5, -1.0, 2.0])
    np.testing.assert_allclose(cam.unproject(uvd), p, atol=1e-12)
    with pytest.raises(ProjectionError, match="index"):
        cam.project(np.array([[0.0, 0.0, -1.0]]))


def test_translating_object_has_constant_du_and_zero_dd():
    cam = CameraPose(np.eye(3), np.zeros(3), Intrinsics(1.0, 1.0, 0.0, 0.0))
    world = np.array([[[0.1 * t, 0.0, 2.0] for t in range(5)]])
    incr = tracks_to_increments(to_reference_frame(world, None, cam))
    np.testing.assert_allclose(incr[0, :, 0], 0.05, atol=1e-15)
    np.testing.assert_array_equal(incr[0, :, 2], 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_moving_camera_static_scene_zero_field(seed):
    assert camera_compensation_error(seed) <= 1e-9


def test_reference_frame_checks_camera_count():
    cam = CameraPose(np.eye(3), np.zeros(3), K)
    with pytest.raises(ShapeError):
        to_reference_frame(np.ones((2, 3, 3)), [cam] * 2, cam)


def test_rotation_must_be_orthonormal():
    with pytest.raises(ConfigError):
        CameraPose(np.ones((3, 3)), np.zeros(3), K)
    with pytest.raises(ConfigError):
        Intrinsics(0.0, 1.0, 0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2, 4, 3), elements=st.floats(-100, 100)),
       st.tuples(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(1e-4, 10)))
def test_normalize_round_trip(field, std):
    norm = MotionNormalizer(np.array([0.5, -1.0, 0.01]), np.array(std))
    np.testing.assert_allclose(denormalize(normalize(field, norm), norm), field, atol=1e-9)


def test_normalizer_fit_uses_valid_keypoints_only():
    f = np.zeros((1, 2, 2, 1, 3))
    f[0, 0, 0, 0] = [1.0, 2.0, 3.0]
    f[0, 1, 1, 0] = [100.0, 100.0, 100.0]
    valid = np.array([[[True, True], [True, False]]])
    n = MotionNormalizer.fit(f, valid)
    np.testing.assert_allclose(n.mean, [1 / 3, 2 / 3, 1.0])


def test_unfitted_normalizer_refuses():
    with pytest.raises(ConfigError):
        normalize(np.zeros(3), MotionNormalizer.unfitted())


def test_identity_normalizer_and_zero_variance():
    x = np.random.default_rng(1).normal(size=(2, 2, 1, 3))
    assert np.array_equal(normalize(x, MotionNormalizer()), x)
    n = MotionNormalizer.fit(np.full((1, 2, 2, 1, 3), 5.0))
    assert np.all(np.isfinite(normalize(np.full((2, 2, 1, 3), 5.0), n)))


def test_mask_depth_only_touches_depth():
    x = np.random.default_rng(2).normal(size=(2, 2, 3, 3))
    m = mask_depth(x)
    assert np.all(m[..., 2] == 0)
    assert np.array_equal(m[..., :2], x[..., :2])

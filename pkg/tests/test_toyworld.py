import numpy as np
import pytest

from lamp.errors import FormatError
from lamp.gradcore import Rng
from lamp.motionrep import GridSpec
from lamp.toyworld.dataset import (
    compute_stats,
    dataset_bytes,
    generate_dataset,
    generate_records,
    load_dataset,
    parse_dataset,
)
from lamp.toyworld.render import default_camera, far_depth, ground_truth_flow, render
from lamp.toyworld.world import (
    TASK_KINDS,
    TaskSpec,
    WorldConfig,
    is_success,
    progress_score,
    reset,
    run_expert,
    sample_task,
    step,
)

GRID = GridSpec()


@pytest.fixture(scope="module")
def small_records():
    return generate_records(TASK_KINDS, 3, GRID, 4, Rng(5))


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_expert_solves_every_task(kind):
    solved = 0
    for ep in range(20):
        r = Rng(11).spawn(ep)
        task = sample_task(kind, r)
        _, _, ok = run_expert(reset(task, r), task)
        solved += ok
    assert solved >= 19


def test_step_is_deterministic_and_pure():
    task = TaskSpec("pick_place", 2)
    s0 = reset(task, Rng(0))
    before = s0.fingerprint()
    a = np.array([0.01, -0.02, -0.03, 1.0])
    assert step(s0, a).fingerprint() == step(s0, a).fingerprint()
    assert s0.fingerprint() == before


def test_step_clamps_motion():
    s0 = reset(TaskSpec("push", 0), Rng(1))
    s1 = step(s0, np.array([1.0, 0.0, 0.0, 0.0]))
    assert s1.gripper[0] - s0.gripper[0] == pytest.approx(WorldConfig().max_step)
    with pytest.raises(ValueError):
        step(s0, np.array([np.nan, 0, 0, 0]))


def test_zero_policy_never_succeeds_at_pick_place():
    task = TaskSpec("pick_place", 3)
    s = reset(task, Rng(2))
    traj = [s]
    for _ in range(30):
        traj.append(step(traj[-1], np.zeros(4)))
    assert not is_success(traj[-1], task)
    assert progress_score(traj, task) == 0.0


def test_progress_score_of_expert_is_one():
    task = TaskSpec("stack", 4)
    states, _, ok = run_expert(reset(task, Rng(3)), task)
    assert ok and progress_score(states, task) == 1.0


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("push", 4)
    assert TaskSpec.from_instruction(5).kind == "stack"


def test_render_shapes_and_depth_range():
    s = reset(TaskSpec("stack", 4), Rng(4))
    cam = default_camera()
    rgb, depth = render(s, cam)
    assert rgb.shape == (3, 32, 32) and depth.shape == (32, 32)
    assert rgb.min() >= 0 and rgb.max() <= 1
    assert depth.max() == pytest.approx(far_depth(cam))
    assert depth.min() < far_depth(cam)


def test_static_world_has_zero_flow():
    s = reset(TaskSpec("push", 1), Rng(6))
    cam = default_camera()
    field, valid, tracks = ground_truth_flow([s] * (GRID.T + 1), [cam] * (GRID.T + 1), cam, GRID)
    assert field.shape == GRID.field_shape
    assert np.all(field == 0) and np.all(valid)


def test_gripper_motion_appears_in_flow():
    task = TaskSpec("push", 0)
    s = reset(task, Rng(7))
    states = [s]
    for _ in range(GRID.T):
        states.append(step(states[-1], np.array([0.05, 0.0, 0.0, 0.0])))
    cam = default_camera()
    field, _, _ = ground_truth_flow(states, [cam] * (GRID.T + 1), cam, GRID)
    moving = np.abs(field[..., 0]).max(axis=-1) > 0
    if moving.any():
        assert np.all(field[..., 0][moving] >= 0)


def test_record_invariants(small_records):
    recs, rows = small_records
    assert len(recs) == len(rows)
    assert np.all(np.isfinite(recs["flow"]))
    assert set(np.unique(recs["valid"])) <= {0.0, 1.0}
    assert np.all((recs["actions"][..., 3] == 0) | (recs["actions"][..., 3] == 1))
    assert np.all(np.abs(recs["actions"][..., :3]) <= WorldConfig().max_step + 1e-6)


def test_dataset_round_trip_and_stats(tmp_path, small_records):
    recs, rows = small_records
    ds = generate_dataset(TASK_KINDS, 3, GRID, 4, Rng(5), tmp_path / "a.lampds")
    assert ds.records.tobytes() == recs.tobytes()
    blob = (tmp_path / "a.lampds").read_bytes()
    assert dataset_bytes(ds.records, list(zip(ds.index["episode"], ds.index["step"])), 3, GRID, 4) == blob
    again = load_dataset(tmp_path / "a.lampds")
    assert again.records.tobytes() == ds.records.tobytes()
    m, a = compute_stats(again.records)
    np.testing.assert_allclose(again.motion_norm.mean, m.mean, atol=1e-6)
    np.testing.assert_allclose(again.motion_norm.std, m.std, rtol=1e-6)
    np.testing.assert_allclose(again.action_norm.std, a.std, rtol=1e-6)
    assert again.observations(np.arange(2)).shape == (2, 4, 32, 32)


def test_dataset_generation_is_deterministic(tmp_path):
    generate_dataset(["stack"], 1, GRID, 4, Rng(9), tmp_path / "x")
    generate_dataset(["stack"], 1, GRID, 4, Rng(9), tmp_path / "y")
    assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()


def test_corrupted_dataset_is_rejected(tmp_path):
    ds = generate_dataset(["push"], 1, GRID, 4, Rng(2), tmp_path / "d")
    blob = bytearray((tmp_path / "d").read_bytes())
    for pos in (0, 20, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(FormatError):
            parse_dataset(bytes(bad))
    with pytest.raises(FormatError):
        parse_dataset(bytes(blob[:-40]))
    assert len(ds) > 0


def test_empty_dataset(tmp_path):
    ds = generate_dataset(["push"], 0, GRID, 4, Rng(0), tmp_path / "e")
    assert len(ds) == 0

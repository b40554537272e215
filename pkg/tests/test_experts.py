import numpy as np
import pytest

from lamp import flowmatch
from lamp.action_expert import ActionExpert, ActionExpertConfig, sample_chunk
from lamp.errors import ConfigError, ShapeError
from lamp.gradcore import Parameter, Rng, Tensor, no_grad
from lamp.guidance import GuidanceConfig, GuidanceModule, guide, guide_add, guide_none
from lamp.motion_expert import (
    MotionExpert,
    MotionExpertConfig,
    generate_flow,
    one_step_hidden,
    sample_noise,
)
from lamp.motionrep import MotionNormalizer, denormalize, unpatchify
from lamp.percept import PerceptConfig, PerceptionEncoder, patchify_image
from lamp.selftest import expert_errors

SMALL_ME = MotionExpertConfig(d_m=16, layers=1, heads=2, time_dim=8, d_z=16)
SMALL_P = PerceptConfig(d_z=16, layers=1, heads=2)


@pytest.fixture(scope="module")
def z():
    enc = PerceptionEncoder(SMALL_P, Rng(0))
    obs = Rng(1).uniform((3, 4, 32, 32))
    with no_grad():
        return enc(obs, np.array([0, 2, 5]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_layer_expert_gradients(seed):
    errs = expert_errors(seed)
    assert max(errs.values()) <= 1e-5, errs


# -- perception --------------------------------------------------------------------------

def test_percept_shapes_and_validation(z):
    assert z.shape == (3, 17, 16)
    enc = PerceptionEncoder(SMALL_P, Rng(0))
    with pytest.raises(ShapeError):
        enc(np.zeros((1, 3, 32, 32)), [0])
    with pytest.raises(ShapeError):
        enc(np.zeros((2, 4, 32, 32)), [0])
    with pytest.raises(ValueError):
        enc(np.zeros((1, 4, 32, 32)), [99])


def test_patchify_image_layout():
    obs = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    p = patchify_image(obs, 2)
    assert p.shape == (1, 4, 8)
    np.testing.assert_array_equal(p[0, 1, :4], obs[0, 0, 0:2, 2:4].ravel())


# -- motion expert ------------------------------------------------------------------------

def test_fresh_motion_expert_predicts_zero_velocity(z):
    me = MotionExpert(SMALL_ME, Rng(2))
    x = sample_noise(me, 3, Rng(3))
    v, h = me(x, 0.0, z)
    assert np.all(v.data == 0)
    assert h.shape == (3, 128, 16)


def test_zero_velocity_generation_returns_denormalized_noise(z):
    me = MotionExpert(SMALL_ME, Rng(2))
    norm = MotionNormalizer(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 0.5]))
    out = generate_flow(me, z, flowmatch.SolverSchedule(10), Rng(4), norm)
    noise = sample_noise(me, 3, Rng(4)).data
    expect = denormalize(unpatchify(noise.reshape(3, 8, 4, 4, 12).astype(np.float64)), norm)
    np.testing.assert_array_equal(out, expect)
    assert out.shape == (3, 8, 8, 8, 3)


def test_call_counts(z):
    me = MotionExpert(SMALL_ME, Rng(2))
    one_step_hidden(me, z, flowmatch.SolverSchedule(10), Rng(0))
    assert me.velocity_calls == 1
    generate_flow(me, z, flowmatch.SolverSchedule(10), Rng(0))
    assert me.velocity_calls == 11


def test_one_step_hidden_is_deterministic_and_detached(z):
    me = MotionExpert(SMALL_ME, Rng(2))
    a = one_step_hidden(me, z, flowmatch.SolverSchedule(10), Rng(5))
    b = one_step_hidden(me, z, flowmatch.SolverSchedule(10), Rng(5))
    assert np.array_equal(a.data, b.data) and not a.requires_grad


def test_motion_expert_shape_errors(z):
    me = MotionExpert(SMALL_ME, Rng(2))
    with pytest.raises(ShapeError):
        me(Tensor(np.zeros((3, 100, 12))), 0.0, z)
    with pytest.raises(ShapeError, match="width"):
        me(sample_noise(me, 3, Rng(0)), 0.0, Tensor(np.zeros((3, 17, 8))))
    with pytest.raises(ConfigError):
        MotionExpertConfig(d_m=10, heads=4)


def test_motion_expert_uses_context():
    cfg = SMALL_ME
    me = MotionExpert(cfg, Rng(2))
    me.out_proj.weight.data[:] = Rng(9).normal(me.out_proj.weight.shape) * 0.1
    x = sample_noise(me, 1, Rng(0))
    z1, z2 = Tensor(Rng(1).normal((1, 17, 16))), Tensor(Rng(2).normal((1, 17, 16)))
    assert not np.allclose(me.velocity(x, 0.3, z1).data, me.velocity(x, 0.3, z2).data)


# -- guidance -----------------------------------------------------------------------------

def _gcfg(mode, **kw):
    return GuidanceConfig(mode=mode, heads=2, d_z=16, d_m=16, **kw)


@pytest.fixture(scope="module")
def zm():
    return Tensor(Rng(7).normal((3, 128, 16)))


def test_gate_closed_is_identity(z, zm):
    mod = GuidanceModule(_gcfg("gated"), Rng(0))
    mod.gate.data[...] = -30.0
    assert np.abs(guide(mod, z, zm).data - z.data).max() <= 1e-8


def test_gate_zero_is_exactly_half_cross_attention(z, zm):
    mod = GuidanceModule(_gcfg("gated"), Rng(0))
    assert float(mod.gate.data) == 0.0 and mod.gate.shape == ()
    out = guide(mod, z, zm).data
    expect = (z + mod.cross_attention(z, zm) * 0.5).data
    assert np.array_equal(out, expect)


def test_gate_gradient_is_nonzero(z, zm):
    mod = GuidanceModule(_gcfg("gated"), Rng(0))
    proj = Tensor(Rng(3).normal(z.shape))
    (guide(mod, z, zm) * proj).sum().backward()
    assert mod.gate.grad is not None and float(mod.gate.grad) != 0.0


def test_add_starts_as_token_mean(z, zm):
    mod = GuidanceModule(_gcfg("add"), Rng(0))
    out = guide_add(mod, z, zm).data
    h = mod.proj(zm).data.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out, z.data + h, rtol=1e-5, atol=1e-5)
    assert not hasattr(mod, "gate")


def test_concat_mlp_and_none(z, zm):
    mod = GuidanceModule(_gcfg("concat_mlp"), Rng(0))
    assert mod(z, zm).shape == z.shape
    none = GuidanceModule(_gcfg("none"), Rng(0))
    assert none(z) is z and guide_none(z) is z
    assert none.num_parameters() == 0


def test_mode_mismatch_and_shape_errors(z, zm):
    mod = GuidanceModule(_gcfg("gated"), Rng(0))
    with pytest.raises(ConfigError):
        guide_add(mod, z, zm)
    with pytest.raises(ShapeError):
        mod(z, None)
    with pytest.raises(ShapeError):
        mod(z, Tensor(np.zeros((3, 128, 8))))
    with pytest.raises(ConfigError):
        GuidanceConfig(mode="sum")


# -- action expert ------------------------------------------------------------------------

def test_action_expert_zero_velocity_and_sampling(z):
    ae = ActionExpert(ActionExpertConfig(d_a=16, heads=2, d_z=16, time_dim=8), Rng(0))
    state = np.zeros((3, 4))
    a0 = Rng(4).normal((3, 4, 4))
    chunk = sample_chunk(ae, z, state, 0.1, flowmatch.SolverSchedule(10), Rng(4))
    np.testing.assert_allclose(chunk, a0.astype(np.float32), rtol=0, atol=0)
    assert ae.velocity_calls == 10


def test_action_expert_depends_on_context_and_state(z):
    ae = ActionExpert(ActionExpertConfig(d_a=16, heads=2, d_z=16, time_dim=8), Rng(0))
    ae.head.weight.data[:] = Rng(1).normal(ae.head.weight.shape)
    x = Tensor(Rng(2).normal((3, 4, 4)))
    base = ae(x, 0.5, z, np.zeros((3, 4)), 0.1).data
    assert not np.allclose(base, ae(x, 0.5, z, np.ones((3, 4)), 0.1).data)
    assert not np.allclose(base, ae(x, 0.5, Tensor(z.data * 0.5), np.zeros((3, 4)), 0.1).data)
    assert not np.allclose(base, ae(x, 0.5, z, np.zeros((3, 4)), 0.3).data)


def test_action_expert_shape_errors(z):
    ae = ActionExpert(ActionExpertConfig(d_a=16, heads=2, d_z=16, time_dim=8), Rng(0))
    x = Tensor(np.zeros((3, 4, 4)))
    with pytest.raises(ShapeError):
        ae(Tensor(np.zeros((3, 5, 4))), 0.5, z, np.zeros((3, 4)), 0.1)
    with pytest.raises(ShapeError):
        ae(x, 0.5, z, np.zeros((3, 3)), 0.1)
    with pytest.raises(ShapeError):
        ae(x, 0.5, Tensor(np.zeros((2, 17, 16))), np.zeros((3, 4)), 0.1)
    with pytest.raises(ConfigError):
        ActionExpertConfig(horizon=0)


def test_frozen_parameters_get_no_gradient(z, zm):
    mod = GuidanceModule(_gcfg("gated"), Rng(0))
    mod.freeze()
    out = guide(mod, z, zm)
    assert not out.requires_grad
    assert all(isinstance(p, Parameter) and p.frozen for p in mod.parameters())

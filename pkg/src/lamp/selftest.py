"""Fast invariant checks run by ``lamp selftest`` and by the acceptance tests.

Each ``check_*`` function returns a :class:`CheckResult`; ``run_all`` runs
the five of them and optionally prints one line per check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from lamp import flowmatch
from lamp.action_expert import ActionExpert, ActionExpertConfig, action_loss
from lamp.config import Stage1Config, Stage2Config
from lamp.gradcore import (
    Rng,
    Tensor,
    attention,
    concat,
    default_dtype,
    embedding,
    expand,
    gate,
    gelu,
    grad_check,
    grad_check_params,
    layer_norm,
    modulate,
    mse,
    no_grad,
    sigmoid,
    silu,
    softmax,
)
from lamp.guidance import GuidanceConfig, GuidanceModule
from lamp.motion_expert import MotionExpert, MotionExpertConfig, generate_flow, one_step_hidden
from lamp.motionrep import (
    CameraPose,
    GridSpec,
    camera_tracks_to_world,
    increments_to_tracks,
    patchify,
    to_reference_frame,
    tracks_to_increments,
    unpatchify,
)
from lamp.percept import PerceptConfig, PerceptionEncoder

GRAD_TOL = 1e-5
GRAD_SEEDS = 20


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str = ""
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.criterion}. {self.name}: {self.detail}"


# -- 1. gradients ---------------------------------------------------------------------

def _t(r: Rng, shape) -> Tensor:
    return Tensor(r.normal(shape), dtype=np.float64)


PRIMITIVES = {
    "add": ([(3, 4), (4,)], lambda a, b: a + b),
    "add_scalar": ([(3, 4), ()], lambda a, b: a + b),
    "sub": ([(2, 3, 4), (3, 4)], lambda a, b: a - b),
    "mul": ([(3, 4), (3, 4)], lambda a, b: a * b),
    "mul_broadcast": ([(2, 3, 4), (4,)], lambda a, b: a * b),
    "neg": ([(3, 4)], lambda a: -a),
    "div_const": ([(3, 4)], lambda a: a / 2.5),
    "expand": ([(3, 1, 4)], lambda a: expand(a, (3, 5, 4))),
    "matmul": ([(3, 4), (4, 5)], lambda a, b: a @ b),
    "matmul_batched": ([(2, 3, 4), (2, 4, 5)], lambda a, b: a @ b),
    "matmul_broadcast": ([(2, 3, 4), (4, 5)], lambda a, b: a @ b),
    "reshape": ([(3, 4)], lambda a: a.reshape(2, 6)),
    "transpose": ([(2, 3, 4)], lambda a: a.transpose(2, 0, 1)),
    "concat": ([(2, 3), (2, 5)], lambda a, b: concat([a, b], axis=1)),
    "getitem_slice": ([(4, 5)], lambda a: a[:, 1:3]),
    "getitem_repeat": ([(4, 5)], lambda a: a[[0, 2, 2]]),
    "sum": ([(3, 4, 2)], lambda a: a.sum(axis=1)),
    "mean": ([(3, 4, 2)], lambda a: a.mean(axis=0)),
    "sigmoid": ([(3, 4)], lambda a: sigmoid(a * 4.0)),
    "gelu": ([(3, 4)], lambda a: gelu(a * 2.0)),
    "silu": ([(3, 4)], lambda a: silu(a * 2.0)),
    "softmax": ([(3, 5)], lambda a: softmax(a * 2.0, axis=-1)),
    "layer_norm": ([(3, 5), (5,), (5,)], lambda x, s, b: layer_norm(x, s, b)),
    "layer_norm_plain": ([(3, 5)], lambda x: layer_norm(x)),
    "embedding": ([(6, 4)], lambda t: embedding(t, np.array([0, 3, 3, 5]))),
    "mse": ([(3, 4)], lambda a: mse(a, np.linspace(-1, 1, 12).reshape(3, 4),
                                     np.array([1.0, 0.0, 1.0, 1.0]))),
    "attention": ([(2, 3, 4), (2, 5, 4), (2, 5, 4)], lambda q, k, v: attention(q, k, v, 2)),
    "modulate": ([(2, 3, 4), (2, 4), (2, 4)], lambda x, s, c: modulate(x, s, c)),
    "gate": ([(2, 3, 4), (2, 4)], lambda x, g: gate(x, g)),
}


def primitive_error(name: str, seed: int) -> float:
    shapes, fn = PRIMITIVES[name]
    r = Rng(seed).spawn(17)
    with default_dtype(np.float64):
        inputs = [_t(r.spawn(i), s) for i, s in enumerate(shapes)]
        proj = r.spawn(99).normal(fn(*inputs).shape)

        def obj(_x):
            return (fn(*inputs) * Tensor(proj)).sum()

        return max(grad_check(obj, x) for x in inputs)


def _randomize(module, r: Rng, scale: float = 0.3) -> None:
    # zero-initialized heads would make most upstream gradients vanish
    for i, p in enumerate(module.parameters()):
        p.data[...] = r.spawn(i).normal(p.shape) * scale


TINY_GRID = GridSpec(K_h=4, K_w=4, T=2, width=16, height=16)


def expert_errors(seed: int, max_coords: int = 6) -> dict[str, float]:
    """Worst relative gradient error of each 1-layer component on a tiny config."""
    r = Rng(seed).spawn(23)
    out = {}
    with default_dtype(np.float64):
        z = _t(r.spawn(0), (2, 5, 6))
        zm = _t(r.spawn(1), (2, 8, 8))

        me = MotionExpert(MotionExpertConfig(d_m=8, layers=1, heads=2, time_dim=4, d_z=6,
                                             grid=TINY_GRID, mlp_ratio=2), r.spawn(2))
        _randomize(me, r.spawn(3))
        data, noise = _t(r.spawn(4), (2, 8, 12)), _t(r.spawn(5), (2, 8, 12))
        tau = np.array([0.3, 0.8])

        def motion_loss():
            return flowmatch.flow_matching_loss(me.velocity, data, noise, tau, z)

        out["motion_expert"] = max(grad_check_params(motion_loss, me.parameters(), max_coords=max_coords,
                                                     rng=r.spawn(6)),
                                   grad_check(lambda _x: motion_loss(), z))

        ae = ActionExpert(ActionExpertConfig(d_a=8, layers=1, heads=2, horizon=3, time_dim=4, d_z=6),
                          r.spawn(7))
        _randomize(ae, r.spawn(8))
        a1, a0 = _t(r.spawn(9), (2, 3, 4)), _t(r.spawn(10), (2, 3, 4))
        state = r.spawn(11).normal((2, 4))

        def act_loss():
            return action_loss(ae, a1, a0, tau, z, state, 0.1)

        out["action_expert"] = max(grad_check_params(act_loss, ae.parameters(), max_coords=max_coords,
                                                     rng=r.spawn(12)),
                                   grad_check(lambda _x: act_loss(), z))

        for j, mode in enumerate(("gated", "add", "concat_mlp")):
            gm = GuidanceModule(GuidanceConfig(mode=mode, heads=2, d_z=6, d_m=8, z_tokens=5, m_tokens=8,
                                               mlp_hidden=10), r.spawn(20 + j))
            _randomize(gm, r.spawn(30 + j))
            proj = Tensor(r.spawn(40 + j).normal((2, 5, 6)))

            def g_loss():
                return (gm(z, zm) * proj).sum()

            out[f"guidance_{mode}"] = max(
                grad_check_params(g_loss, gm.parameters(), max_coords=max_coords, rng=r.spawn(50 + j)),
                grad_check(lambda _x: g_loss(), z), grad_check(lambda _x: g_loss(), zm))

        pe = PerceptionEncoder(PerceptConfig(image_size=8, patch=4, d_z=6, layers=1, heads=2), r.spawn(60))
        _randomize(pe, r.spawn(61))
        obs = r.spawn(62).uniform((2, 4, 8, 8))
        ins = np.array([0, 1])
        proj = Tensor(r.spawn(63).normal((2, 5, 6)))
        out["percept"] = grad_check_params(lambda: (pe(obs, ins) * proj).sum(), pe.parameters(),
                                           max_coords=max_coords, rng=r.spawn(64))
    return out


def check_gradients(seeds: int = GRAD_SEEDS) -> CheckResult:
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name in PRIMITIVES:
            worst[name] = max(worst.get(name, 0.0), primitive_error(name, seed))
        for name, err in expert_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] <= GRAD_TOL and secs <= 120.0
    return CheckResult(1, "gradient correctness", ok,
                       f"{len(worst)} ops/components x {seeds} seeds, worst {top} {worst[top]:.2e} "
                       f"(tol {GRAD_TOL:g}), {secs:.1f}s",
                       {"worst": worst, "seconds": secs})


# -- 2. flow-matching identities ------------------------------------------------------------

def linear_ode_error(steps: int, lam: float = 1.0) -> float:
    x = flowmatch.euler_integrate(lambda x, tau, c: x * lam, Tensor(np.ones(1), dtype=np.float64),
                                  flowmatch.SolverSchedule(steps))
    return abs(float(x.data[0]) - np.exp(lam))


def check_flow_identities(seed: int = 0) -> CheckResult:
    r = Rng(seed)
    problems = []
    with default_dtype(np.float64):
        noise, data = r.spawn(0).normal((4, 6, 3)), r.spawn(1).normal((4, 6, 3))
        if not (np.array_equal(flowmatch.interpolate(noise, data, 0.0).data, noise)
                and np.array_equal(flowmatch.interpolate(noise, data, 1.0).data, data)
                and np.array_equal(flowmatch.interpolate(noise, data, np.zeros(4)).data, noise)
                and np.array_equal(flowmatch.interpolate(noise, data, np.ones(4)).data, data)):
            problems.append("interpolate endpoints")

        oracle = Tensor(data - noise)
        rec = flowmatch.euler_integrate(lambda x, tau, c: oracle, Tensor(noise), flowmatch.SolverSchedule(10))
        oracle_err = float(np.abs(rec.data - data).max())
        if oracle_err > 1e-12:
            problems.append(f"oracle Euler error {oracle_err:.1e}")

        def field(x, tau, c):
            return x * Tensor(np.sin(3 * tau) + 0.5) + c

        sched = flowmatch.SolverSchedule(10)
        cond = Tensor(r.spawn(2).normal((4, 6, 3)))
        full = flowmatch.euler_integrate(field, Tensor(noise), sched, cond)
        part = flowmatch.partial_denoise(field, Tensor(noise), sched, 10, cond)
        if not np.array_equal(full.data, part.data):
            problems.append("partial_denoise(N) differs from euler_integrate")

    ratios = [linear_ode_error(n) / linear_ode_error(2 * n) for n in (10, 20, 40, 80)]
    if not all(1.6 <= q <= 2.4 for q in ratios):
        problems.append(f"Euler error ratios {np.round(ratios, 3).tolist()}")
    return CheckResult(2, "flow-matching identities", not problems,
                       "; ".join(problems) or f"oracle error {oracle_err:.1e}, "
                       f"error ratios {np.round(ratios, 3).tolist()}",
                       {"oracle_error": oracle_err, "ratios": ratios})


# -- 3. Beta sampler --------------------------------------------------------------------------

def check_beta_sampler(seed: int = 0, n: int = 100_000) -> CheckResult:
    spot = float(flowmatch.inverse_cdf_beta1(0.125, 1.5))
    draws = flowmatch.sample_flow_time(flowmatch.FlowTimeSampler(1.5, 1.0), Rng(seed), n)
    m = float(draws.mean())
    ok = spot == 0.25 and abs(m - 0.6) <= 0.01 and draws.min() > 0 and draws.max() < 1
    return CheckResult(3, "Beta(1.5, 1) sampler", ok,
                       f"F^-1(0.125) = {spot!r}, mean of {n} draws {m:.4f}", {"spot": spot, "mean": m})


# -- 4. representation bijections ------------------------------------------------------------

def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def moving_cameras(n: int, rng: Rng) -> list[CameraPose]:
    from lamp.toyworld.render import default_camera

    base = default_camera()
    cams = []
    for i in range(n):
        r = rng.spawn(i)
        rot = _rotation(r.normal(3), 0.15 * r.uniform()) @ base.rotation
        center = base.center + r.normal(3) * np.array([0.1, 0.1, 0.05])
        cams.append(CameraPose.look_from(center, rot, base.intrinsics))
    return cams


def camera_compensation_error(seed: int, points: int = 64, frames: int = 9) -> float:
    r = Rng(seed)
    world = np.concatenate([r.spawn(0).uniform((points, 2)) * 0.6 + 0.2,
                            r.spawn(1).uniform((points, 1)) * 0.2], axis=1)
    cams = moving_cameras(frames, r.spawn(2))
    observed = np.stack([c.project(world) for c in cams], axis=1)
    tracks = to_reference_frame(camera_tracks_to_world(observed, cams), cams, cams[0])
    return float(np.abs(tracks_to_increments(tracks)).max())


def check_bijections(seed: int = 0, n: int = 1000) -> CheckResult:
    r = Rng(seed)
    bad = []
    for i in range(n):
        ri = r.spawn(i)
        tracks = (ri.spawn(0).normal((16, 9, 3)) * 8.0 + 16.0).astype(np.float32)
        incr = tracks_to_increments(tracks)
        back = increments_to_tracks(incr, tracks[:, 0])
        if not np.array_equal(back.astype(np.float32), tracks) or not np.array_equal(back, tracks):
            bad.append(f"tracks {i}")
        fld = ri.spawn(1).normal((2, 6, 4, 5, 3)).astype(np.float32)
        if not np.array_equal(unpatchify(patchify(fld)), fld):
            bad.append(f"unpatchify {i}")
        tok = ri.spawn(2).normal((5, 3, 2, 12)).astype(np.float32)
        if not np.array_equal(patchify(unpatchify(tok)), tok):
            bad.append(f"patchify {i}")
    cam_err = max(camera_compensation_error(seed * 1000 + k) for k in range(10))
    ok = not bad and cam_err <= 1e-9
    detail = (f"{n} fields round-trip bit-exactly" if not bad else f"{len(bad)} failures, e.g. {bad[0]}")
    return CheckResult(4, "representation bijections", ok,
                       f"{detail}; static scene / moving camera max |field| {cam_err:.1e}",
                       {"failures": bad, "camera_error": cam_err})


# -- 5. one-step guidance cost --------------------------------------------------------------

def desk_bundle(seed: int = 0):
    from lamp.runtime import PolicyBundle
    from lamp.toyworld.dataset import ActionNormalizer
    from lamp.motionrep import MotionNormalizer
    from lamp.trainer import build_stage1_models, build_stage2_models

    s1, s2, grid = Stage1Config(), Stage2Config(), GridSpec()
    rng = Rng(seed)
    m1 = build_stage1_models(s1, grid, rng.spawn(1))
    m2 = build_stage2_models(s2, s1, grid, 4, rng.spawn(2))
    return PolicyBundle(m1["percept"], m1["motion"], m2["guidance"], m2["action"], MotionNormalizer(),
                        ActionNormalizer.identity(), grid)


def check_guidance_cost(seed: int = 0, batch: int = 4, repeats: int = 7) -> CheckResult:
    from lamp.runtime import infer

    bundle = desk_bundle(seed)
    rng = Rng(seed)
    obs = rng.spawn(0).uniform((batch, 4, 32, 32)).astype(np.float32)
    ins = np.zeros(batch, dtype=np.int64)
    state = np.zeros((batch, 4))
    me = bundle.motion
    before = me.velocity_calls
    infer(bundle, obs, ins, state, rng.spawn(1))
    per_decision = me.velocity_calls - before
    with no_grad():
        z = bundle.percept(obs, ins)
    before = me.velocity_calls
    generate_flow(me, z, bundle.schedule, rng.spawn(2))
    full_calls = me.velocity_calls - before

    def timed(fn):
        out = []
        for k in range(repeats):
            t0 = time.perf_counter()
            fn(k)
            out.append(time.perf_counter() - t0)
        return float(np.min(out))  # least-disturbed run; the median drifts under load

    one = timed(lambda k: one_step_hidden(me, z, bundle.schedule, rng.spawn(10 + k)))
    full = timed(lambda k: generate_flow(me, z, bundle.schedule, rng.spawn(30 + k)))
    ratio = one / full
    ok = per_decision == 1 and full_calls == 10 and ratio <= 0.15
    return CheckResult(5, "one-step guidance cost", ok,
                       f"{per_decision} motion evaluation per decision vs {full_calls} for full generation; "
                       f"wall-clock ratio {ratio:.3f} (limit 0.15)",
                       {"calls": per_decision, "full_calls": full_calls, "ratio": ratio})


CHECKS = (check_gradients, check_flow_identities, check_beta_sampler, check_bijections, check_guidance_cost)


def run_all(verbose: bool = False) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        res = check()
        if verbose:
            print(res.line(), flush=True)
        results.append(res)
    return results

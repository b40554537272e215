"""Two-stage training: motion-prior pretraining, then motion-guided policy learning.

Stage 1 trains the perception encoder and the motion expert jointly with
the flow-matching loss on normalized, patchified scene flow (uniform flow
time, invalid keypoints masked out of the mean). Stage 2 freezes both,
harvests one-step motion hidden states without gradients, fuses them into
the context with the guidance module and trains guidance plus action
expert on the action flow-matching loss with Beta(1.5, 1) flow times.

Both stages are deterministic functions of (config, seed, dataset bytes):
every random draw comes from a counter-based stream keyed by step.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lamp import flowmatch
from lamp.action_expert import ActionExpert, ActionExpertConfig, action_loss
from lamp.checkpoint import Checkpoint, load_into, parse_checkpoint, save_checkpoint
from lamp.config import Stage1Config, Stage2Config, from_dict
from lamp.errors import ConfigError, TrainingError
from lamp.gradcore import AdamW, Module, Rng, Tensor, clip_grad_norm, cosine_with_min_lr, no_grad
from lamp.guidance import GuidanceConfig, GuidanceModule
from lamp.motion_expert import MotionExpert, MotionExpertConfig, generate_flow, one_step_hidden
from lamp.motionrep import GridSpec, MotionNormalizer, mask_depth, normalize, patchify
from lamp.percept import PerceptConfig, PerceptionEncoder
from lamp.toyworld.dataset import ActionNormalizer, Dataset

log = logging.getLogger(__name__)


# -- model construction from config snapshots ---------------------------------

def percept_config(s1: Stage1Config, grid: GridSpec) -> PerceptConfig:
    return PerceptConfig(image_size=grid.width, patch=s1.patch, d_z=s1.d_z,
                         layers=s1.percept_layers, heads=s1.percept_heads)


def motion_config(s1: Stage1Config, grid: GridSpec) -> MotionExpertConfig:
    return MotionExpertConfig(d_m=s1.d_m, layers=s1.motion_layers, heads=s1.motion_heads,
                              time_dim=s1.time_dim, d_z=s1.d_z, grid=grid,
                              context_attention=s1.motion_context_attention,
                              aligned_context=s1.motion_aligned_context)


def guidance_config(s2: Stage2Config, s1: Stage1Config, grid: GridSpec) -> GuidanceConfig:
    return GuidanceConfig(mode=s2.guidance_mode, heads=s2.guidance_heads, g0=s2.guidance_g0,
                          d_z=s1.d_z, d_m=s1.d_m, z_tokens=percept_config(s1, grid).num_tokens,
                          m_tokens=grid.num_tokens, mlp_hidden=s2.guidance_hidden)


def action_config(s2: Stage2Config, s1: Stage1Config, grid: GridSpec, horizon: int) -> ActionExpertConfig:
    return ActionExpertConfig(d_a=s2.d_a, layers=s2.action_layers, heads=s2.action_heads,
                              horizon=horizon, time_dim=s2.time_dim, d_z=s1.d_z)


def build_stage1_models(s1: Stage1Config, grid: GridSpec, rng: Rng) -> dict[str, Module]:
    return {"percept": PerceptionEncoder(percept_config(s1, grid), rng.spawn(0)),
            "motion": MotionExpert(motion_config(s1, grid), rng.spawn(1))}


def build_stage2_models(s2: Stage2Config, s1: Stage1Config, grid: GridSpec, horizon: int,
                        rng: Rng) -> dict[str, Module]:
    return {"guidance": GuidanceModule(guidance_config(s2, s1, grid), rng.spawn(0)),
            "action": ActionExpert(action_config(s2, s1, grid, horizon), rng.spawn(1))}


def _norm_dict(norm) -> dict:
    return {"mean": [float(x) for x in norm.mean], "std": [float(x) for x in norm.std]}


def data_snapshot(data: Dataset) -> dict:
    return {"grid": asdict(data.grid), "horizon": data.horizon,
            "motion_norm": _norm_dict(data.motion_norm),
            "action_norm": _norm_dict(data.action_norm),
            "dataset_sha256": data.sha256}


def load_checkpoint(path_or_blob) -> Checkpoint:
    """Rebuild every component named in the config snapshot and load its parameters."""
    blob = path_or_blob if isinstance(path_or_blob, bytes) else Path(path_or_blob).read_bytes()
    config, tensors, opt_step = parse_checkpoint(blob)
    grid = GridSpec(**config["grid"])
    s1 = from_dict(Stage1Config, config["stage1"])
    placeholder = Rng(0)
    modules = build_stage1_models(s1, grid, placeholder)
    if config["kind"] == "stage2":
        s2 = from_dict(Stage2Config, config["stage2"])
        modules.update(build_stage2_models(s2, s1, grid, config["horizon"], placeholder))
    load_into(modules, tensors)
    moments = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    return Checkpoint(config, modules, opt_step, moments)


def normalizers(config: dict) -> tuple[MotionNormalizer, ActionNormalizer]:
    m, a = config["motion_norm"], config["action_norm"]
    return MotionNormalizer(m["mean"], m["std"]), ActionNormalizer(a["mean"], a["std"])


# -- batching -------------------------------------------------------------------

class BatchOrder:
    """Epoch-wise shuffled record indices drawn from a seed-determined stream."""

    def __init__(self, n: int, batch: int, rng: Rng):
        if n == 0:
            raise ConfigError("cannot train on an empty dataset")
        self.n, self.batch, self.rng = n, batch, rng

    def indices(self, step: int) -> np.ndarray:
        per_epoch = max(self.n // self.batch, 1)
        epoch, k = divmod(step, per_epoch)
        perm = self.rng.spawn(epoch).permutation(self.n)
        if self.n < self.batch:
            perm = np.resize(perm, self.batch)
        return np.sort(perm[k * self.batch:(k + 1) * self.batch])


def motion_targets(data: Dataset, idx: np.ndarray, depth_masked: bool = False):
    """Normalized, patchified flow tokens [B, L_m, 12] and their validity weights."""
    rec = data.records[idx]
    f = normalize(rec["flow"].astype(np.float64), data.motion_norm)
    if depth_masked:
        f = mask_depth(f)
    valid = np.broadcast_to(rec["valid"][..., None, None], f.shape).astype(np.float64)
    b = len(idx)
    tokens = patchify(f).reshape(b, -1, 12).astype(np.float32)
    weight = patchify(valid).reshape(b, -1, 12).astype(np.float32)
    return tokens, weight


def action_targets(data: Dataset, idx: np.ndarray) -> np.ndarray:
    return data.action_norm.normalize(data.records[idx]["actions"].astype(np.float64)).astype(np.float32)


# -- results and logging ----------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    probe_initial: float = math.nan
    probe_final: float = math.nan
    frozen_hashes: dict = field(default_factory=dict)
    gate_trace: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def trace_text(self) -> str:
        """Deterministic loss trace: one ``step loss lr`` line per step."""
        return "".join(f"{i} {loss!r} {lr!r}\n" for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)))


class RunLog:
    """Per-step manifest (JSON lines: step, loss, lr and extras) plus a separate wall-clock log.

    Wall times live in ``{name}_timing.jsonl`` so that the manifest is byte-identical across
    reruns with the same seed.
    """

    def __init__(self, out_dir, name: str):
        self.dir = Path(out_dir) if out_dir else None
        self.start = time.perf_counter()
        self.fh = self.timing = None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.dir / f"{name}_manifest.jsonl", "w")
            self.timing = open(self.dir / f"{name}_timing.jsonl", "w")

    def step(self, step: int, loss: float, lr: float, **extra) -> None:
        if self.fh:
            self.fh.write(json.dumps({"step": step, "loss": loss, "lr": lr, **extra}) + "\n")
            self.timing.write(json.dumps({"step": step, "wall": round(time.perf_counter() - self.start, 4)}) + "\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()
            self.timing.close()


def _optimizer(modules: dict[str, Module], lr, betas, wd) -> AdamW:
    named = [(f"{c}/{n}", p) for c in sorted(modules) for n, p in modules[c].named_parameters()]
    return AdamW(named, lr, betas, wd)


def _moments(opt: AdamW) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.state.m:
        out[f"optim.m/{name}"] = opt.state.m[name]
        out[f"optim.v/{name}"] = opt.state.v[name]
    return out


def _finite(loss: Tensor, step: int, stage: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"{stage}: non-finite loss at step {step}")
    return value


# -- stage 1 -------------------------------------------------------------------------

def _stage1_loss(mods, data: Dataset, idx, cfg: Stage1Config, rng: Rng) -> Tensor:
    tokens, weight = motion_targets(data, idx, cfg.mask_depth)
    z = mods["percept"](data.observations(idx), data.records[idx]["instruction"])
    noise = rng.spawn(0).normal(tokens.shape, dtype=np.float32)
    tau = flowmatch.sample_uniform_time(rng.spawn(1), len(idx))
    return flowmatch.flow_matching_loss(mods["motion"].field, tokens, noise, tau, z, weight)


def _probe(loss_fn, n: int) -> float:
    with no_grad():
        return float(np.mean([loss_fn(i).item() for i in range(n)]))


def train_stage1(cfg: Stage1Config, data: Dataset, out_dir=None, log_every: int = 100) -> TrainResult:
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise ConfigError("stage 1 needs steps >= 0 and batch_size >= 1")
    root = Rng(cfg.seed)
    mods = build_stage1_models(cfg, data.grid, root.spawn(0))
    order = BatchOrder(len(data), cfg.batch_size, root.spawn(1))
    probe_rng = root.spawn(3)
    probe_order = BatchOrder(len(data), cfg.batch_size, probe_rng.spawn(0))

    def probe_loss(i):
        return _stage1_loss(mods, data, probe_order.indices(i), cfg, probe_rng.spawn(1, i))

    result = TrainResult(checkpoint=None)
    result.probe_initial = _probe(probe_loss, cfg.probe_batches)
    opt = _optimizer(mods, cfg.lr, (cfg.beta1, cfg.beta2), cfg.weight_decay)
    params = [p for m in mods.values() for p in m.parameters()]
    run = RunLog(out_dir, "stage1")
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            lr = cosine_with_min_lr(step, cfg.steps, cfg.lr, cfg.min_lr, cfg.warmup)
            opt.lr = lr
            loss = _stage1_loss(mods, data, order.indices(step), cfg, root.spawn(2, step))
            value = _finite(loss, step, "stage 1")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            result.losses.append(value)
            result.lrs.append(lr)
            run.step(step, value, lr)
            if log_every and step % log_every == 0:
                log.info("stage1 step %d loss %.4f lr %.2e", step, value, lr)
    finally:
        run.close()
    result.seconds = time.perf_counter() - t0
    result.probe_final = _probe(probe_loss, cfg.probe_batches)
    config = {"kind": "stage1", "stage1": asdict(cfg), **data_snapshot(data)}
    result.checkpoint = Checkpoint(config, mods, cfg.steps, _moments(opt))
    if out_dir:
        _write_outputs(out_dir, "stage1", result)
    return result


def heldout_flow_mse(stage1: Checkpoint, held: Dataset, rng: Rng, max_records: int = 256,
                     solver_steps: int = 10) -> dict[str, float]:
    """Masked MSE of full ``generate_flow`` samples and of the all-zero field on held-out records."""
    m_norm, _ = normalizers(stage1.config)
    idx = np.arange(len(held))[:: max(len(held) // max_records, 1)][:max_records]
    gt = held.records[idx]["flow"].astype(np.float64)
    valid = np.broadcast_to((held.records[idx]["valid"] > 0.5)[..., None, None], gt.shape)
    with no_grad():
        z = stage1.modules["percept"](held.observations(idx), held.records[idx]["instruction"])
        gen = generate_flow(stage1.modules["motion"], z, flowmatch.SolverSchedule(solver_steps), rng, m_norm)
    n = max(valid.sum(), 1)
    return {"generated": float((valid * (gen - gt) ** 2).sum() / n),
            "zero": float((valid * gt ** 2).sum() / n), "records": int(len(idx))}


def _write_outputs(out_dir, name: str, result: TrainResult) -> None:
    out = Path(out_dir)
    save_checkpoint(result.checkpoint, out / f"{name}.ckpt")
    (out / f"{name}_losses.txt").write_text(result.trace_text())
    summary = {"probe_initial": result.probe_initial, "probe_final": result.probe_final,
               "steps": len(result.losses), "seconds": round(result.seconds, 2),
               "frozen_hashes": result.frozen_hashes}
    (out / f"{name}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


# -- stage 2 -------------------------------------------------------------------------

def check_compatible(stage1: Checkpoint, data: Dataset) -> None:
    grid = GridSpec(**stage1.config["grid"])
    if grid != data.grid:
        raise ConfigError(f"stage-1 grid {grid} does not match dataset grid {data.grid}")
    if stage1.config["horizon"] != data.horizon:
        raise ConfigError(f"stage-1 horizon {stage1.config['horizon']} vs dataset {data.horizon}")


def frozen_hashes(mods: dict[str, Module]) -> dict[str, str]:
    return {k: mods[k].param_hash() for k in ("percept", "motion")}


def stage2_step_loss(mods, data: Dataset, idx, cfg: Stage2Config, schedule: flowmatch.SolverSchedule,
                     rng: Rng) -> Tensor:
    """One Stage-2 objective evaluation on records ``idx``.

    encode (frozen) -> one-step motion hidden state (frozen, no gradient)
    -> guide -> action flow-matching loss at Beta-distributed flow time.
    """
    rec = data.records[idx]
    sampler = flowmatch.FlowTimeSampler(cfg.time_alpha, cfg.time_beta)
    with no_grad():
        z = mods["percept"](data.observations(idx), rec["instruction"])
        z_m = (one_step_hidden(mods["motion"], z, schedule, rng.spawn(0))
               if mods["guidance"].cfg.uses_motion else None)
    z_g = mods["guidance"](z, z_m)
    actions = action_targets(data, idx)
    noise = rng.spawn(1).normal(actions.shape, dtype=np.float32)
    tau = flowmatch.sample_flow_time(sampler, rng.spawn(2), len(idx))
    return action_loss(mods["action"], actions, noise, tau, z_g, rec["state"], schedule.t1)


def train_stage2(cfg: Stage2Config, data: Dataset, stage1: Checkpoint, out_dir=None,
                 log_every: int = 100) -> TrainResult:
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise ConfigError("stage 2 needs steps >= 0 and batch_size >= 1")
    check_compatible(stage1, data)
    s1 = from_dict(Stage1Config, stage1.config["stage1"])
    root = Rng(cfg.seed)
    mods = {"percept": stage1.modules["percept"], "motion": stage1.modules["motion"]}
    for k in ("percept", "motion"):
        mods[k].freeze()
    before = frozen_hashes(mods)
    mods.update(build_stage2_models(cfg, s1, data.grid, data.horizon, root.spawn(0)))
    trainable = {k: mods[k] for k in ("guidance", "action")}
    schedule = flowmatch.SolverSchedule(cfg.solver_steps)
    order = BatchOrder(len(data), cfg.batch_size, root.spawn(1))
    probe_rng = root.spawn(3)
    probe_order = BatchOrder(len(data), cfg.batch_size, probe_rng.spawn(0))

    def probe_loss(i):
        return stage2_step_loss(mods, data, probe_order.indices(i), cfg, schedule, probe_rng.spawn(1, i))

    result = TrainResult(checkpoint=None)
    result.probe_initial = _probe(probe_loss, cfg.probe_batches)
    opt = _optimizer(trainable, cfg.lr, (cfg.beta1, cfg.beta2), cfg.weight_decay)
    params = [p for m in trainable.values() for p in m.parameters()]
    gated = mods["guidance"].cfg.mode == "gated"
    motion_calls = mods["motion"].velocity_calls

    def verify(step):
        if frozen_hashes(mods) != before:
            raise TrainingError(f"frozen parameters changed by step {step}")

    run = RunLog(out_dir, "stage2")
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            lr = cosine_with_min_lr(step, cfg.steps, cfg.lr, cfg.min_lr, cfg.warmup)
            opt.lr = lr
            loss = stage2_step_loss(mods, data, order.indices(step), cfg, schedule, root.spawn(2, step))
            value = _finite(loss, step, "stage 2")
            opt.zero_grad()
            loss.backward()
            if any(p.grad is not None for m in ("percept", "motion") for p in mods[m].parameters()):
                raise TrainingError(f"frozen parameters received gradients at step {step}")
            extra = {}
            if gated:
                extra["gate_grad"] = float(mods["guidance"].gate.grad)
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            result.losses.append(value)
            result.lrs.append(lr)
            if gated:
                g = float(mods["guidance"].gate.data)
                result.gate_trace.append(g)
                extra["gate"] = g
            run.step(step, value, lr, **extra)
            if cfg.freeze_check_every and (step + 1) % cfg.freeze_check_every == 0:
                verify(step)
            if log_every and step % log_every == 0:
                log.info("stage2[%s] step %d loss %.4f lr %.2e", cfg.guidance_mode, step, value, lr)
    finally:
        run.close()
    verify(cfg.steps)
    result.seconds = time.perf_counter() - t0
    result.probe_final = _probe(probe_loss, cfg.probe_batches)
    if not mods["guidance"].cfg.uses_motion and mods["motion"].velocity_calls != motion_calls:
        raise TrainingError("motion expert was invoked in mode 'none'")
    result.frozen_hashes = {"before": before, "after": frozen_hashes(mods)}
    config = {"kind": "stage2", "stage1": stage1.config["stage1"], "stage2": asdict(cfg),
              **data_snapshot(data), "stage1_hashes": before}
    result.checkpoint = Checkpoint(config, mods, cfg.steps, _moments(opt))
    if out_dir:
        _write_outputs(out_dir, "stage2", result)
    return result

"""Guidance-mode and 2D-flow ablations over paired evaluation seeds.

Variants: ``gated`` (the method), ``add``, ``concat_mlp`` and ``none`` share
one 3D Stage-1 checkpoint. ``gated_2d`` uses a Stage-1 model trained on
depth-masked flow and is otherwise identical to ``gated``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from lamp.checkpoint import checkpoint_bytes
from lamp.config import EvalConfig, Stage1Config, Stage2Config
from lamp.runtime import BundlePolicy, EvalReport, PolicyBundle, evaluate
from lamp.toyworld.dataset import Dataset
from lamp.trainer import TrainResult, load_checkpoint, train_stage1, train_stage2

log = logging.getLogger(__name__)

VARIANTS = {
    "gated": ("3d", "gated"),
    "none": ("3d", "none"),
    "add": ("3d", "add"),
    "concat_mlp": ("3d", "concat_mlp"),
    "gated_2d": ("2d", "gated"),
}


@dataclass
class AblationResult:
    stage1: dict[str, TrainResult] = field(default_factory=dict)
    stage2: dict[str, TrainResult] = field(default_factory=dict)
    report: EvalReport | None = None


def train_variants(data: Dataset, s1: Stage1Config, s2: Stage2Config, variants=tuple(VARIANTS),
                   out_dir=None, stage1_results: dict | None = None,
                   stage2_results: dict | None = None) -> AblationResult:
    """Train every requested variant; results passed in (keyed by flow or variant) are reused."""
    res = AblationResult(stage1=dict(stage1_results or {}), stage2=dict(stage2_results or {}))
    for name in variants:
        flow, mode = VARIANTS[name]
        if name in res.stage2:
            continue
        if flow not in res.stage1:
            sub = Path(out_dir, f"stage1_{flow}") if out_dir else None
            log.info("training stage 1 (%s flow)", flow)
            res.stage1[flow] = train_stage1(replace(s1, mask_depth=flow == "2d"), data, sub)
        sub = Path(out_dir, name) if out_dir else None
        log.info("training stage 2 variant %s", name)
        # every variant gets its own copy of the frozen stage-1 modules
        stage1 = load_checkpoint(checkpoint_bytes(res.stage1[flow].checkpoint))
        res.stage2[name] = train_stage2(replace(s2, guidance_mode=mode), data, stage1, sub)
    return res


def evaluate_variants(res: AblationResult, ev: EvalConfig) -> EvalReport:
    # fresh module copies so evaluation freezing never touches the training results
    policies = {name: BundlePolicy(PolicyBundle.from_checkpoint(load_checkpoint(checkpoint_bytes(r.checkpoint)),
                                                                ev.solver_steps, name))
                for name, r in res.stage2.items()}
    res.report = evaluate(policies, ev.task_list(), ev.episodes, ev.seed_list(), ev.max_steps)
    return res.report


def run_ablation(data: Dataset, s1: Stage1Config, s2: Stage2Config, ev: EvalConfig,
                 out_dir=None, variants=tuple(VARIANTS)) -> AblationResult:
    res = train_variants(data, s1, s2, variants, out_dir)
    report = evaluate_variants(res, ev)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        Path(out_dir, "ablation_report.json").write_text(report.to_json())
        Path(out_dir, "ablation_table.txt").write_text(report.table())
    return res

"""Guidance and 2D-flow ablation at desk scale; writes ablation_report.json and ablation_table.txt.

    python3 scripts/run_ablation.py --out runs/ablation [--variants gated,none] [--episodes 100]
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from lamp.ablation import VARIANTS, run_ablation
from lamp.config import DatagenConfig, EvalConfig, Stage1Config, Stage2Config
from lamp.gradcore import Rng
from lamp.motionrep import GridSpec
from lamp.toyworld.dataset import generate_dataset, load_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--data", help="existing training dataset (generated with desk defaults otherwise)")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--stage1-steps", type=int, default=Stage1Config().steps)
    ap.add_argument("--stage2-steps", type=int, default=Stage2Config().steps)
    ap.add_argument("--episodes", type=int, default=EvalConfig().episodes)
    ap.add_argument("--seeds", default=EvalConfig().seeds)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        data = load_dataset(args.data)
    else:
        d = DatagenConfig()
        grid = GridSpec(d.K_h, d.K_w, d.T, d.image, d.image)
        data = generate_dataset(d.task_list(), d.episodes, grid, d.horizon, Rng(d.seed), out / "train.lampds")
    res = run_ablation(data, replace(Stage1Config(), steps=args.stage1_steps),
                       replace(Stage2Config(), steps=args.stage2_steps),
                       replace(EvalConfig(), episodes=args.episodes, seeds=args.seeds), out,
                       args.variants.split(","))
    print(res.report.table(), end="")


if __name__ == "__main__":
    main()

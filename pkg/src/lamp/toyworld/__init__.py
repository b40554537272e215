"""Synthetic tabletop environment, scripted expert and dataset format."""

from lamp.toyworld.dataset import (
    ActionNormalizer,
    Dataset,
    generate_dataset,
    load_dataset,
    parse_dataset,
)
from lamp.toyworld.render import default_camera, ground_truth_flow, render
from lamp.toyworld.world import (
    INSTRUCTIONS,
    NUM_INSTRUCTIONS,
    TASK_KINDS,
    TaskSpec,
    WorldConfig,
    WorldState,
    is_success,
    progress_score,
    reset,
    run_expert,
    sample_task,
    scripted_expert,
    step,
)

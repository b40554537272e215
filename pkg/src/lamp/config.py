"""Run configurations and the flat ``section.key = value`` config-file format.

Every field carries its desk default (the dataclass default) and, where one
exists, the value used at full scale (``metadata["full_scale"]``). ``describe``
renders that table; ``dump`` and ``load`` round-trip a config file.

File grammar::

    # comment
    stage1.lr = 0.001
    guidance.mode = gated        # alias for stage2.guidance_mode

Sections: datagen, stage1, stage2, eval. Keys in the ``guidance`` section map
to ``stage2.guidance_<key>``.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from lamp.errors import ConfigError


def _f(default, doc: str, full_scale=None):
    return field(default=default, metadata={"doc": doc, "full_scale": full_scale})


@dataclass(frozen=True)
class DatagenConfig:
    episodes: int = _f(150, "training episodes; the held-out file uses seed + 1000", "1.6M triplets")
    heldout_episodes: int = _f(30, "held-out episodes for motion/action error checks")
    tasks: str = _f("push,pick_place,stack", "comma-separated task mix, cycled per episode")
    K_h: int = _f(8, "keypoint grid rows", 20)
    K_w: int = _f(8, "keypoint grid columns", 20)
    T: int = _f(8, "scene-flow horizon", 32)
    image: int = _f(32, "square image side in pixels", 224)
    horizon: int = _f(4, "action chunk length H", "9 / 29 / 15")
    seed: int = _f(0, "dataset seed")

    def task_list(self) -> list[str]:
        return [t for t in self.tasks.split(",") if t]


@dataclass(frozen=True)
class Stage1Config:
    steps: int = _f(2000, "optimizer steps", "30 epochs")
    batch_size: int = _f(32, "batch size", "32 x 16 = 512")
    lr: float = _f(1e-3, "peak learning rate", 2e-4)
    min_lr: float = _f(1e-5, "cosine floor")
    beta1: float = _f(0.9, "AdamW beta1", 0.9)
    beta2: float = _f(0.95, "AdamW beta2", 0.95)
    weight_decay: float = _f(1e-8, "decoupled weight decay", 1e-8)
    warmup: int = _f(0, "linear warm-up steps", 0)
    grad_clip: float = _f(1.0, "global gradient-norm clip")
    d_z: int = _f(64, "context width of the perception encoder", "4B VLM")
    percept_layers: int = _f(2, "perception transformer layers")
    percept_heads: int = _f(4, "perception attention heads")
    patch: int = _f(8, "image patch side")
    d_m: int = _f(64, "motion expert width", 1024)
    motion_layers: int = _f(4, "motion expert layers", 12)
    motion_heads: int = _f(4, "motion expert heads")
    time_dim: int = _f(32, "sinusoidal flow-time embedding width")
    motion_context_attention: bool = _f(True, "motion tokens also attend to the context tokens")
    motion_aligned_context: bool = _f(True, "add each image-patch feature to the motion tokens of its cell")
    mask_depth: bool = _f(False, "zero the depth channel of training flow (2D variant)")
    probe_batches: int = _f(4, "fixed batches for the before/after loss probe")
    seed: int = _f(0, "training seed")


@dataclass(frozen=True)
class Stage2Config:
    steps: int = _f(2000, "optimizer steps", "15k-20k")
    batch_size: int = _f(32, "batch size", "32 x 16 = 512")
    lr: float = _f(1e-3, "peak learning rate", "1e-4 / 2e-4")
    min_lr: float = _f(1e-5, "cosine floor")
    beta1: float = _f(0.9, "AdamW beta1", 0.9)
    beta2: float = _f(0.95, "AdamW beta2", 0.95)
    weight_decay: float = _f(0.0, "decoupled weight decay", 0.0)
    warmup: int = _f(0, "linear warm-up steps", 0)
    grad_clip: float = _f(1.0, "global gradient-norm clip")
    d_a: int = _f(64, "action expert width")
    action_layers: int = _f(2, "action expert layers")
    action_heads: int = _f(4, "action expert heads")
    time_dim: int = _f(32, "sinusoidal flow-time embedding width")
    time_alpha: float = _f(1.5, "Beta(alpha, beta) action flow-time sampler", 1.5)
    time_beta: float = _f(1.0, "Beta(alpha, beta) action flow-time sampler", 1.0)
    solver_steps: int = _f(10, "Euler steps N", 10)
    guidance_mode: str = _f("gated", "gated | add | concat_mlp | none")
    guidance_g0: float = _f(0.0, "initial gate value (-4 gives near-zero injection)", 0.0)
    guidance_heads: int = _f(4, "cross-attention heads")
    guidance_hidden: int = _f(128, "hidden width of the concat_mlp variant")
    freeze_check_every: int = _f(100, "steps between frozen-hash comparisons")
    probe_batches: int = _f(4, "fixed batches for the before/after loss probe")
    seed: int = _f(0, "training seed")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = _f(100, "episodes per task per seed", 50)
    seeds: str = _f("0,1,2", "comma-separated evaluation seeds")
    tasks: str = _f("push,pick_place,stack", "comma-separated tasks")
    max_steps: int = _f(80, "environment steps per episode")
    solver_steps: int = _f(10, "Euler steps N for the action expert", 10)

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def task_list(self) -> list[str]:
        return [t for t in self.tasks.split(",") if t]


SECTIONS = {"datagen": DatagenConfig, "stage1": Stage1Config, "stage2": Stage2Config, "eval": EvalConfig}


def _parse(value: str, typ, key: str):
    try:
        if typ is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return low in ("true", "1")
        return typ(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def parse_text(text: str) -> dict:
    """Parse config text into {section: config instance}; absent sections keep defaults."""
    updates: dict[str, dict] = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section == "guidance":
            section, name = "stage2", "guidance_" + name
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        hints = get_type_hints(SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _parse(value, hints[name], key)
    return {s: SECTIONS[s](**u) for s, u in updates.items()}


def load(path) -> dict:
    return parse_text(Path(path).read_text())


def dump(configs: dict) -> str:
    lines = []
    for section, cfg in configs.items():
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, bool):
                text = str(v).lower()
            elif isinstance(v, str):
                text = v
            else:
                text = repr(v)
            lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"


def describe() -> str:
    """Reference table: key, type, desk default, full-scale value, meaning."""
    rows = []
    for section, cls in SECTIONS.items():
        hints = get_type_hints(cls)
        for f in fields(cls):
            full_scale = f.metadata.get("full_scale")
            rows.append(f"{section}.{f.name} ({hints[f.name].__name__}) = {f.default!r}"
                        f"{'' if full_scale is None else f'  [full scale: {full_scale}]'}  {f.metadata['doc']}")
    return "\n".join(rows) + "\n"


def to_dict(cfg) -> dict:
    return asdict(cfg)


def from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def with_seed(cfg, seed: int | None):
    return cfg if seed is None else replace(cfg, seed=seed)

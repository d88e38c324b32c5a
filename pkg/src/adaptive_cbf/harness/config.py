"""INI-style experiment configuration with dotted section names.

Example::

    [experiment]
    env = nav
    seed = 1

    [train]
    total_steps = 50000
    min_agents = 3

    [sweep]
    episodes = 25
    ds_values = 0, 5

Overrides use ``section.key=value`` (the last dot separates the key), for
instance ``train.learning_rate=1e-4`` or ``sweep.agent_counts=3,7``.
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..learner.train import TrainConfig

MODES = ("train", "eval", "sweep-gamma", "ablate", "generalize")
ENVS = ("nav", "race")


@dataclass
class SweepConfig:
    episodes: int = 100
    n_gammas: int = 10
    nominal: str = "goal"  # nav only: "goal" (waypoint controller aimed at the goal) or "mpc"
    agent_counts: tuple = (3, 5, 7)
    ds_values: tuple = (0.0, 5.0, 6.0)
    opponent_counts: tuple = (2,)  # racing strata


@dataclass
class AblateConfig:
    checkpoint: str = ""
    episodes: int = 100
    n_gammas: int = 10


@dataclass
class GeneralizeConfig:
    checkpoint: str = ""
    opponent_counts: tuple = (2, 3, 4, 5, 6)
    grids: int = 10
    seconds: float = 60.0


@dataclass
class EvalConfig:
    checkpoint: str = ""
    episodes: int = 20
    traces: bool = False


@dataclass
class ExperimentConfig:
    env: str = "nav"
    mode: str = "train"
    seed: int = 0
    out: str = "runs/default"
    resume: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    generalize: GeneralizeConfig = field(default_factory=GeneralizeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("train", "sweep", "ablate", "generalize", "eval")

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.env not in ENVS:
            raise ValueError(f"env must be one of {ENVS}, got {self.env!r}")
        self.train.env = self.env
        self.train = self.train.resolved()
        if self.mode in ("ablate", "generalize", "eval"):
            ckpt = getattr(self, self.mode).checkpoint
            if not ckpt:
                raise ValueError(f"{self.mode} needs {self.mode}.checkpoint")
            if not Path(ckpt).is_file():
                raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
        if self.mode == "generalize" and self.env != "race":
            raise ValueError("generalize runs on the racing environment")
        if self.sweep.nominal not in ("goal", "mpc"):
            raise ValueError("sweep.nominal must be 'goal' or 'mpc'")
        for name, val in (("sweep.episodes", self.sweep.episodes), ("sweep.n_gammas", self.sweep.n_gammas),
                          ("ablate.episodes", self.ablate.episodes), ("ablate.n_gammas", self.ablate.n_gammas),
                          ("generalize.grids", self.generalize.grids), ("eval.episodes", self.eval.episodes),
                          ("generalize.seconds", self.generalize.seconds)):
            if val <= 0:
                raise ValueError(f"{name} must be positive")
        return self


def parse_value(text: str, like):
    """Convert ``text`` to the type of the default value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, tuple):
        if not text:
            return ()
        parts = [p for p in text.strip("()[] ").split(",") if p.strip()]
        elem = like[0] if like else 0.0
        return tuple(parse_value(p, elem) for p in parts)
    if isinstance(like, int):
        return int(float(text)) if text.lower() not in ("none", "") else None
    if isinstance(like, float):
        return float(text)
    if isinstance(like, str):
        return text
    # unset optional (None default): guess from the literal
    if text.lower() in ("none", ""):
        return None
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return tuple(val) if isinstance(val, list) else val


def _assign(obj, key: str, text: str) -> None:
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise KeyError(f"unknown option {key!r} for {type(obj).__name__}")
    setattr(obj, key, parse_value(text, getattr(obj, key)))


def apply_option(cfg: ExperimentConfig, dotted: str, value: str) -> None:
    if "." not in dotted:
        raise ValueError(f"override {dotted!r} must look like section.key")
    section, key = dotted.rsplit(".", 1)
    if section == "experiment":
        if key not in ("env", "mode", "seed", "out", "resume"):
            raise KeyError(f"unknown option {key!r} for experiment")
        setattr(cfg, key, parse_value(value, getattr(cfg, key)))
    elif section in ExperimentConfig.SECTIONS:
        _assign(getattr(cfg, section), key, value)
    else:
        raise KeyError(f"unknown config section {section!r}")


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        with open(path) as f:
            parser.read_file(f)
        for section in parser.sections():
            for key, value in parser.items(section):
                apply_option(cfg, f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        apply_option(cfg, k.strip(), v)
    return cfg


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


def dump_config(cfg: ExperimentConfig, path) -> str:
    """Write the fully resolved configuration; the file reloads to the same values."""
    lines = ["[experiment]"]
    for k in ("env", "mode", "seed", "out", "resume"):
        lines.append(f"{k} = {_fmt(getattr(cfg, k))}")
    for section in ExperimentConfig.SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in asdict(getattr(cfg, section)).items():
            lines.append(f"{k} = {_fmt(v)}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text

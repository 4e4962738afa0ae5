"""Sectioned key=value run configuration.

The file format is plain INI-style text with four sections, all optional:

    [model]
    scales = 1/4,1/8,1/16,1/32
    channels = 1/4:16,1/8:24,1/16:32,1/32:48
    tasks = seg:target,depth:target,edge:auxiliary,normals:auxiliary
    loss_weights = seg:1.0,depth:1.0,edge:1.0,normals:1.0
    fpm = true
    distill = true
    input_channels = 3

    [optim]
    total_steps = 200
    base_lr = 0.0001
    poly_power = 0.9
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8
    batch_size = 4
    seed = 0
    log_every = 10

    [data]
    H = 64
    W = 64
    num_shapes = 4
    num_classes = 5
    seed = 0
    noise_std = 0.02

    [affinity]
    kernel_radius = 1
    dilations = 1,2,4,8
    depth_rel_threshold = 0.1
    stride = 1

Unknown sections or keys are rejected.  Task names are bound to the synthetic
dataset rasters: seg (categorical, class count from [data] num_classes),
depth (regression), edge (binary), normals (3-component vector field).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .affinity import AffinityConfig
from .errors import ConfigError, ContractViolation
from .model import DEFAULT_CHANNELS, ModelConfig, TaskSpec
from .synthdata import GenConfig
from .training import OptimConfig

# name -> (kind, fixed channel count or None for "from num_classes", lower_better)
SYNTH_TASKS = {
    "seg": ("categorical", None, False),
    "depth": ("regression", 1, True),
    "edge": ("binary", 1, False),
    "normals": ("vector_field", 3, True),
}

TASK_METRICS = {
    "categorical": "miou",
    "regression": "rmse",
    "binary": "f_best",
    "vector_field": "mean_angle_error",
}

_MODEL_KEYS = {"scales", "channels", "tasks", "loss_weights", "fpm", "distill", "input_channels"}
_OPTIM_KEYS = {"total_steps", "base_lr", "poly_power", "beta1", "beta2", "eps",
               "batch_size", "seed", "log_every"}
_DATA_KEYS = {"H", "W", "num_shapes", "num_classes", "seed", "noise_std"}
_AFFINITY_KEYS = {"kernel_radius", "dilations", "depth_rel_threshold", "stride"}
_SECTIONS = {"model": _MODEL_KEYS, "optim": _OPTIM_KEYS, "data": _DATA_KEYS,
             "affinity": _AFFINITY_KEYS}


def parse_scale(token: str) -> int:
    """Accept '1/4' or '4'; returns the downsampling divisor."""
    token = token.strip()
    if token.startswith("1/"):
        token = token[2:]
    try:
        d = int(token)
    except ValueError:
        raise ConfigError(f"bad scale token {token!r} (use e.g. 1/8 or 8)") from None
    if d not in (4, 8, 16, 32):
        raise ConfigError(f"scale 1/{d} is not one of 1/4, 1/8, 1/16, 1/32")
    return d


def format_scale(divisor: int) -> str:
    return f"1/{divisor}"


def _parse_bool(value: str, key: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_num(value: str, key: str, cast):
    try:
        return cast(value.strip())
    except ValueError:
        raise ConfigError(f"{key}: bad value {value!r}") from None


@dataclass
class RunConfig:
    """All four sub-configurations plus the task list in config order."""

    task_roles: list[tuple[str, str]]
    loss_weights: dict[str, float]
    scales: tuple[int, ...]
    channels: dict[int, int]
    fpm: bool
    distill: bool
    input_channels: int
    optim: OptimConfig
    data: GenConfig
    affinity: AffinityConfig

    def tasks(self, num_classes: int | None = None) -> list[TaskSpec]:
        k = self.data.num_classes if num_classes is None else num_classes
        specs = []
        for name, role in self.task_roles:
            kind, channels, lower = SYNTH_TASKS[name]
            specs.append(
                TaskSpec(name, kind, channels if channels is not None else k,
                         lower_better=lower, loss_weight=self.loss_weights.get(name, 1.0),
                         role=role)
            )
        return specs

    def model_config(self, num_classes: int | None = None,
                     scales: tuple[int, ...] | None = None,
                     tasks: list[TaskSpec] | None = None,
                     fpm: bool | None = None) -> ModelConfig:
        use_scales = self.scales if scales is None else scales
        missing = [d for d in use_scales if d not in self.channels]
        if missing:
            raise ConfigError(
                f"no channel width configured for scale(s) {[format_scale(d) for d in missing]}"
            )
        try:
            return ModelConfig(
                tasks=self.tasks(num_classes) if tasks is None else tasks,
                scales=use_scales,
                channels={d: self.channels[d] for d in use_scales},
                fpm_enabled=self.fpm if fpm is None else fpm,
                distill_enabled=self.distill,
                input_channels=self.input_channels,
            )
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc


def _build_model_section(sec) -> dict:
    out: dict = {}
    if "scales" in sec:
        out["scales"] = tuple(parse_scale(tok) for tok in sec["scales"].split(","))
    if "channels" in sec:
        channels = {}
        for item in sec["channels"].split(","):
            if ":" not in item:
                raise ConfigError(f"channels: expected scale:width pairs, got {item!r}")
            scale_tok, width_tok = item.split(":", 1)
            channels[parse_scale(scale_tok)] = _parse_num(width_tok, "channels", int)
        out["channels"] = channels
    if "tasks" in sec:
        roles = []
        for item in sec["tasks"].split(","):
            if ":" not in item:
                raise ConfigError(f"tasks: expected name:role pairs, got {item!r}")
            name, role = (part.strip() for part in item.split(":", 1))
            if name not in SYNTH_TASKS:
                raise ConfigError(f"tasks: unknown task {name!r}, expected one of {sorted(SYNTH_TASKS)}")
            if role not in ("target", "auxiliary"):
                raise ConfigError(f"tasks: role for {name!r} must be target or auxiliary, got {role!r}")
            roles.append((name, role))
        out["task_roles"] = roles
    if "loss_weights" in sec:
        weights = {}
        for item in sec["loss_weights"].split(","):
            if ":" not in item:
                raise ConfigError(f"loss_weights: expected name:weight pairs, got {item!r}")
            name, w = (part.strip() for part in item.split(":", 1))
            if name not in SYNTH_TASKS:
                raise ConfigError(f"loss_weights: unknown task {name!r}")
            value = _parse_num(w, "loss_weights", float)
            if value <= 0:
                raise ConfigError(f"loss_weights: weight for {name!r} must be > 0")
            weights[name] = value
        out["loss_weights"] = weights
    if "fpm" in sec:
        out["fpm"] = _parse_bool(sec["fpm"], "fpm")
    if "distill" in sec:
        out["distill"] = _parse_bool(sec["distill"], "distill")
    if "input_channels" in sec:
        out["input_channels"] = _parse_num(sec["input_channels"], "input_channels", int)
    return out


DEFAULT_TASK_ROLES = [("seg", "target"), ("depth", "target"),
                      ("edge", "auxiliary"), ("normals", "auxiliary")]


def parse_config(path_or_text, from_text: bool = False) -> RunConfig:
    """Parse and validate a run configuration file (all sections optional)."""
    if from_text:
        text = path_or_text
        origin = "<config>"
    else:
        p = Path(path_or_text)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        origin = str(p)
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{origin}: unknown key {key!r} in section [{section}]")

    model_sec = cp["model"] if cp.has_section("model") else {}
    model = _build_model_section(model_sec)

    def section_kwargs(name, keys, casts):
        if not cp.has_section(name):
            return {}
        sec = cp[name]
        return {k: _parse_num(sec[k], f"[{name}] {k}", casts[k]) for k in sec}

    optim_casts = {k: (float if k in ("base_lr", "poly_power", "beta1", "beta2", "eps") else int)
                   for k in _OPTIM_KEYS}
    data_casts = {k: (float if k == "noise_std" else int) for k in _DATA_KEYS}

    try:
        optim = OptimConfig(**section_kwargs("optim", _OPTIM_KEYS, optim_casts))
        data = GenConfig(**section_kwargs("data", _DATA_KEYS, data_casts))
        aff_kwargs: dict = {}
        if cp.has_section("affinity"):
            sec = cp["affinity"]
            if "kernel_radius" in sec:
                aff_kwargs["kernel_radius"] = _parse_num(sec["kernel_radius"], "kernel_radius", int)
            if "dilations" in sec:
                aff_kwargs["dilations"] = tuple(
                    _parse_num(tok, "dilations", int) for tok in sec["dilations"].split(",")
                )
            if "depth_rel_threshold" in sec:
                aff_kwargs["depth_rel_threshold"] = _parse_num(
                    sec["depth_rel_threshold"], "depth_rel_threshold", float
                )
            if "stride" in sec:
                aff_kwargs["stride"] = _parse_num(sec["stride"], "stride", int)
        affinity = AffinityConfig(**aff_kwargs)
    except ContractViolation as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    run = RunConfig(
        task_roles=model.get("task_roles", list(DEFAULT_TASK_ROLES)),
        loss_weights=model.get("loss_weights", {}),
        scales=model.get("scales", (4, 8, 16, 32)),
        channels=model.get("channels", dict(DEFAULT_CHANNELS)),
        fpm=model.get("fpm", True),
        distill=model.get("distill", True),
        input_channels=model.get("input_channels", 3),
        optim=optim,
        data=data,
        affinity=affinity,
    )
    run.model_config()  # validate the model section eagerly
    return run

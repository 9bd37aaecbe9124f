"""Run configuration (flat ``key = value`` files), run manifests and run-directory locks."""
from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .errors import LiftError
from .trainer import StageSchedule

ENV_PREFIX = "LIFT_"


@dataclass(frozen=True)
class LiftConfig:
    """Every tunable of a run. Defaults reproduce the reference recipe.

    ``epochs``, ``grad_accum`` and ``lr_scale`` override all stages at once;
    ``None`` keeps each stage's reference value.
    """

    seed: int = 17
    budget: int = 2048
    test_frac: float = 0.2
    history_labels: bool = True
    demo_window: int = 3
    stratified_demos: bool = False
    max_vocab: int | None = None
    # backbone
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    # training
    epochs: int | None = None
    grad_accum: int | None = None
    lr_scale: float = 1.0
    checkpoint_every: int = 25
    val_split: float = 0.1
    class_weighting: bool = True
    use_conditioning: bool = True
    mask_history: bool = False
    isolate_gradients: bool = False
    shared_heads: bool = False
    adapter_dropout: float = 0.05
    lambda_ce: float = 1.0
    lambda_out: float = 1.0
    lambda_cls: float = 0.5
    lambda_hist: float = 0.25
    gamma: float = 2.0
    # evaluation
    eval_shots: int = 0
    decode_mode: str = "rank"
    full_label_set: bool = False
    # per-stage StageSchedule fields, as (stage, field, value) from ``stage<k>.<field>`` keys
    stage_overrides: tuple[tuple[int, str, str], ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, values: Mapping[str, object]) -> "LiftConfig":
        plain, staged = {}, dict(((s, k), v) for s, k, v in self.stage_overrides)
        for key, value in values.items():
            m = _STAGE_KEY.fullmatch(key)
            if m:
                stage, name = int(m.group(1)), m.group(2)
                coerce_stage_value(name, value)
                staged[(stage, name)] = str(value)
            else:
                plain[key] = coerce(key, value)
        if staged:
            plain["stage_overrides"] = tuple((s, k, v) for (s, k), v in sorted(staged.items()))
        return replace(self, **plain)

    def stage_values(self, stage: int) -> dict[str, object]:
        """Typed StageSchedule overrides for one stage."""
        return {k: coerce_stage_value(k, v) for s, k, v in self.stage_overrides if s == stage}


_TYPES = {f.name: f.type for f in fields(LiftConfig) if f.name != "stage_overrides"}
_STAGE_KEY = re.compile(r"stage(\d+)\.(\w+)")
_STAGE_TYPES = {f.name: str(f.type) for f in fields(StageSchedule) if f.name != "stage"}


def coerce_stage_value(name: str, value):
    """Parse a StageSchedule field value (``betas`` as ``"0.9,0.999"``)."""
    if name not in _STAGE_TYPES:
        raise KeyError(f"unknown stage key {name!r}; expected one of {', '.join(_STAGE_TYPES)}")
    if not isinstance(value, str):
        return value
    t, v = _STAGE_TYPES[name], value.strip()
    if t.startswith("tuple"):
        return tuple(float(p) for p in v.split(","))
    if t == "int":
        return int(v)
    if t == "float":
        return float(v)
    return v


def coerce(key: str, value):
    """Parse a string value for ``key``; non-strings pass through."""
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    t = str(_TYPES[key])
    v = value.strip()
    if "None" in t and v.lower() in ("", "none", "null"):
        return None
    if t.startswith("bool"):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if t.startswith("int"):
        return int(v)
    if t.startswith("float"):
        return float(v)
    return v


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower()
            m = re.fullmatch(r"stage(\d+)_(\w+)", key)
            if m and m.group(2) in _STAGE_TYPES:
                out[f"stage{m.group(1)}.{m.group(2)}"] = v
            elif key in _TYPES:
                out[key] = v
    return out


def load_config(path=None, overrides: Mapping[str, object] | None = None,
                environ: Mapping[str, str] | None = None) -> LiftConfig:
    """Defaults, then the file, then ``LIFT_<KEY>`` variables, then explicit overrides."""
    cfg = LiftConfig()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text()))
    cfg = cfg.with_overrides(env_overrides(environ))
    return cfg.with_overrides(overrides or {})


def dump_config(cfg: LiftConfig) -> str:
    d = cfg.to_dict()
    d.pop("stage_overrides")
    lines = [f"{k} = {'none' if v is None else v}\n" for k, v in d.items()]
    lines += [f"stage{s}.{k} = {v}\n" for s, k, v in cfg.stage_overrides]
    return "".join(lines)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    run_id: str
    config: dict
    seed: int
    labelspace_hash: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    tool_version: str = ""
    created: float = field(default_factory=time.time)

    def __post_init__(self):
        # store the config as it reads back from JSON (tuples become lists)
        self.config = json.loads(json.dumps(self.config))

    def add_artifact(self, run_dir, path) -> None:
        rel = str(Path(path).resolve().relative_to(Path(run_dir).resolve()))
        self.artifacts[rel] = file_hash(path)

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """The manifest without wall-clock fields."""
        d = self.to_dict()
        d.pop("created")
        return d

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / "manifest.json").read_text()))


class RunLockError(LiftError, RuntimeError):
    pass


class RunLock:
    """Advisory lock: one writer per run directory."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(f"{self.path.parent} is in use (remove {self.path} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)

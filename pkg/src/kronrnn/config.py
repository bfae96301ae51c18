"""Run configuration: a single JSON document, validated before any compute.

Every experimental knob has a named key and a default.  Unknown keys are
rejected (they are almost always typos).  ``model_hash`` fingerprints the
architecture-defining subset and gates checkpoint reuse.
"""

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np

from .errors import ConfigError

TASKS = ("copy", "adding", "mnist", "mnist-permuted", "charlm")
MODELS = ("rnn", "kru", "lstm", "kru-lstm")
FIELDS = ("real", "complex")
OPTIMIZERS = ("rmsprop", "adam")

# Field each model runs in; gated cells stay real.
MODEL_FIELD = {"rnn": "real", "kru": "complex", "lstm": "real",
               "kru-lstm": "real"}
DEFAULT_ACTIVATION = {"rnn": "tanh", "kru": "modrelu"}


@dataclass
class OptimizerConfig:
    kind: str = "rmsprop"
    learning_rate: float = 1e-3
    decay: float = 0.9           # rmsprop accumulator decay
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class ScheduleConfig:
    max_updates: int | None = None
    epochs: int | None = None
    batch_size: int = 20
    bptt_window: int | None = None      # None = full-sequence BPTT
    lr_decay_factor: float = 0.3
    plateau: bool = False
    plateau_start_updates: int = 0   # leave lr alone until this many updates
    gradient_clip: float | None = None
    unitary_amplitude: float = 0.0
    penalty_override: bool = False      # force the penalty onto gated cells
    log_every: int = 100
    eval_every: int = 500
    checkpoint_every: int = 0           # 0 disables periodic checkpoints
    train_size: int = 100_000
    valid_size: int = 2_000
    test_size: int = 10_000
    target_metric: float | None = None  # early stop once valid metric beats this


@dataclass
class DataConfig:
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_text: str | None = None
    valid_text: str | None = None
    test_text: str | None = None
    permute_seed: int | None = None


@dataclass
class RunConfig:
    task: str
    model: str
    n: int
    d: int | None = None
    m: int | None = None
    field: str | None = None
    sequence_length: int | None = None
    factor_shapes: object = "auto-2x2"
    activation: str | None = None
    frozen_recurrent: bool = False
    optimizer: OptimizerConfig = dc_field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = dc_field(default_factory=ScheduleConfig)
    data: DataConfig = dc_field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str | None = None

    def replace(self, **kwargs):
        """Copy with schedule-level or top-level overrides."""
        cfg = copy.deepcopy(self)
        for key, value in kwargs.items():
            if hasattr(cfg.schedule, key):
                setattr(cfg.schedule, key, value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config override {key!r}")
        return cfg

    # -- derived ------------------------------------------------------------

    def resolved_factor_shapes(self):
        """None for dense models; a list of (p, q) for Kronecker models."""
        if self.model in ("rnn", "lstm"):
            return None
        if self.factor_shapes == "auto-2x2":
            n = self.n
            shapes = []
            while n > 1:
                if n % 2:
                    raise ConfigError(
                        f"auto-2x2 factorization requires n to be a power of 2, "
                        f"got {self.n}")
                shapes.append((2, 2))
                n //= 2
            return shapes
        return [tuple(s) for s in self.factor_shapes]

    def model_hash(self):
        ident = {
            "task": self.task, "model": self.model, "field": self.field,
            "n": self.n, "d": self.d, "m": self.m,
            "sequence_length": self.sequence_length,
            "factor_shapes": self.resolved_factor_shapes(),
            "activation": self.activation,
        }
        blob = json.dumps(ident, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self):
        return dataclasses.asdict(self)


def _build_section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")
    return cls(**raw)


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    opt = _build_section(OptimizerConfig, raw.pop("optimizer", {}), "optimizer")
    sched = _build_section(ScheduleConfig, raw.pop("schedule", {}), "schedule")
    data = _build_section(DataConfig, raw.pop("data", {}), "data")
    known = {f.name for f in dataclasses.fields(RunConfig)} - {
        "optimizer", "schedule", "data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    missing = {"task", "model", "n"} - set(raw)
    if missing:
        raise ConfigError(f"missing required config key(s): {sorted(missing)}")
    cfg = RunConfig(optimizer=opt, schedule=sched, data=data, **raw)
    validate_config(cfg)
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def validate_config(cfg):
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}; expected one of {TASKS}")
    if cfg.model not in MODELS:
        raise ConfigError(f"unknown model {cfg.model!r}; expected one of {MODELS}")
    expected_field = MODEL_FIELD[cfg.model]
    if cfg.field is None:
        cfg.field = expected_field
    elif cfg.field not in FIELDS:
        raise ConfigError(f"unknown field {cfg.field!r}")
    elif cfg.field != expected_field:
        raise ConfigError(
            f"model {cfg.model!r} runs in the {expected_field} field, "
            f"config says {cfg.field!r}")
    if cfg.n < 1:
        raise ConfigError(f"n must be >= 1, got {cfg.n}")

    shapes = cfg.resolved_factor_shapes()
    if shapes is not None:
        pn = int(np.prod([p for p, _ in shapes]))
        qn = int(np.prod([q for _, q in shapes]))
        if pn != cfg.n or qn != cfg.n:
            raise ConfigError(
                f"factor shapes {shapes} multiply to {pn}x{qn}, expected "
                f"{cfg.n}x{cfg.n}")

    if cfg.model in ("lstm", "kru-lstm"):
        if cfg.activation is not None:
            raise ConfigError("gated cells have fixed activations; "
                              "remove the 'activation' key")
    else:
        default = DEFAULT_ACTIVATION[cfg.model]
        if cfg.activation is None:
            cfg.activation = default
        elif cfg.activation not in (default, "identity"):
            raise ConfigError(
                f"activation {cfg.activation!r} unsupported for {cfg.model}")

    if cfg.task == "copy" or cfg.task == "adding":
        if cfg.sequence_length is None:
            raise ConfigError(f"task {cfg.task!r} requires sequence_length")
        if cfg.sequence_length < 2:
            raise ConfigError("sequence_length must be >= 2")
    if cfg.task in ("mnist", "mnist-permuted"):
        if not cfg.data.train_images or not cfg.data.train_labels:
            raise ConfigError(
                "mnist tasks require data.train_images and data.train_labels")
    if cfg.task == "charlm":
        for key in ("train_text", "valid_text", "test_text"):
            if not getattr(cfg.data, key):
                raise ConfigError(f"charlm requires data.{key}")

    # Task-implied input/output sizes (charlm dims come from the corpus).
    implied = {"copy": (10, 10), "adding": (2, 1), "mnist": (1, 10),
               "mnist-permuted": (1, 10)}
    if cfg.task in implied:
        d, m = implied[cfg.task]
        if cfg.d is None:
            cfg.d = d
        elif cfg.d != d:
            raise ConfigError(f"task {cfg.task!r} implies d={d}, config says {cfg.d}")
        if cfg.m is None:
            cfg.m = m
        elif cfg.m != m:
            raise ConfigError(f"task {cfg.task!r} implies m={m}, config says {cfg.m}")

    sched = cfg.schedule
    for key in ("batch_size", "log_every", "eval_every"):
        if getattr(sched, key) < 1:
            raise ConfigError(f"schedule.{key} must be >= 1")
    if sched.max_updates is None and sched.epochs is None:
        raise ConfigError("schedule needs max_updates or epochs")
    if sched.gradient_clip is not None and sched.gradient_clip <= 0:
        raise ConfigError("schedule.gradient_clip must be > 0 when set")
    if sched.plateau_start_updates < 0:
        raise ConfigError("schedule.plateau_start_updates must be >= 0")
    if sched.unitary_amplitude < 0:
        raise ConfigError("schedule.unitary_amplitude must be >= 0")
    if not 0 < sched.lr_decay_factor <= 1:
        raise ConfigError("schedule.lr_decay_factor must be in (0, 1]")
    if cfg.optimizer.kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {cfg.optimizer.kind!r}")
    if cfg.optimizer.learning_rate <= 0:
        raise ConfigError("optimizer.learning_rate must be > 0")
    return cfg

"""Experiment configuration: defaults, flat key=value files, overrides.

A config file is UTF-8 text, one `key = value` per line, `#` comments.
Keys are dotted paths into the nested sections (model.*, optim.*, ot.*,
bt.*, data.*) or top-level training fields. Any key can be overridden on
the command line. Snapshots are canonical (sorted keys) and hashed so
checkpoints can verify they are resumed under the same configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, replace

from .barlow import BtConfig
from .data import SyntheticSpec
from .model import ModelConfig
from .numerics import PreconditionError
from .optim import OptimConfig
from .ot import OtSolverConfig

TASKS = ("BTGOT", "MLM", "ITM")


class ConfigError(ValueError):
    """Malformed key, value, or inconsistent field combination."""


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optim: OptimConfig
    ot: OtSolverConfig
    bt: BtConfig
    data: SyntheticSpec
    batch_size: int = 32
    epochs: int = 10
    train_size: int = 192
    eval_size: int = 64
    w_got: float = 100.0
    gamma: float = 0.1
    gamma_convention: str = "eq6"
    tau: float = 0.1
    sim_mode: str = "thresholded"  # similarity fed to structure matching
    task_names: tuple[str, ...] = ("BTGOT", "MLM", "ITM")
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.w_got < 0:
            raise PreconditionError("w_got must be >= 0")
        if not self.task_names:
            raise PreconditionError("task_names must be nonempty")
        for t in self.task_names:
            if t not in TASKS:
                raise PreconditionError(f"unknown task {t!r}; choose from {TASKS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise PreconditionError("gamma must be in [0, 1]")
        if self.gamma_convention not in ("eq6", "algorithm1"):
            raise PreconditionError("gamma_convention must be eq6 or algorithm1")
        if not -1.0 <= self.tau <= 1.0:
            raise PreconditionError("tau must be in [-1, 1]")
        if self.sim_mode not in ("thresholded", "raw"):
            raise PreconditionError("sim_mode must be thresholded or raw")
        if self.batch_size < 2:
            raise PreconditionError("batch_size must be >= 2 (batch statistics)")
        if self.train_size < self.batch_size:
            raise PreconditionError("train_size must be >= batch_size")
        if self.eval_size < 1:
            raise PreconditionError("eval_size must be >= 1")


def default_config(seed: int = 0, output_dir: str = "runs/default") -> TrainConfig:
    """Desk-scale defaults; model shape fields derive from the data spec."""
    data = SyntheticSpec()
    epochs = 10
    return TrainConfig(
        model=ModelConfig(
            vocab_size=data.vocab_size,
            n_patches=data.n_patches,
            patch_dim=data.feature_dim,
            max_text_len=16,
        ),
        optim=OptimConfig(total_epochs=epochs),
        ot=OtSolverConfig(),
        bt=BtConfig(),
        data=data,
        epochs=epochs,
        seed=seed,
        output_dir=output_dir,
    )


_SECTIONS = ("model", "optim", "ot", "bt", "data")

# Fields whose values follow other fields unless explicitly overridden.
_DERIVED = {
    "model.vocab_size": lambda flat: str(_vocab_of(flat)),
    "model.n_patches": lambda flat: flat["data.n_patches"],
    "model.patch_dim": lambda flat: flat["data.feature_dim"],
    "optim.total_epochs": lambda flat: flat["epochs"],
}


def _vocab_of(flat: dict[str, str]) -> int:
    from . import data as data_mod

    return 1 + int(flat["data.n_concepts"]) * data_mod.N_ATTRIBUTES * data_mod.N_SYNONYMS


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    flat: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = _format_value(getattr(value, sub.name))
        else:
            flat[f.name] = _format_value(value)
    return dict(sorted(flat.items()))


def _parse_value(raw: str, f: dataclasses.Field):
    raw = raw.strip()
    ann = f.type if isinstance(f.type, type) else str(f.type)
    try:
        if ann in (int, "int"):
            return int(raw)
        if ann in (float, "float"):
            return float(raw)
        if ann in (bool, "bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ann in (str, "str"):
            return raw
        if "tuple[int" in str(ann):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if "tuple[str" in str(ann):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {f.name}={raw!r}: {exc}") from exc
    raise ConfigError(f"unsupported field type for {f.name}: {ann}")


def _field_map(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def from_flat(user: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from flat keys, deriving dependent fields the user
    did not set explicitly."""
    base = base or default_config()
    flat = to_flat(base)
    unknown = set(user) - set(flat)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    flat.update({k: v.strip() for k, v in user.items()})
    for key, derive in _DERIVED.items():
        if key not in user:
            flat[key] = derive(flat)

    section_classes = {
        "model": ModelConfig, "optim": OptimConfig, "ot": OtSolverConfig,
        "bt": BtConfig, "data": SyntheticSpec,
    }
    kwargs = {}
    top_fields = _field_map(TrainConfig)
    for section, cls in section_classes.items():
        sub_kwargs = {}
        for name, f in _field_map(cls).items():
            sub_kwargs[name] = _parse_value(flat[f"{section}.{name}"], f)
        try:
            kwargs[section] = cls(**sub_kwargs)
        except (PreconditionError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}] config: {exc}") from exc
    for name, f in top_fields.items():
        if name in _SECTIONS:
            continue
        kwargs[name] = _parse_value(flat[name], f)
    try:
        cfg = TrainConfig(**kwargs)
    except (PreconditionError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: TrainConfig) -> None:
    if cfg.model.vocab_size != cfg.data.vocab_size:
        raise ConfigError(
            f"model.vocab_size={cfg.model.vocab_size} does not match the "
            f"data vocabulary ({cfg.data.vocab_size})"
        )
    if cfg.model.n_patches != cfg.data.n_patches:
        raise ConfigError("model.n_patches must equal data.n_patches")
    if cfg.model.patch_dim != cfg.data.feature_dim:
        raise ConfigError("model.patch_dim must equal data.feature_dim")
    if cfg.optim.total_epochs != cfg.epochs:
        raise ConfigError("optim.total_epochs must equal epochs")
    if cfg.model.max_text_len < 2 * cfg.data.n_tokens:
        raise ConfigError(
            "model.max_text_len must be >= 2 * data.n_tokens "
            "(insertions can lengthen captions)"
        )


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def canonical_dump(cfg: TrainConfig) -> str:
    return "\n".join(f"{k}={v}" for k, v in to_flat(cfg).items()) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_dump(cfg).encode()).hexdigest()[:16]


def with_overrides(cfg: TrainConfig, **top_level) -> TrainConfig:
    """Replace top-level fields, rebuilding derived consistency."""
    flat = {k: _format_value(v) for k, v in top_level.items()}
    return from_flat(flat, base=cfg)

"""Run configuration: plain ``key = value`` files with typed keys.

Precedence is command-line flag > config file > built-in default. Unknown
keys are rejected. Some defaults depend on the architecture profile; they
are resolved only when neither a flag nor the file sets them.
"""

from dataclasses import asdict, dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


# profile-dependent defaults, applied when a key is left unset
PROFILE_DEFAULTS = {
    "paper": {"epochs": 10, "fusion_lr": 0.001, "fusion_epochs": 30},
    # desk-scale corpora are ~10^3 utterances; fusion heads need a larger
    # step to converge within a few seconds of SGD
    "toy": {"epochs": 10, "fusion_lr": 0.05, "fusion_epochs": 60},
}


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    lr: float = 0.001
    decay: float = 0.98
    decay_interval: int = 50_000
    epochs: int = None
    batch_size: int = 1
    pool_std: bool = False
    m: int = 10
    variant: str = "hidden"
    fusion_lr: float = None
    fusion_epochs: int = None
    fusion_batch_size: int = 1
    fusion_hidden: int = 600
    fusion_split: str = "train"
    lr_fusion_max_iter: int = 200
    condition: str = "seen"
    unseen_domain: str = ""
    n_domains: int = 0

    def __post_init__(self):
        self.resolve()

    def resolve(self):
        if self.profile not in PROFILE_DEFAULTS:
            raise ConfigError(f"profile must be one of {sorted(PROFILE_DEFAULTS)}, got {self.profile!r}")
        for key, val in PROFILE_DEFAULTS[self.profile].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.variant not in ("output", "hidden"):
            raise ConfigError(f"variant must be 'output' or 'hidden', got {self.variant!r}")
        if self.condition not in ("seen", "unseen"):
            raise ConfigError(f"condition must be 'seen' or 'unseen', got {self.condition!r}")
        if self.fusion_split not in ("train", "dev"):
            raise ConfigError("fusion_split must be 'train' or 'dev'")
        if self.lr < 0 or self.fusion_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        for key in ("decay_interval", "batch_size", "m", "fusion_batch_size", "fusion_hidden"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_dict().items()))


_CASTS = {"profile": str, "seed": int, "lr": float, "decay": float, "decay_interval": int,
          "epochs": int, "batch_size": int, "pool_std": bool, "m": int, "variant": str,
          "fusion_lr": float, "fusion_epochs": int, "fusion_batch_size": int,
          "fusion_hidden": int, "fusion_split": str, "lr_fusion_max_iter": int,
          "condition": str, "unseen_domain": str, "n_domains": int}


def _cast(key, raw):
    kind = _CASTS[key]
    if kind is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CASTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _cast(key, val)
    return out


def load_config(path=None, overrides=None):
    """Merge defaults, an optional file, then non-None ``overrides``."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _CASTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _cast(key, val)
    return RunConfig(**values)

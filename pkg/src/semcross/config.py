"""Run configuration and its plain-text serialization.

The on-disk format is flat `key=value` lines with `#` comments. Every
RunConfig field has a key of the same name; the loss weight is the one
exception (field `lambda_`, key `lambda`, because of the Python keyword).
Unknown keys are errors rather than warnings: a typo in a config should
never silently run the defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .fusion import VARIANTS

OPTIMIZERS = ("adam_decoupled_wd", "sgd_momentum")
AUX_KINDS = ("kl", "mse")
PRECISIONS = ("float64", "float32")


@dataclass
class RunConfig:
    # episode shape
    K: int = 5
    N: int = 1
    M: int = 15
    # loss and fusion
    lambda_: float = 0.1
    aux_loss: str = "kl"
    tau: float = 1.0
    tau_t: float = 1.0
    scale: float | None = None  # None -> 1/sqrt(semantic dim)
    fusion: str = "cam"
    # optimizer
    optimizer: str = "adam_decoupled_wd"
    lr: float = 0.001
    weight_decay: float = 0.01
    # schedule
    epochs: int = 200
    episodes_per_epoch: int = 20
    val_episodes: int = 40
    eval_episodes: int = 600
    # data
    dataset: str = "synthetic"  # "synthetic" or a manifest directory
    word_vectors: str = ""  # vector file path; empty -> synthetic built-in
    image_size: int = 84
    augment: bool = True
    # synthetic generator knobs (ignored for directory datasets)
    synth_classes: int = 16
    synth_items: int = 40
    synth_train: int = 6
    synth_val: int = 5
    synth_test: int = 5
    synth_image_size: int = 84
    synth_twin_fraction: float = 0.5
    synth_bimodal_fraction: float = 0.125
    synth_semantic_dim: int = 32
    synth_noise: float = 0.02
    # model
    filters: tuple = (64, 64, 128, 128)
    # run control
    seed: int = 0
    precision: str = "float64"
    threads: int = 1

    def validate(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.N < 1 or self.M < 1:
            raise ConfigError(f"N and M must be >= 1, got N={self.N}, M={self.M}")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lambda_}")
        if self.tau <= 0 or self.tau_t <= 0:
            raise ConfigError(f"temperatures must be positive, got tau={self.tau}, tau_t={self.tau_t}")
        if self.scale is not None and self.scale <= 0:
            raise ConfigError(f"scale must be positive (or auto), got {self.scale}")
        if self.fusion not in VARIANTS:
            raise ConfigError(f"fusion must be one of {VARIANTS}, got {self.fusion!r}")
        if self.aux_loss not in AUX_KINDS:
            raise ConfigError(f"aux_loss must be one of {AUX_KINDS}, got {self.aux_loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs and episodes_per_epoch must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError(f"eval_episodes must be >= 1, got {self.eval_episodes}")
        if self.val_episodes < 0:
            raise ConfigError(f"val_episodes must be >= 0, got {self.val_episodes}")
        if not self.filters:
            raise ConfigError("filters must name at least one conv block")
        if any(f < 1 for f in self.filters):
            raise ConfigError(f"filter counts must be positive, got {self.filters}")
        if self.image_size < 2 ** len(self.filters):
            raise ConfigError(
                f"image_size {self.image_size} cannot survive {len(self.filters)} poolings"
            )
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        return self


def _key_of(field_name):
    return "lambda" if field_name == "lambda_" else field_name


def _field_of(key):
    return "lambda_" if key == "lambda" else key


def _parse_bool(s, key):
    if s in ("true", "True", "1", "yes"):
        return True
    if s in ("false", "False", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {s!r}")


def _parse_filters(s, key):
    try:
        vals = tuple(int(p) for p in s.split(",") if p.strip() != "")
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {s!r}") from None
    if not vals:
        raise ConfigError(f"{key}: expected at least one filter count")
    return vals


def _parse_scale(s, key):
    if s in ("auto", "none", ""):
        return None
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"{key}: expected a number or 'auto', got {s!r}") from None


def _coerce(field_name, raw, key):
    if field_name == "filters":
        return _parse_filters(raw, key)
    if field_name == "scale":
        return _parse_scale(raw, key)
    if field_name == "augment":
        return _parse_bool(raw, key)
    proto = RunConfig.__dataclass_fields__[field_name].default
    if isinstance(proto, bool):
        return _parse_bool(raw, key)
    if isinstance(proto, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(proto, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config_text(text, source="<config>"):
    """key=value lines -> RunConfig; unknown or repeated keys are errors."""
    seen = {}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        fname = _field_of(key)
        if fname not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        updates[fname] = _coerce(fname, raw, key)
    return replace(RunConfig(), **updates).validate()


def config_to_text(cfg):
    """Serialize every field, one key per line, in declaration order."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "filters":
            v = ",".join(str(x) for x in v)
        elif f.name == "scale":
            v = "auto" if v is None else repr(float(v))
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{_key_of(f.name)}={v}")
    return "\n".join(lines) + "\n"


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=path)


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_text(cfg))

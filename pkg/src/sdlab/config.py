"""Plain-text key=value run configuration, one key per line, '#' comments."""

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    T: int = 30
    w_invert: float = 1.0
    w_edit: float = 7.5
    K: int = 100
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    tau_c: float = 0.8
    tau_s: float = 0.8
    tau_u: float = 0.5
    tau_v: float = 0.5
    dataset_size: int = 240
    train_steps: int = 20000
    train_lr: float = 4e-4
    encoder_steps: int = 1500
    classifier_steps: int = 6000
    att_reg: bool = True
    k_schedule: str = "normalized"
    data_dir: str = "data"
    out_dir: str = "out"
    model_path: str = "out/model.sdlb"

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.lr <= 0 or self.train_lr <= 0:
            raise ConfigError("learning rates must be positive")
        for name in ("tau_c", "tau_s", "tau_u", "tau_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be >= 1")
        if self.k_schedule not in ("normalized", "literal"):
            raise ConfigError(f"k_schedule must be normalized|literal, got {self.k_schedule}")

    def echo(self):
        """Config as a plain dict, embedded into every output manifest."""
        return asdict(self)

    def to_text(self):
        return "\n".join(f"{k}={v}" for k, v in sorted(self.echo().items())) + "\n"


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(name, kind, raw, lineno):
    try:
        if kind is bool:
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {name!r}: {raw!r}") from e


def parse_config(text):
    """Parse key=value lines into a RunConfig; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"seed": int, "T": int, "K": int, "dataset_size": int, "train_steps": int,
             "encoder_steps": int, "classifier_steps": int, "att_reg": bool,
             "w_invert": float, "w_edit": float, "lr": float, "train_lr": float,
             "beta1": float, "beta2": float, "tau_c": float, "tau_s": float,
             "tau_u": float, "tau_v": float, "k_schedule": str, "data_dir": str,
             "out_dir": str, "model_path": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, kinds[key], raw, lineno)
    return RunConfig(**values)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

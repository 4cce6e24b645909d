"""Experiment configuration: flat ``key = value`` files plus per-dataset presets.

Lines starting with ``#`` are comments. Unknown keys are rejected. A value
of ``auto`` (or an omitted key) resolves to the preset for the dataset,
falling back to the generic default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import SHARING_MODES, ModelConfig
from .trainer import TrainConfig, default_rho

# encoder count, batch size, RevIN statistics window (None = whole window)
PRESETS = {
    "etth1": {"encoders": 1},
    "etth2": {"encoders": 1},
    "ettm1": {"encoders": 3},
    "ettm2": {"encoders": 1},
    "weather": {"encoders": 3},
    "electricity": {"encoders": 3},
    "traffic": {"encoders": 3, "batch_size": 8},
    "exchange": {"encoders": 1, "revin_window": 16},
}
_ALIASES = {"exchange_rate": "exchange", "ecl": "electricity"}


class ConfigFileError(ValueError):
    pass


def dataset_key(path_or_name):
    if not path_or_name:
        return ""
    stem = Path(str(path_or_name)).stem.lower()
    return _ALIASES.get(stem, stem)


@dataclass
class ExperimentConfig:
    dataset: str = ""
    dataset_name: str = "auto"
    split: str = "auto"
    channels: int = 0  # 0: take from the dataset
    seq_len: int = 512
    horizon: int = 96
    segments: int = 32
    encoders: str = "auto"
    sharing: str = "in-encoder"
    revin_window: str = "auto"
    rho: str = "auto"
    lr: float = 1e-4
    batch_size: str = "auto"
    eval_batch_size: int = 256
    max_epochs: int = 300
    patience: int = 30
    seed: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    dtype: str = "float32"
    out: str = "runs/psformer"

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def update(self, mapping):
        types = {f.name: f.type for f in fields(self)}
        for k, v in mapping.items():
            k = k.replace("-", "_")
            if k not in types:
                raise ConfigFileError(f"unknown config key {k!r}")
            if v is None:
                continue
            cur = getattr(self, k)
            try:
                if types[k] in ("int", int):
                    v = int(v)
                elif types[k] in ("float", float):
                    v = float(v)
                else:
                    v = str(v)
            except ValueError:
                raise ConfigFileError(f"bad value for {k}: {v!r}") from None
            setattr(self, k, v)
        return self

    # -- resolution -----------------------------------------------------

    def resolve(self, n_channels=None):
        """Fill every ``auto`` field and return a fully concrete copy."""
        out = ExperimentConfig(**{k: getattr(self, k) for k in self.keys()})
        name = dataset_key(self.dataset) if self.dataset_name == "auto" else self.dataset_name
        out.dataset_name = name or "custom"
        preset = PRESETS.get(name, {})
        if n_channels is not None:
            out.channels = int(n_channels)
        if out.encoders == "auto":
            out.encoders = str(preset.get("encoders", 1))
        if out.batch_size == "auto":
            out.batch_size = str(preset.get("batch_size", 16))
        if out.revin_window == "auto":
            out.revin_window = str(preset.get("revin_window", out.seq_len))
        if out.rho == "auto":
            rho = default_rho(name, out.horizon)
            out.rho = str(0.0 if rho is None else rho)
        if out.sharing not in SHARING_MODES:
            raise ConfigFileError(f"sharing must be one of {SHARING_MODES}, got {out.sharing!r}")
        for k in ("encoders", "batch_size", "revin_window"):
            try:
                int(getattr(out, k))
            except ValueError:
                raise ConfigFileError(f"bad value for {k}: {getattr(out, k)!r}") from None
        try:
            float(out.rho)
        except ValueError:
            raise ConfigFileError(f"bad value for rho: {out.rho!r}") from None
        return out

    def model_config(self) -> ModelConfig:
        r = self.resolve() if "auto" in (self.encoders, self.revin_window) else self
        if r.channels <= 0:
            raise ConfigFileError("channel count unknown; give a dataset or --channels")
        return ModelConfig(
            n_channels=r.channels, seq_len=r.seq_len, n_segments=r.segments, horizon=r.horizon,
            n_encoders=int(r.encoders), sharing=r.sharing, revin_window=int(r.revin_window))

    def train_config(self) -> TrainConfig:
        r = self.resolve() if "auto" in (self.rho, self.batch_size) else self
        return TrainConfig(
            max_epochs=r.max_epochs, patience=r.patience, batch_size=int(r.batch_size),
            eval_batch_size=r.eval_batch_size, lr=r.lr, rho=float(r.rho),
            betas=(r.beta1, r.beta2), seed=r.seed, dtype=r.dtype)

    # -- text form ------------------------------------------------------

    def dumps(self):
        lines = ["# psformer experiment config"]
        lines += [f"{k} = {getattr(self, k)}" for k in self.keys()]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.dumps())


def parse_config_text(text):
    out = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {i}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig().update(parse_config_text(text))

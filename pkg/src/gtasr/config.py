"""Flat ``key=value`` configuration with typed accessors."""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, str] = {
    "seed": "42",
    "run.name": "run",
    "run.group": "",
    "run.arm": "",
    # noise schedule
    "schedule.T": "5",
    "schedule.n_stage1": "2.5",
    "schedule.n_stage2": "1.0",
    "schedule.T_late": "0",
    # training
    "train.iterations_stage1": "3000",
    "train.iterations_stage2": "600",
    "train.sync_period": "150",
    "train.batch_size": "8",
    "train.lr": "5e-4",
    "train.adam_beta1": "0.9",
    "train.adam_beta2": "0.999",
    "train.adam_eps": "1e-8",
    "train.tprime_min": "1",
    "train.tprime_max": "0",
    "train.log_every": "1",
    # losses
    "loss.lambda_ta": "0.5",
    "loss.lambda_dtm": "1.6",
    "loss.lambda_stab": "0.032",
    "loss.lambda_rect": "1.0",
    "loss.charbonnier_eps": "1e-3",
    "loss.omega_eps": "1e-8",
    "loss.percep_seed": "1234",
    "loss.stab_channel_mode": "mean",
    # model
    "model.width": "16",
    "model.mid_depth": "3",
    "model.init_seed": "0",
    # data
    "data.size": "32",
    "data.scale": "4",
    "data.blur_min": "0.5",
    "data.blur_max": "1.5",
    "data.noise_min": "0.01",
    "data.noise_max": "0.05",
    "data.val_count": "64",
    "data.kinds": "grf,checker,shapes",
}


class ConfigError(ValueError):
    pass


class Config:
    """String-valued settings; unknown keys are rejected."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def load(cls, path) -> "Config":
        return cls(parse(Path(path).read_text()))

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value)

    def update(self, values: dict) -> "Config":
        for k, v in values.items():
            self.set(k, v)
        return self

    def copy(self, **overrides) -> "Config":
        c = Config(self.values)
        for k, v in overrides.items():
            c.set(k.replace("__", "."), v)
        return c

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(float(self.values[key]))

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_list(self, key: str) -> list[str]:
        return [s.strip() for s in self.values[key].split(",") if s.strip()]

    def dumps(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def parse(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out

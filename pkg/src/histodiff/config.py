"""Run configuration: presets, flat key/value config files, flag overrides.

Precedence (lowest to highest): preset defaults, config file, command-line
overrides. The fully resolved configuration is serialized verbatim into
every output directory so any run can be reproduced from its artifacts.

Config file schema: one ``key = value`` per line, ``#`` comments and blank
lines ignored. Values are parsed per key (int, float, bool, string, or a
comma list of ints for the tuple-valued keys).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .denoiser import DenoiserConfig
from .errors import ConfigError
from .schedule import NoiseSchedule, linear_schedule
from .training import TrainConfig

PRESETS: dict[str, dict[str, object]] = {
    # Paper-scale settings: 128 px patches, 1000 diffusion steps, full widths.
    "paper": {
        "image.size": 128,
        "diffusion.T": 1000,
        "diffusion.beta_start": 1e-4,
        "diffusion.beta_end": 0.02,
        "diffusion.schedule": "linear",
        "denoiser.base_width": 128,
        "denoiser.channel_multipliers": (1, 1, 2, 2, 4),
        "denoiser.num_res_blocks": 2,
        "denoiser.attention_resolutions": (32, 16, 8),
        "denoiser.time_embed_dim": 512,
        "denoiser.cond_hidden": 128,
        "denoiser.num_heads": 4,
        "denoiser.num_groups": 32,
        "denoiser.dropout": 0.0,
        "train.lr_main": 1e-4,
        "train.lr_finetune": 2e-5,
        "train.cond_drop_rate_main": 0.0,
        "train.cond_drop_rate_finetune": 0.2,
        "train.ema_decay": 0.999,
        "train.lambda_vlb": 1e-3,
        "train.batch_size": 40,
        "train.steps_main": 150_000,
        "train.steps_finetune": 50_000,
        "train.checkpoint_every": 1000,
        "train.log_every": 50,
        "train.grad_clip_norm": 1.0,
        "train.weight_decay": 0.0,
        "train.device": "cpu",
        "seed": 0,
    },
    # Desk-scale settings: 32 px, 100 steps. Beta endpoints are rescaled by
    # 1000/T so the terminal signal-to-noise ratio still lands near zero,
    # and the EMA horizon is shortened to match the short phase lengths.
    "tiny": {
        "image.size": 32,
        "diffusion.T": 100,
        "diffusion.beta_start": 1e-3,
        "diffusion.beta_end": 0.2,
        "diffusion.schedule": "linear",
        "denoiser.base_width": 32,
        "denoiser.channel_multipliers": (1, 2),
        "denoiser.num_res_blocks": 2,
        "denoiser.attention_resolutions": (),
        "denoiser.time_embed_dim": 128,
        "denoiser.cond_hidden": 32,
        "denoiser.num_heads": 4,
        "denoiser.num_groups": 8,
        "denoiser.dropout": 0.0,
        "train.lr_main": 1e-3,
        "train.lr_finetune": 2e-4,
        "train.cond_drop_rate_main": 0.0,
        "train.cond_drop_rate_finetune": 0.2,
        "train.ema_decay": 0.99,
        "train.lambda_vlb": 1e-3,
        "train.batch_size": 16,
        "train.steps_main": 2000,
        "train.steps_finetune": 500,
        "train.checkpoint_every": 500,
        "train.log_every": 50,
        "train.grad_clip_norm": 1.0,
        "train.weight_decay": 0.0,
        "train.device": "cpu",
        "seed": 0,
    },
}

_INT_TUPLE_KEYS = {"denoiser.channel_multipliers", "denoiser.attention_resolutions"}
_STR_KEYS = {"diffusion.schedule", "train.device"}
_INT_KEYS = {
    "image.size",
    "diffusion.T",
    "denoiser.base_width",
    "denoiser.num_res_blocks",
    "denoiser.time_embed_dim",
    "denoiser.cond_hidden",
    "denoiser.num_heads",
    "denoiser.num_groups",
    "train.batch_size",
    "train.steps_main",
    "train.steps_finetune",
    "train.checkpoint_every",
    "train.log_every",
    "seed",
}


def _parse_value(key: str, raw: str) -> object:
    raw = raw.strip()
    if key in _STR_KEYS:
        return raw
    if key in _INT_TUPLE_KEYS:
        if not raw:
            return ()
        try:
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected comma-separated ints, got {raw!r}") from exc
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc


def parse_config_file(path: str | Path) -> dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key == "preset":
            out[key] = raw.strip()
            continue
        if key not in PRESETS["paper"]:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass
class RunConfig:
    """Fully resolved configuration for one command invocation."""

    preset: str = "paper"
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def resolve(
        cls,
        preset: str | None = None,
        config_file: str | Path | None = None,
        overrides: dict[str, object] | None = None,
    ) -> "RunConfig":
        file_values = parse_config_file(config_file) if config_file else {}
        preset_name = preset or str(file_values.pop("preset", "paper"))
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        file_values.pop("preset", None)
        values = dict(PRESETS[preset_name])
        values.update(file_values)
        for key, val in (overrides or {}).items():
            if val is None:
                continue
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, str(val)) if isinstance(val, str) else val
        return cls(preset=preset_name, values=values)

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def image_size(self) -> int:
        return int(self.values["image.size"])

    def schedule(self) -> NoiseSchedule:
        if self.values["diffusion.schedule"] != "linear":
            raise ConfigError(f"unsupported schedule {self.values['diffusion.schedule']!r}")
        return linear_schedule(
            int(self.values["diffusion.T"]),
            float(self.values["diffusion.beta_start"]),
            float(self.values["diffusion.beta_end"]),
        )

    def denoiser_config(self) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(
            image_size=self.image_size,
            base_width=int(v["denoiser.base_width"]),
            channel_multipliers=tuple(v["denoiser.channel_multipliers"]),
            num_res_blocks=int(v["denoiser.num_res_blocks"]),
            attention_resolutions=tuple(v["denoiser.attention_resolutions"]),
            time_embed_dim=int(v["denoiser.time_embed_dim"]),
            cond_hidden=int(v["denoiser.cond_hidden"]),
            num_heads=int(v["denoiser.num_heads"]),
            num_groups=int(v["denoiser.num_groups"]),
            dropout=float(v["denoiser.dropout"]),
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr_main=float(v["train.lr_main"]),
            lr_finetune=float(v["train.lr_finetune"]),
            cond_drop_rate_main=float(v["train.cond_drop_rate_main"]),
            cond_drop_rate_finetune=float(v["train.cond_drop_rate_finetune"]),
            ema_decay=float(v["train.ema_decay"]),
            lambda_vlb=float(v["train.lambda_vlb"]),
            batch_size=int(v["train.batch_size"]),
            steps_main=int(v["train.steps_main"]),
            steps_finetune=int(v["train.steps_finetune"]),
            seed=self.seed,
            checkpoint_every=int(v["train.checkpoint_every"]),
            log_every=int(v["train.log_every"]),
            grad_clip_norm=float(v["train.grad_clip_norm"]),
            adam_betas=(0.9, 0.999),
            weight_decay=float(v["train.weight_decay"]),
            device=str(v["train.device"]),
        )

    def serialize(self) -> str:
        lines = [f"# histodiff {__version__}", f"preset = {self.preset}"]
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

"""Optimization loop: hybrid loss, EMA shadow weights, two-phase schedule.

The main phase trains fully conditionally at the base learning rate; the
finetune phase lowers the rate and randomly replaces each sample's mask
with the null mask (independently, per sample) so the model also learns
the unconditional distribution needed for classifier-free guidance.

All randomness (timesteps, noise, conditioning dropout, data order) is
driven by explicit seeded generators whose state is checkpointed, so an
interrupted run resumed from a checkpoint reproduces the uninterrupted
run bit for bit on one device.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .diffusion import DEFAULT_LAMBDA_VLB, Diffusion, LossReport, loss_hybrid, loss_simple, pixels_to_unit
from .denoiser import DenoiserConfig, SemanticUNet
from .errors import ConfigError, DataError, NumericError
from .manifest import Manifest, load_patch_arrays
from .masks import encode
from .regions import CLASS_CODES
from .schedule import NoiseSchedule, linear_schedule

logger = logging.getLogger(__name__)

PHASES = ("main", "finetune")


@dataclass
class TrainConfig:
    lr_main: float = 1e-4
    lr_finetune: float = 2e-5
    cond_drop_rate_main: float = 0.0
    cond_drop_rate_finetune: float = 0.2
    ema_decay: float = 0.999
    lambda_vlb: float = DEFAULT_LAMBDA_VLB
    batch_size: int = 16
    steps_main: int = 150_000
    steps_finetune: int = 50_000
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    grad_clip_norm: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    device: str = "cpu"

    def __post_init__(self) -> None:
        self.adam_betas = tuple(self.adam_betas)
        for name in ("cond_drop_rate_main", "cond_drop_rate_finetune", "ema_decay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.lr_main <= 0 or self.lr_finetune <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def lr(self, phase: str) -> float:
        return self.lr_main if phase == "main" else self.lr_finetune

    def drop_rate(self, phase: str) -> float:
        return self.cond_drop_rate_main if phase == "main" else self.cond_drop_rate_finetune

    def steps(self, phase: str) -> int:
        return self.steps_main if phase == "main" else self.steps_finetune


class Ema:
    """Exponential moving average of model parameters.

    ``shadow = decay * shadow + (1 - decay) * weight`` per update, so after
    n updates at constant weight w: shadow = w + (shadow0 - w) * decay^n.
    """

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = float(decay)
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict) -> None:
        self.shadow = {k: v.clone() for k, v in state.items()}


class PatchDataset:
    """In-memory (image, conditioning) pairs with a deterministic batch order.

    The order is a pure function of (seed, step): epoch e uses the
    permutation drawn from ``default_rng(seed + e)``, so training can
    resume mid-epoch without replaying data.
    """

    def __init__(self, images: torch.Tensor, masks: torch.Tensor, ids: list[str] | None = None):
        if len(images) != len(masks):
            raise DataError("images and masks must pair up")
        if len(images) == 0:
            raise DataError("empty dataset")
        self.images = images
        self.masks = masks
        self.ids = ids or [str(i) for i in range(len(images))]

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        store_root: str | Path,
        split: str = "train",
        magnification: str = "20x",
        image_size: int | None = None,
    ) -> "PatchDataset":
        """Load a split into memory, optionally downscaling stored patches to
        ``image_size`` (area averaging for pixels, nearest for labels) so
        desk-scale presets can train on full-size stores."""
        rows = manifest.select(split=split, magnification=magnification)
        if not rows:
            raise DataError(f"no {split}/{magnification} patches in manifest")
        images, masks, ids = [], [], []
        for row in rows:
            pixels, class_map, inst_map = load_patch_arrays(store_root, row)
            if image_size is not None and image_size != pixels.shape[0]:
                if pixels.shape[0] % image_size:
                    raise DataError(
                        f"cannot reduce {pixels.shape[0]} px patches to {image_size} px "
                        "(not an integer factor)"
                    )
                factor = pixels.shape[0] // image_size
                pixels = np.asarray(
                    PILImage.fromarray(pixels).resize((image_size, image_size), PILImage.BOX)
                )
                class_map = class_map[::factor, ::factor]
                inst_map = inst_map[::factor, ::factor]
            images.append(pixels_to_unit(pixels))
            masks.append(torch.from_numpy(encode(class_map, inst_map).layout))
            ids.append(row.patch_id)
        return cls(torch.stack(images), torch.stack(masks), ids)

    def batch_indices(self, step: int, batch_size: int, seed: int) -> np.ndarray:
        n = len(self)
        per_epoch = max(n // batch_size, 1)
        epoch, slot = divmod(step, per_epoch)
        perm = np.random.default_rng(seed + epoch).permutation(n)
        take = min(batch_size, n)
        start = (slot * batch_size) % max(n - take + 1, 1)
        return perm[start : start + take]

    def batch(self, step: int, batch_size: int, seed: int) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        idx = self.batch_indices(step, batch_size, seed)
        return self.images[idx], self.masks[idx], [self.ids[i] for i in idx]


def train_step(
    batch: tuple[torch.Tensor, torch.Tensor, list[str]],
    model: torch.nn.Module,
    diffusion: Diffusion,
    optimizer: torch.optim.Optimizer,
    ema: Ema,
    generator: torch.Generator,
    drop_rate: float,
    lambda_vlb: float,
    grad_clip_norm: float = 1.0,
) -> LossReport:
    """One optimizer step on a batch of ([-1,1] images, conditioning masks)."""
    x0, masks, ids = batch
    b = x0.shape[0]
    t = torch.randint(1, diffusion.T + 1, (b,), generator=generator).to(x0.device)
    eps = torch.randn(x0.shape, generator=generator).to(x0.device)
    if drop_rate > 0:
        dropped = torch.rand((b,), generator=generator) < drop_rate
        masks = masks.clone()
        masks[dropped] = 0.0
    x_t = diffusion.q_sample(x0, t, eps)

    out = model(x_t, masks, t)
    l_simple = loss_simple(eps, out.eps_hat)
    l_vlb = diffusion.loss_vlb(out, x0, x_t, t)
    l_hybrid = loss_hybrid(l_simple, l_vlb, lambda_vlb)
    if not torch.isfinite(l_hybrid):
        raise NumericError(
            f"non-finite loss (simple={l_simple.item()}, vlb={l_vlb.item()}) "
            f"at t={t.tolist()} on batch {ids}"
        )

    optimizer.zero_grad(set_to_none=True)
    l_hybrid.backward()
    if grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip_norm)
    optimizer.step()
    ema.update(model)

    per_simple, per_vlb = diffusion.per_sample_losses(out, x0, x_t, eps, t)
    return LossReport(
        l_simple=float(l_simple.detach()),
        l_vlb=float(l_vlb.detach()),
        l_hybrid=float(l_hybrid.detach()),
        timesteps=t.cpu().numpy().copy(),
        per_sample_simple=per_simple.cpu().numpy(),
        per_sample_vlb=per_vlb.cpu().numpy(),
    )


def _atomic_save(payload: dict, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    ema: Ema,
    denoiser_config: DenoiserConfig,
    schedule: NoiseSchedule,
    train_config: TrainConfig | None = None,
    phase: str | None = None,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
) -> None:
    """Checkpoint with everything sampling needs (weights, EMA, architecture,
    schedule, class codes) plus optional trainer state for resumption."""
    payload = {
        "model": model.state_dict(),
        "ema": ema.state_dict(),
        "ema_decay": ema.decay,
        "denoiser_config": asdict(denoiser_config),
        "schedule": {"T": schedule.T, "beta": schedule.beta},
        "class_codes": dict(CLASS_CODES),
        "step": step,
        "phase": phase,
    }
    if train_config is not None:
        payload["train_config"] = asdict(train_config)
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if generator is not None:
        payload["generator_state"] = generator.get_state()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_save(payload, path)


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=False)
    for key in ("model", "ema", "denoiser_config", "schedule"):
        if key not in payload:
            raise DataError(f"checkpoint {path} missing key {key!r}")
    return payload


def build_from_checkpoint(payload: dict, use_ema: bool = True) -> tuple[SemanticUNet, Diffusion]:
    """Reconstruct a ready-to-sample denoiser and diffusion from a checkpoint."""
    cfg = DenoiserConfig(**payload["denoiser_config"])
    model = SemanticUNet(cfg)
    model.load_state_dict(payload["ema"] if use_ema else payload["model"])
    model.eval()
    schedule = NoiseSchedule(T=int(payload["schedule"]["T"]), beta=payload["schedule"]["beta"])
    return model, Diffusion(schedule)


def _config_diff(saved: dict, current: dict) -> list[str]:
    keys = sorted(set(saved) | set(current))
    out = []
    for k in keys:
        a, b = saved.get(k, "<missing>"), current.get(k, "<missing>")
        if isinstance(a, (list, tuple)) or isinstance(b, (list, tuple)):
            a, b = tuple(a) if a != "<missing>" else a, tuple(b) if b != "<missing>" else b
        if a != b:
            out.append(f"{k}: checkpoint={a!r} vs requested={b!r}")
    return out


@dataclass
class PhaseResult:
    checkpoint_path: Path
    final_step: int
    last_report: LossReport | None = None
    log_path: Path | None = None


def run_phase(
    dataset: PatchDataset,
    model: SemanticUNet,
    denoiser_config: DenoiserConfig,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    phase: str,
    out_dir: str | Path,
    resume: str | Path | None = None,
    steps_override: int | None = None,
) -> PhaseResult:
    """Run one training phase to completion, checkpointing along the way.

    ``resume`` pointing at a checkpoint of the same phase restores the full
    trainer state (mid-phase resumption); a main-phase checkpoint passed to
    the finetune phase seeds weights and EMA only.
    """
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = torch.device(cfg.device)
    model.to(device)
    diffusion = Diffusion(schedule)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr(phase), betas=cfg.adam_betas, weight_decay=cfg.weight_decay
    )
    ema = Ema(model, cfg.ema_decay)
    generator = torch.Generator(device="cpu")
    generator.manual_seed(cfg.seed + (0 if phase == "main" else 1))
    start_step = 0

    if resume is not None:
        payload = load_checkpoint(resume)
        saved_cfg = payload.get("denoiser_config", {})
        diff = _config_diff(saved_cfg, asdict(denoiser_config))
        if diff:
            raise ConfigError("checkpoint/requested denoiser configs differ:\n  " + "\n  ".join(diff))
        model.load_state_dict(payload["model"])
        ema.load_state_dict(payload["ema"])
        if payload.get("phase") == phase:
            saved_tc = payload.get("train_config")
            if saved_tc is not None:
                diff = _config_diff(saved_tc, asdict(cfg))
                if diff:
                    raise ConfigError(
                        "checkpoint/requested train configs differ:\n  " + "\n  ".join(diff)
                    )
            if "optimizer" in payload:
                optimizer.load_state_dict(payload["optimizer"])
            if "generator_state" in payload:
                generator.set_state(payload["generator_state"])
            start_step = int(payload.get("step", 0))
            logger.info("resuming %s phase at step %d", phase, start_step)
        else:
            logger.info("initializing %s phase from %s checkpoint weights", phase, payload.get("phase"))
    elif phase == "finetune":
        raise ConfigError("finetune phase requires --resume pointing at the main-phase checkpoint")

    n_steps = cfg.steps(phase) if steps_override is None else steps_override
    drop_rate = cfg.drop_rate(phase)
    log_path = out_dir / f"train_{phase}.jsonl"
    ckpt_path = out_dir / f"checkpoint_{phase}.pt"
    report: LossReport | None = None
    t_start = time.monotonic()
    with open(log_path, "a") as log_file:
        for step in range(start_step, n_steps):
            batch = dataset.batch(step, cfg.batch_size, cfg.seed)
            batch = (batch[0].to(device), batch[1].to(device), batch[2])
            report = train_step(
                batch,
                model,
                diffusion,
                optimizer,
                ema,
                generator,
                drop_rate=drop_rate,
                lambda_vlb=cfg.lambda_vlb,
                grad_clip_norm=cfg.grad_clip_norm,
            )
            done = step + 1
            if done % cfg.log_every == 0 or done == n_steps:
                elapsed = time.monotonic() - t_start
                rate = (done - start_step) / max(elapsed, 1e-9)
                record = {
                    "step": done,
                    "phase": phase,
                    "l_simple": report.l_simple,
                    "l_vlb": report.l_vlb,
                    "l_hybrid": report.l_hybrid,
                    "lr": cfg.lr(phase),
                    "steps_per_sec": round(rate, 4),
                }
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
                logger.info(
                    "phase=%s step=%d/%d l_simple=%.5f l_vlb=%.5f l_hybrid=%.5f (%.2f it/s)",
                    phase, done, n_steps, report.l_simple, report.l_vlb, report.l_hybrid, rate,
                )
            if done % cfg.checkpoint_every == 0 or done == n_steps:
                save_checkpoint(
                    ckpt_path,
                    model,
                    ema,
                    denoiser_config,
                    schedule,
                    train_config=cfg,
                    phase=phase,
                    step=done,
                    optimizer=optimizer,
                    generator=generator,
                )
    return PhaseResult(checkpoint_path=ckpt_path, final_step=n_steps, last_report=report, log_path=log_path)

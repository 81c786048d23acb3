"""Generative evaluation: Fréchet distance and inception score.

FID fits a Gaussian to real and synthetic feature sets and measures
``|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})``, taking the matrix
square root of the symmetrized product ``S_r^{1/2} S_f S_r^{1/2}`` via
eigendecomposition. Feature extraction uses the standard 2048-d pool layer
of an Inception-V3 classifier; the weights version and resize mode are
pinned and hashed into every report because FID is sensitive to both.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, NumericError

EIG_CLIP_TOL = -1e-8
WEIGHTS_ENV_VAR = "HISTODIFF_INCEPTION_WEIGHTS"
FEATURE_DIM = 2048


@dataclass
class FeatureSet:
    """Classifier features (N x D) and optional class probabilities (N x C)."""

    features: np.ndarray
    logits: np.ndarray | None = None
    source: str = "unknown"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D (N x D), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise DataError("non-finite feature rows")
        if self.logits is not None:
            self.logits = np.asarray(self.logits, dtype=np.float64)
            if self.logits.ndim != 2 or len(self.logits) != len(self.features):
                raise DataError("logits must be (N x C) matching features")
            if (self.logits < -1e-12).any() or not np.allclose(self.logits.sum(axis=1), 1.0, atol=1e-6):
                raise DataError("logits rows must be probability vectors")

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    n_real: int
    n_synthetic: int
    config_hash: str = ""

    def __post_init__(self) -> None:
        if not np.isfinite(self.fid):
            raise NumericError(f"non-finite FID {self.fid}")
        if self.is_mean < 1.0 - 1e-9:
            raise NumericError(f"inception score below 1: {self.is_mean}")

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "is_mean": self.is_mean,
            "is_std": self.is_std,
            "n_real": self.n_real,
            "n_synthetic": self.n_synthetic,
            "config_hash": self.config_hash,
        }


def _psd_sqrt(matrix: np.ndarray, label: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    tol = EIG_CLIP_TOL * max(1.0, float(abs(vals).max(initial=1.0)))
    if vals.min(initial=0.0) < tol:
        raise NumericError(
            f"{label} is not positive semidefinite: eigenvalues in "
            f"[{vals.min():.3e}, {vals.max():.3e}], clip tolerance {tol:.3e}"
        )
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real: FeatureSet, fake: FeatureSet) -> float:
    """Fréchet distance between Gaussian fits of the two feature sets."""
    for fs in (real, fake):
        if len(fs) < 2:
            raise DataError(f"need at least 2 samples per side, got {len(fs)} ({fs.source})")
    d = real.features.shape[1]
    if fake.features.shape[1] != d:
        raise DataError("feature dimensions differ between sets")
    if min(len(real), len(fake)) < d:
        warnings.warn(
            f"fewer samples ({min(len(real), len(fake))}) than feature dims ({d}); "
            "covariance estimates will be rank-deficient",
            stacklevel=2,
        )
    mu_r, mu_f = real.features.mean(axis=0), fake.features.mean(axis=0)
    cov_r = np.cov(real.features, rowvar=False, ddof=1).reshape(d, d)
    cov_f = np.cov(fake.features, rowvar=False, ddof=1).reshape(d, d)

    sqrt_r = _psd_sqrt(cov_r, "real covariance")
    product = sqrt_r @ cov_f @ sqrt_r
    product = (product + product.T) / 2.0
    vals = np.linalg.eigvalsh(product)
    tol = EIG_CLIP_TOL * max(1.0, float(abs(vals).max(initial=1.0)))
    if vals.min(initial=0.0) < tol:
        raise NumericError(
            "matrix square root failed: symmetrized product has eigenvalues in "
            f"[{vals.min():.3e}, {vals.max():.3e}] (clip tolerance {tol:.3e}); "
            f"covariance condition numbers ~ {np.linalg.cond(cov_r):.2e} / {np.linalg.cond(cov_f):.2e}"
        )
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(np.sum((mu_r - mu_f) ** 2) + np.trace(cov_r) + np.trace(cov_f) - 2.0 * trace_sqrt)
    return value


def inception_score(fake: FeatureSet, splits: int = 10) -> tuple[float, float]:
    """``exp(mean KL(p(y|x) || p(y)))`` per contiguous split; returns the
    mean and standard deviation over splits."""
    if fake.logits is None:
        raise DataError("inception score requires class probabilities")
    n = len(fake)
    if splits < 1 or splits > n:
        raise DataError(f"splits must lie in 1..{n}, got {splits}")
    probs = fake.logits
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = part * (np.log(np.clip(part, 1e-16, None)) - np.log(np.clip(marginal, 1e-16, None)))
        kl = np.where(part > 0, kl, 0.0).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


class FeatureExtractor:
    """Inception-V3 pool features + class probabilities for image batches.

    ``weights`` selects the classifier parameters:

    * ``"torchvision"`` — the pinned IMAGENET1K_V1 release (downloads into
      the torchvision cache unless already present);
    * a filesystem path — a state-dict artifact, e.g. a previously cached
      copy (also settable via the ``HISTODIFF_INCEPTION_WEIGHTS`` env var);
    * ``"random"`` — architecture-only with seeded initialization. Features
      are deterministic but meaningless; suitable only for plumbing tests
      and smoke runs, and flagged as such in the config hash.
    """

    def __init__(self, weights: str = "torchvision", seed: int = 0, device: str = "cpu"):
        import torchvision

        self.resize_mode = "bilinear-299-antialias"
        self.weights_id = weights
        env_path = os.environ.get(WEIGHTS_ENV_VAR)
        if weights == "torchvision" and env_path:
            weights = env_path
            self.weights_id = env_path

        if weights == "torchvision":
            try:
                model = torchvision.models.inception_v3(
                    weights=torchvision.models.Inception_V3_Weights.IMAGENET1K_V1
                )
                self.weights_id = "torchvision/inception_v3/IMAGENET1K_V1"
            except Exception as exc:
                raise DataError(
                    "Inception-V3 weights unavailable: expected the torchvision "
                    "IMAGENET1K_V1 artifact (inception_v3_google-0cc3c7bd.pth) in the "
                    f"torch hub cache, or a local copy via {WEIGHTS_ENV_VAR} or "
                    f"weights=<path>. Underlying error: {exc}"
                ) from exc
        elif weights == "random":
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                model = torchvision.models.inception_v3(
                    weights=None, init_weights=False, aux_logits=False
                )
            self.weights_id = f"random/seed={seed}"
        else:
            path = Path(weights)
            if not path.exists():
                raise DataError(
                    f"Inception-V3 weights file not found: {path}. Provide the "
                    "torchvision inception_v3_google-0cc3c7bd.pth artifact or set "
                    f"{WEIGHTS_ENV_VAR}."
                )
            # transform_input=True matches the torchvision builder's behavior
            # for the google release weights.
            model = torchvision.models.inception_v3(
                weights=None, init_weights=False, transform_input=True
            )
            state = torch.load(path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
            self.weights_id = f"file/{path.name}"

        self.device = torch.device(device)
        self.model = model.eval().to(self.device)
        self._features: torch.Tensor | None = None
        self.model.avgpool.register_forward_hook(self._capture)
        digest = hashlib.sha256(f"{self.weights_id}|{self.resize_mode}".encode()).hexdigest()
        self.config_hash = digest[:16]

    def _capture(self, module, inputs, output) -> None:
        self._features = output.flatten(1).detach()

    @torch.no_grad()
    def __call__(self, images: np.ndarray, source: str = "unknown", batch_size: int = 32) -> FeatureSet:
        """Extract features from 8-bit RGB images (N, H, W, 3)."""
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
            raise DataError(f"expected (N, H, W, 3) uint8 images, got {images.shape} {images.dtype}")
        mean = torch.tensor([0.485, 0.456, 0.406], device=self.device).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225], device=self.device).view(1, 3, 1, 1)
        feats, probs = [], []
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            x = torch.from_numpy(chunk).to(self.device).permute(0, 3, 1, 2).float() / 255.0
            x = torch.nn.functional.interpolate(
                x, size=(299, 299), mode="bilinear", align_corners=False, antialias=True
            )
            x = (x - mean) / std
            logits = self.model(x)
            if isinstance(logits, tuple):
                logits = logits[0]
            feats.append(self._features.cpu().numpy())
            probs.append(torch.softmax(logits, dim=1).cpu().numpy())
        return FeatureSet(
            features=np.concatenate(feats).astype(np.float64),
            logits=np.concatenate(probs).astype(np.float64),
            source=source,
        )


def evaluate_sets(real: FeatureSet, fake: FeatureSet, splits: int = 10, config_hash: str = "") -> MetricReport:
    is_mean, is_std = inception_score(fake, splits=min(splits, len(fake)))
    return MetricReport(
        fid=fid(real, fake),
        is_mean=is_mean,
        is_std=is_std,
        n_real=len(real),
        n_synthetic=len(fake),
        config_hash=config_hash,
    )

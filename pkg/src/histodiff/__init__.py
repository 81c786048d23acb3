"""histodiff: nuclei-aware semantic diffusion toolkit for histopathology.

Turns annotated tissue regions into stain-normalized training patches,
trains a mask-conditioned denoising diffusion model, samples tissue images
from semantic nuclei masks with classifier-free guidance, and scores the
output with FID/IS.
"""

__version__ = "0.1.0"

from .diffusion import DenoiserOutput, Diffusion, guided_eps, loss_hybrid, loss_simple
from .denoiser import DenoiserConfig, SemanticUNet, paper_config, tiny_config
from .masks import ConditioningTensor, encode, null_mask
from .metrics import FeatureExtractor, FeatureSet, MetricReport, fid, inception_score
from .patching import PatchRecord, Rect, extract_patches, split_region
from .regions import AnnotatedRegion, NucleiClass, load_region, save_region
from .schedule import NoiseSchedule, linear_schedule, marginal_coeffs
from .stain import StainNormalizer, StainProfile, estimate_stain_profile, normalize_to_target
from .training import Ema, PatchDataset, TrainConfig, run_phase, train_step

__all__ = [
    "AnnotatedRegion",
    "ConditioningTensor",
    "DenoiserConfig",
    "DenoiserOutput",
    "Diffusion",
    "Ema",
    "FeatureExtractor",
    "FeatureSet",
    "MetricReport",
    "NoiseSchedule",
    "NucleiClass",
    "PatchDataset",
    "PatchRecord",
    "Rect",
    "SemanticUNet",
    "StainNormalizer",
    "StainProfile",
    "TrainConfig",
    "encode",
    "estimate_stain_profile",
    "extract_patches",
    "fid",
    "guided_eps",
    "inception_score",
    "linear_schedule",
    "load_region",
    "loss_hybrid",
    "loss_simple",
    "marginal_coeffs",
    "normalize_to_target",
    "null_mask",
    "paper_config",
    "run_phase",
    "save_region",
    "split_region",
    "tiny_config",
    "train_step",
]

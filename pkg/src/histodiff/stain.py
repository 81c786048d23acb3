"""Structure-preserving stain normalization.

Stains act multiplicatively on transmitted light, so in optical-density
space an H&E image is approximately a non-negative rank-2 factorization
``OD = concentrations @ stain_matrix.T``. A region's stain appearance is
summarized by a :class:`StainProfile` (unit-norm stain color vectors plus
robust per-stain concentration maxima); normalization rescales source
concentrations to a target profile and recombines with the target's
colors, leaving tissue structure (label maps) untouched.

The factorization is a sparse non-negative dictionary fit: alternating
exact non-negative least squares over the two stain concentrations (with
an L1 penalty) and the two color vectors. Two unknowns per subproblem
makes the active-set enumeration exact and fully vectorizable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InsufficientTissueError, NumericError

OD_I0 = 255.0
# Dark-pixel floor: intensities below this are clamped before the log so
# OD stays finite and white maps to exactly zero OD.
OD_EPS0 = 1.0

DEFAULT_OD_THRESHOLD = 0.15
DEFAULT_SPARSITY_WEIGHT = 0.1
MIN_TISSUE_FRACTION = 0.05


def to_optical_density(rgb: np.ndarray) -> np.ndarray:
    """Map 8-bit RGB to optical density: ``-log(clip(I, eps0, I0) / I0)``.

    Non-negative, zero at white, monotone decreasing in intensity.
    """
    arr = np.asarray(rgb, dtype=np.float64)
    return -np.log(np.clip(arr, OD_EPS0, OD_I0) / OD_I0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_optical_density`, rounded to 8-bit."""
    intensity = OD_I0 * np.exp(-np.asarray(od, dtype=np.float64))
    return np.clip(np.rint(intensity), 0, 255).astype(np.uint8)


@dataclass
class StainProfile:
    """Stain appearance of one slide/region.

    ``stain_matrix`` is 3x2 with unit-norm non-negative columns (column 0
    hematoxylin-like, column 1 eosin-like); ``concentration_scale`` holds
    the per-stain 99th-percentile concentrations used as robust maxima.
    """

    stain_matrix: np.ndarray
    concentration_scale: np.ndarray

    def __post_init__(self) -> None:
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.concentration_scale = np.asarray(self.concentration_scale, dtype=np.float64)
        if self.stain_matrix.shape != (3, 2):
            raise DataError(f"stain_matrix must be 3x2, got {self.stain_matrix.shape}")
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise DataError(f"stain_matrix columns must be unit norm, got norms {norms}")
        if (self.stain_matrix < -1e-12).any():
            raise DataError("stain_matrix entries must be non-negative")
        if (self.concentration_scale <= 0).any():
            raise DataError(f"concentration_scale must be positive, got {self.concentration_scale}")


def _nnls_two_column(a: np.ndarray, y: np.ndarray, l1: float = 0.0) -> np.ndarray:
    """Exact solve of ``min 0.5*||y - a h||^2 + l1*sum(h)`` with ``h >= 0``.

    ``a`` is (d, 2); ``y`` is (n, d); returns (n, 2). The three support
    patterns {both, only-0, only-1} are enumerated in closed form and the
    feasible minimizer picked per row; the strictly convex interior
    solution wins outright whenever it is feasible.
    """
    gram = a.T @ a
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    if det <= 1e-15 * max(gram[0, 0] * gram[1, 1], 1e-300):
        raise NumericError("degenerate 2x2 Gram matrix in NNLS (collinear columns)")
    b = y @ a - l1  # (n, 2)

    inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[1, 0], gram[0, 0]]]) / det
    h_both = b @ inv.T
    h0_only = np.maximum(b[:, 0] / gram[0, 0], 0.0)
    h1_only = np.maximum(b[:, 1] / gram[1, 1], 0.0)

    def objective(h0: np.ndarray, h1: np.ndarray) -> np.ndarray:
        # 0.5 h^T G h - h^T (A^T y) + l1 * sum(h), constants dropped
        quad = 0.5 * (gram[0, 0] * h0**2 + 2 * gram[0, 1] * h0 * h1 + gram[1, 1] * h1**2)
        return quad - (b[:, 0] * h0 + b[:, 1] * h1)

    out = np.zeros_like(b)
    interior_ok = (h_both >= 0).all(axis=1)
    out[interior_ok] = h_both[interior_ok]
    rest = ~interior_ok
    better0 = objective(h0_only, np.zeros_like(h0_only)) <= objective(np.zeros_like(h1_only), h1_only)
    out[rest & better0, 0] = h0_only[rest & better0]
    out[rest & ~better0, 1] = h1_only[rest & ~better0]
    return out


def stain_concentrations(od_pixels: np.ndarray, stain_matrix: np.ndarray, l1: float = 0.0) -> np.ndarray:
    """Per-pixel stain concentrations for flattened OD pixels (n, 3)."""
    return _nnls_two_column(np.asarray(stain_matrix, dtype=np.float64), od_pixels, l1=l1)


def _order_columns(w: np.ndarray) -> np.ndarray:
    # Column 0 is the more blue-absorbing (hematoxylin-like) vector.
    if w[2, 0] < w[2, 1]:
        return w[:, ::-1].copy()
    return w


def _extreme_direction_init(tissue_od: np.ndarray) -> np.ndarray:
    """Initial stain vectors from the extreme angular directions of the
    tissue OD cloud in its top-2 eigenplane (deterministic)."""
    cov = np.cov(tissue_od.T)
    _, vecs = np.linalg.eigh(cov)
    basis = vecs[:, -2:]  # (3, 2), ascending eigenvalues
    proj = tissue_od @ basis
    signs = np.where(proj.mean(axis=0) < 0, -1.0, 1.0)
    basis, proj = basis * signs, proj * signs
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, 1), np.percentile(phi, 99)
    w = np.stack(
        [
            basis @ np.array([np.cos(lo), np.sin(lo)]),
            basis @ np.array([np.cos(hi), np.sin(hi)]),
        ],
        axis=1,
    )
    w = np.clip(w, 1e-6, None)
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def estimate_stain_profile(
    rgb: np.ndarray,
    sparsity_weight: float = DEFAULT_SPARSITY_WEIGHT,
    od_threshold: float = DEFAULT_OD_THRESHOLD,
    max_iter: int = 60,
    tol: float = 1e-7,
) -> StainProfile:
    """Fit a two-stain profile to an RGB image.

    Tissue pixels (OD vector norm above ``od_threshold``) are factorized as
    ``OD ~ H_conc @ W.T`` with W (3x2) unit non-negative columns and sparse
    non-negative concentrations, starting from the extreme angular
    directions of the OD cloud. Raises :class:`InsufficientTissueError`
    when fewer than 5% of pixels are tissue, and :class:`DataError` when
    the factorization is rank-deficient (effectively one stain).
    """
    od = to_optical_density(rgb).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > od_threshold]
    if len(tissue) < MIN_TISSUE_FRACTION * len(od):
        raise InsufficientTissueError(
            f"only {len(tissue)}/{len(od)} pixels above OD threshold {od_threshold}; "
            "not enough tissue to estimate a stain profile"
        )

    w = _extreme_direction_init(tissue)
    prev = w.copy()
    conc = np.zeros((len(tissue), 2))
    for _ in range(max_iter):
        try:
            conc = _nnls_two_column(w, tissue, l1=sparsity_weight)
            totals = conc.sum(axis=0)
            if (totals <= 1e-12).any():
                break  # an unused atom; caught by the rank check below
            # Dictionary update: one NNLS per OD channel over the two stains;
            # rows of the result are rows of W.
            w = _nnls_two_column(conc, tissue.T, l1=0.0)
        except NumericError:
            break  # collinear factors; caught by the rank check below
        norms = np.linalg.norm(w, axis=0)
        if (norms <= 1e-12).any():
            break
        w /= norms
        if np.abs(w - prev).max() < tol:
            break
        prev = w.copy()

    cosine = float(np.clip(w[:, 0] @ w[:, 1], -1.0, 1.0))
    angle = np.degrees(np.arccos(cosine))
    mass = conc.sum(axis=0)
    if angle < 2.0 or mass.min() < 1e-3 * mass.max():
        raise DataError(
            "rank-deficient stain factorization (single effective stain): "
            f"column angle {angle:.2f} deg, concentration mass {mass}"
        )

    w = _order_columns(w)
    conc = stain_concentrations(tissue, w, l1=0.0)
    scale = np.percentile(conc, 99, axis=0)
    if (scale <= 0).any():
        raise DataError(f"non-positive concentration scale {scale}")
    return StainProfile(stain_matrix=w, concentration_scale=scale)


def normalize_to_target(rgb: np.ndarray, source: StainProfile, target: StainProfile) -> np.ndarray:
    """Re-render ``rgb`` with the target's stain colors and dynamic range.

    Source concentrations are rescaled per stain by the ratio of robust
    maxima, recombined with the target stain matrix, and mapped back
    through the OD inverse. Only colors change; label maps are untouched.
    """
    rgb = np.asarray(rgb)
    od = to_optical_density(rgb).reshape(-1, 3)
    conc = stain_concentrations(od, source.stain_matrix)
    conc *= target.concentration_scale / source.concentration_scale
    od_out = conc @ target.stain_matrix.T
    return od_to_rgb(od_out).reshape(rgb.shape)


class StainNormalizer:
    """Fit on a target image, then transform any source image to match it."""

    def __init__(
        self,
        sparsity_weight: float = DEFAULT_SPARSITY_WEIGHT,
        od_threshold: float = DEFAULT_OD_THRESHOLD,
    ):
        self.sparsity_weight = sparsity_weight
        self.od_threshold = od_threshold
        self.target_profile: StainProfile | None = None

    def fit(self, target_rgb: np.ndarray) -> "StainNormalizer":
        self.target_profile = estimate_stain_profile(
            target_rgb, sparsity_weight=self.sparsity_weight, od_threshold=self.od_threshold
        )
        return self

    def transform(self, rgb: np.ndarray, source_profile: StainProfile | None = None) -> np.ndarray:
        if self.target_profile is None:
            raise DataError("StainNormalizer.transform called before fit")
        if source_profile is None:
            source_profile = estimate_stain_profile(
                rgb, sparsity_weight=self.sparsity_weight, od_threshold=self.od_threshold
            )
        return normalize_to_target(rgb, source_profile, self.target_profile)


def write_profiles(profiles: dict[str, StainProfile], path: str | Path) -> None:
    """Serialize profiles as a plain-text numeric table (one row per region)."""
    path = Path(path)
    lines = ["# source_id  stain_matrix (row-major 3x2)  concentration_scale (2)"]
    for sid in sorted(profiles):
        p = profiles[sid]
        nums = list(p.stain_matrix.reshape(-1)) + list(p.concentration_scale)
        lines.append(sid + "\t" + "\t".join(f"{v:.10f}" for v in nums))
    path.write_text("\n".join(lines) + "\n")


def read_profiles(path: str | Path) -> dict[str, StainProfile]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"stain profile table not found: {path}")
    out: dict[str, StainProfile] = {}
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        vals = np.array([float(v) for v in parts[1:]])
        if vals.size != 8:
            raise DataError(f"bad profile row for {parts[0]!r}: expected 8 numbers")
        out[parts[0]] = StainProfile(
            stain_matrix=vals[:6].reshape(3, 2), concentration_scale=vals[6:]
        )
    return out

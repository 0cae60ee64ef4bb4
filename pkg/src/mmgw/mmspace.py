"""Discrete metric measure spaces, labelled variants and phi-divergences.

A space is a symmetric nonnegative dissimilarity matrix together with a
nonnegative weight vector.  Weights are stored as given and never silently
renormalized: unbalanced problems must see true masses.  The triangle
inequality is not enforced anywhere (pseudometric inputs are fine).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MmSpace",
    "LabelSpace",
    "LabelledMmSpace",
    "PenaltyKind",
    "MarginalPenalty",
    "BALANCED_EQ_TOL",
    "kl_divergence",
    "log_density_integral",
    "csiszar_divergence",
    "tensor_divergence",
    "kl_pair_factorized",
    "kl_factorization_check",
    "image_to_mmspace",
    "sphere_grid_mmspace",
]

# Elementwise tolerance under which two weight vectors count as equal for the
# balanced (indicator) divergence; absorbs file round-trip noise.
BALANCED_EQ_TOL = 1e-12

_SYM_TOL = 1e-9


def _as_weights(v, name="weights"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {v.shape}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite and nonnegative")
    return v


def _check_dist(dist, what="dist"):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"{what} must be square, got shape {dist.shape}")
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise ValueError(f"{what} must be finite and nonnegative")
    if dist.shape[0] and np.max(np.abs(dist - dist.T)) > _SYM_TOL:
        raise ValueError(f"{what} must be symmetric")
    if dist.shape[0] and np.max(np.abs(np.diagonal(dist))) > _SYM_TOL:
        raise ValueError(f"{what} must have a zero diagonal")
    return dist


@dataclass(frozen=True)
class MmSpace:
    """Discrete metric measure space: pairwise distances plus point masses."""

    dist: np.ndarray
    weights: np.ndarray
    name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "dist", _check_dist(self.dist))
        object.__setattr__(self, "weights", _as_weights(self.weights))
        if self.weights.shape[0] != self.dist.shape[0]:
            raise ValueError(
                f"weights length {self.weights.shape[0]} does not match "
                f"dist size {self.dist.shape[0]}"
            )
        self.dist.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class LabelSpace:
    """Finite label set with an explicit metric table."""

    dist: np.ndarray
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        object.__setattr__(self, "dist", _check_dist(self.dist, "label dist"))
        if self.names is not None and len(self.names) != self.dist.shape[0]:
            raise ValueError("label names do not match label metric size")
        self.dist.setflags(write=False)

    @property
    def n(self) -> int:
        return self.dist.shape[0]


@dataclass(frozen=True)
class LabelledMmSpace:
    """MmSpace whose points carry labels from a shared :class:`LabelSpace`."""

    base: MmSpace
    label_of: np.ndarray
    label_space: LabelSpace

    def __post_init__(self):
        lab = np.asarray(self.label_of, dtype=np.intp)
        if lab.shape != (self.base.n,):
            raise ValueError("label_of must have one entry per point")
        if lab.size and (lab.min() < 0 or lab.max() >= self.label_space.n):
            raise ValueError("label index out of range")
        object.__setattr__(self, "label_of", lab)
        lab.setflags(write=False)

    @property
    def dist(self) -> np.ndarray:
        return self.base.dist

    @property
    def weights(self) -> np.ndarray:
        return self.base.weights

    @property
    def n(self) -> int:
        return self.base.n


class PenaltyKind(Enum):
    BALANCED = "balanced"
    FREE = "free"
    SCALED_KL = "scaled_kl"


@dataclass(frozen=True)
class MarginalPenalty:
    """Marginal constraint mode: exact, absent, or KL with weight ``lam``."""

    kind: PenaltyKind
    lam: float = 0.0

    def __post_init__(self):
        if self.kind is PenaltyKind.SCALED_KL and not self.lam > 0:
            raise ValueError("scaled-KL penalty needs lam > 0")

    @staticmethod
    def balanced() -> "MarginalPenalty":
        return MarginalPenalty(PenaltyKind.BALANCED)

    @staticmethod
    def free() -> "MarginalPenalty":
        return MarginalPenalty(PenaltyKind.FREE)

    @staticmethod
    def scaled_kl(lam: float) -> "MarginalPenalty":
        return MarginalPenalty(PenaltyKind.SCALED_KL, float(lam))

    def scaled(self, factor: float) -> "MarginalPenalty":
        """Penalty with its KL weight multiplied by ``factor`` (others unchanged)."""
        if self.kind is PenaltyKind.SCALED_KL:
            return MarginalPenalty.scaled_kl(self.lam * factor)
        return self


def _check_pair(mu, nu):
    mu = _as_weights(mu, "mu")
    nu = _as_weights(nu, "nu")
    if mu.shape != nu.shape:
        raise ValueError(f"length mismatch: {mu.shape[0]} vs {nu.shape[0]}")
    return mu, nu


def log_density_integral(mu, nu) -> float:
    """int log(dmu/dnu) dmu, i.e. sum mu*log(mu/nu); +inf if mu is not << nu."""
    mu, nu = _check_pair(mu, nu)
    pos = mu > 0
    if np.any(nu[pos] == 0):
        return math.inf
    m, n = mu[pos], nu[pos]
    return float(np.sum(m * np.log(m / n)))


def kl_divergence(mu, nu) -> float:
    """KL(mu, nu) = sum mu*log(mu/nu) - |mu| + |nu| with 0 log 0 = 0."""
    mu, nu = _check_pair(mu, nu)
    integral = log_density_integral(mu, nu)
    if math.isinf(integral):
        return math.inf
    return integral - float(mu.sum()) + float(nu.sum())


def weights_equal(mu, nu, tol: float = BALANCED_EQ_TOL) -> bool:
    mu, nu = _check_pair(mu, nu)
    scale = max(1.0, float(nu.sum()))
    return bool(np.max(np.abs(mu - nu), initial=0.0) <= tol * scale)


def csiszar_divergence(penalty: MarginalPenalty, mu, nu, balanced_tol=None) -> float:
    """Divergence of ``mu`` from ``nu`` under the given marginal penalty.

    ``balanced_tol`` overrides the equality tolerance of the balanced
    (indicator) case; ``math.inf`` treats any finite pair as feasible, which
    is the convention used when evaluating objectives along solver iterates.
    """
    if penalty.kind is PenaltyKind.FREE:
        _check_pair(mu, nu)
        return 0.0
    if penalty.kind is PenaltyKind.BALANCED:
        tol = BALANCED_EQ_TOL if balanced_tol is None else balanced_tol
        if tol == math.inf:
            _check_pair(mu, nu)
            return 0.0
        return 0.0 if weights_equal(mu, nu, tol) else math.inf
    return penalty.lam * kl_divergence(mu, nu)


def tensor_divergence(penalty: MarginalPenalty, mu, nu, balanced_tol=None) -> float:
    """D_phi(mu x mu, nu x nu) without materializing the product measure.

    The KL case uses the exact product factorization
    ``2 |mu| KL(mu, nu) + (|mu| - |nu|)^2``; balanced and free cases factor
    to their plain counterparts.
    """
    if penalty.kind is PenaltyKind.FREE:
        _check_pair(mu, nu)
        return 0.0
    if penalty.kind is PenaltyKind.BALANCED:
        return csiszar_divergence(penalty, mu, nu, balanced_tol)
    mu, nu = _check_pair(mu, nu)
    kl = kl_divergence(mu, nu)
    if math.isinf(kl):
        return math.inf
    mm, mn = float(mu.sum()), float(nu.sum())
    return penalty.lam * (2.0 * mm * kl + (mm - mn) ** 2)


def kl_pair_factorized(alpha1, alpha2, alpha3) -> float:
    """KL(alpha1 x alpha2, alpha3 x alpha3) via the product factorization."""
    k1 = kl_divergence(alpha1, alpha3)
    k2 = kl_divergence(alpha2, alpha3)
    if math.isinf(k1) or math.isinf(k2):
        return math.inf
    m1 = float(np.asarray(alpha1, dtype=float).sum())
    m2 = float(np.asarray(alpha2, dtype=float).sum())
    m3 = float(np.asarray(alpha3, dtype=float).sum())
    return m1 * k2 + m2 * k1 + (m1 - m3) * (m2 - m3)


def kl_factorization_check(alpha1, alpha2, alpha3) -> float:
    """Residual between dense KL on the product measure and its factorization.

    Self-test utility: the dense side materializes the outer products, the
    factorized side never does.  Returns ``|dense - factorized|``.
    """
    a1 = _as_weights(alpha1, "alpha1")
    a2 = _as_weights(alpha2, "alpha2")
    a3 = _as_weights(alpha3, "alpha3")
    if a1.shape != a3.shape or a2.shape != a3.shape:
        raise ValueError("alpha vectors must share one length")
    dense = kl_divergence(np.outer(a1, a2).ravel(), np.outer(a3, a3).ravel())
    fact = kl_pair_factorized(a1, a2, a3)
    if math.isinf(dense) or math.isinf(fact):
        raise ValueError("KL factorization check needs finite divergences")
    return abs(dense - fact)


def image_to_mmspace(
    pixels,
    threshold: float = 0.0,
    normalize: str = "support",
    name: Optional[str] = None,
) -> MmSpace:
    """Turn a grayscale image into an mm-space on its bright pixel centers.

    Pixels with value > ``threshold`` form the support.  Distances are
    Euclidean between pixel centers on the grid scaled into the unit square,
    divided by the maximum pairwise distance of the support
    (``normalize="support"``, default) or of the full grid
    (``normalize="grid"``).  Weights are the pixel values normalized to unit
    total mass.
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-d grayscale array")
    if np.any(img < 0):
        raise ValueError("pixel values must be nonnegative")
    rows, cols = np.nonzero(img > threshold)
    if rows.size == 0:
        raise ValueError("no pixel above threshold: empty support")
    h, w = img.shape
    scale = float(max(h, w))
    pts = np.stack([(cols + 0.5) / scale, (rows + 0.5) / scale], axis=1)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    if normalize == "support":
        dmax = float(dist.max())
    elif normalize == "grid":
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        gpts = np.stack([(gx.ravel() + 0.5) / scale, (gy.ravel() + 0.5) / scale], axis=1)
        corner = gpts[[0]], gpts[[-1]]
        dmax = float(np.linalg.norm(corner[1] - corner[0]))
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    if dmax > 0:
        dist = dist / dmax
    np.fill_diagonal(dist, 0.0)
    vals = img[rows, cols]
    weights = vals / vals.sum()
    return MmSpace(dist, weights, name=name)


def image_support_indices(pixels, threshold: float = 0.0):
    """(row, col) indices of the support pixels, in the order used above."""
    img = np.asarray(pixels, dtype=np.float64)
    return np.nonzero(img > threshold)


def sphere_grid_mmspace(
    n_azimuth: int,
    n_polar: int,
    area_weights: bool = False,
    name: Optional[str] = None,
) -> MmSpace:
    """Equiangular grid on the unit sphere with normalized great-circle metric.

    Grid points are cell centers of an ``n_azimuth x n_polar`` grid over
    ``[0, 2*pi] x [0, pi]``.  Distances are great-circle arcs divided by pi,
    so antipodal points are at distance 1.  Weights are uniform by default;
    with ``area_weights=True`` each point carries the spherical area element
    ``sin(polar)`` so masses shrink toward the poles.
    """
    if n_azimuth < 2 or n_polar < 2:
        raise ValueError("need at least a 2 x 2 grid")
    az = (np.arange(n_azimuth) + 0.5) * (2.0 * np.pi / n_azimuth)
    po = (np.arange(n_polar) + 0.5) * (np.pi / n_polar)
    azg, pog = np.meshgrid(az, po, indexing="ij")
    azf, pof = azg.ravel(), pog.ravel()
    xyz = np.stack(
        [np.sin(pof) * np.cos(azf), np.sin(pof) * np.sin(azf), np.cos(pof)], axis=1
    )
    dots = np.clip(xyz @ xyz.T, -1.0, 1.0)
    dist = np.arccos(dots) / np.pi
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    n = n_azimuth * n_polar
    if area_weights:
        w = np.sin(pof)
        weights = w / w.sum()
    else:
        weights = np.full(n, 1.0 / n)
    return MmSpace(dist, weights, name=name)


def sphere_grid_points(n_azimuth: int, n_polar: int) -> np.ndarray:
    """(azimuth, polar) coordinates matching :func:`sphere_grid_mmspace` order."""
    az = (np.arange(n_azimuth) + 0.5) * (2.0 * np.pi / n_azimuth)
    po = (np.arange(n_polar) + 0.5) * (np.pi / n_polar)
    azg, pog = np.meshgrid(az, po, indexing="ij")
    return np.stack([azg.ravel(), pog.ravel()], axis=1)

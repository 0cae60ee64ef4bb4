"""Transfer-operator estimation from chain UMGW plans.

The operator between two adjacent snapshots is the source-marginal
row-normalization of their pairwise plan; rows without source mass are
zero (the 0^{-1} := 0 convention).  Operators compose along the chain and
propagate densities forward; mass is not conserved for unbalanced plans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .mmspace import MmSpace, image_to_mmspace

__all__ = [
    "TransferOperator",
    "transfer_operator",
    "compose",
    "propagate",
    "SynthParticles",
    "synth_particles",
    "ZERO_ROW_MASS",
]

# A source point below this mass counts as truly empty and yields a zero row.
ZERO_ROW_MASS = 1e-300


@dataclass(frozen=True)
class TransferOperator:
    """Linear map sending densities on the source snapshot to the target.

    ``matrix`` has shape (n_target, n_source); its transpose is
    row-stochastic on the support of the source marginal.
    """

    matrix: np.ndarray
    source_index: int
    target_index: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or np.any(m < 0):
            raise ValueError("operator matrix must be a nonnegative 2-d array")
        object.__setattr__(self, "matrix", m)

    @property
    def kt(self) -> np.ndarray:
        """Row-stochastic transpose, shape (n_source, n_target)."""
        return self.matrix.T


def transfer_operator(factors, i: int, j: int) -> TransferOperator:
    """Operator K_{i->j} from the (i, j) pairwise marginal of the plan.

    ``K^T = diag(marginal_i)^{-1} plan_ij`` with zero rows where the source
    marginal vanishes.  (i, j) must be adjacent on the cost tree; compose
    operators for longer hops.
    """
    pair = factors.edge_marginal(i, j)
    marg = factors.node_marginal(i)
    inv = np.where(marg > ZERO_ROW_MASS, 1.0 / np.maximum(marg, ZERO_ROW_MASS), 0.0)
    kt = inv[:, None] * pair
    return TransferOperator(kt.T, source_index=i, target_index=j)


def compose(ops: Sequence[TransferOperator]) -> TransferOperator:
    """Chain composition: K_{1->n} = K_{n-1->n} ... K_{1->2}."""
    if not ops:
        raise ValueError("need at least one operator")
    for a, b in zip(ops, ops[1:]):
        if a.target_index != b.source_index:
            raise ValueError(
                f"cannot compose {a.source_index}->{a.target_index} with "
                f"{b.source_index}->{b.target_index}"
            )
    matrix = ops[0].matrix
    for op in ops[1:]:
        matrix = op.matrix @ matrix
    return TransferOperator(matrix, ops[0].source_index, ops[-1].target_index)


def propagate(op: TransferOperator, density) -> np.ndarray:
    """Push a density through the operator; total mass may drift."""
    d = np.asarray(density, dtype=np.float64)
    if d.shape[0] != op.matrix.shape[1]:
        raise ValueError("density length does not match the operator source")
    return op.matrix @ d


@dataclass
class SynthParticles:
    """Synthetic rotating-particle snapshots plus ground truth."""

    spaces: List[MmSpace]
    noisy_images: List[np.ndarray]
    clean_images: List[np.ndarray]
    clean_densities: List[np.ndarray]
    support_rows: List[np.ndarray]
    support_cols: List[np.ndarray]
    true_positions: np.ndarray  # (n_snapshots, n_coherent, 2)
    true_cells: np.ndarray  # (n_snapshots, n_coherent) flat grid cells
    true_support_idx: np.ndarray  # (n_snapshots, n_coherent) support indices
    grid_size: int

    def cell_rowcol(self, snapshot: int, particle: int) -> Tuple[int, int]:
        cell = self.true_cells[snapshot, particle]
        return divmod(int(cell), self.grid_size)


def _deposit(points: np.ndarray, grid_size: int, halfwidth: float) -> np.ndarray:
    img = np.zeros((grid_size, grid_size))
    idx = _cells_of(points, grid_size, halfwidth)
    for r, c in idx:
        img[r, c] += 1.0
    return img


def _cells_of(points: np.ndarray, grid_size: int, halfwidth: float) -> np.ndarray:
    scaled = (points + halfwidth) / (2.0 * halfwidth) * grid_size
    idx = np.clip(np.floor(scaled).astype(int), 0, grid_size - 1)
    # rows index the second coordinate so images render y-up consistently
    return np.stack([idx[:, 1], idx[:, 0]], axis=1)


def synth_particles(
    n_coherent: int,
    n_noise: int,
    n_snapshots: int,
    rotation_per_step: float = 0.35,
    drift: Tuple[float, float] = (0.0, 0.0),
    grid_size: int = 32,
    blur_sigma: float = 0.6,
    seed: int = 0,
    threshold: float = 1e-5,
    halfwidth: float = 4.0,
) -> SynthParticles:
    """Seeded snapshots of a rigidly rotating particle cloud plus noise.

    Coherent particles are standard Gaussian samples rotated by
    ``rotation_per_step`` per snapshot and drifted; each snapshot adds
    fresh uniform noise particles.  Unit deposits are Gaussian filtered
    (sigma in pixels) and thresholded; the resulting gray values, unit
    normalized, are the snapshot measures.  The PCG64 stream of
    ``numpy.random.default_rng(seed)`` makes every fixture bit-reproducible.
    """
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n_coherent, 2))
    drift = np.asarray(drift, dtype=np.float64)
    spaces, noisy_images, clean_images = [], [], []
    clean_densities, support_rows, support_cols = [], [], []
    true_positions = np.zeros((n_snapshots, n_coherent, 2))
    true_cells = np.zeros((n_snapshots, n_coherent), dtype=int)
    true_support_idx = np.zeros((n_snapshots, n_coherent), dtype=int)
    for t in range(n_snapshots):
        ang = t * rotation_per_step
        rot = np.array([[math.cos(ang), -math.sin(ang)],
                        [math.sin(ang), math.cos(ang)]])
        pos = base @ rot.T + t * drift
        true_positions[t] = pos
        clean = _deposit(pos, grid_size, halfwidth)
        noisy = clean.copy()
        if n_noise:
            noise_pos = rng.uniform(-halfwidth, halfwidth, size=(n_noise, 2))
            noisy = noisy + _deposit(noise_pos, grid_size, halfwidth)
        clean = gaussian_filter(clean, sigma=blur_sigma)
        noisy = gaussian_filter(noisy, sigma=blur_sigma)
        noisy = np.where(noisy > threshold, noisy, 0.0)
        space = image_to_mmspace(noisy, threshold=0.0, name=f"snapshot-{t}")
        rows, cols = np.nonzero(noisy > 0.0)
        flat = rows * grid_size + cols
        lookup = {f: k for k, f in enumerate(flat)}
        cvals = clean[rows, cols]
        total = cvals.sum()
        clean_density = cvals / total if total > 0 else cvals
        cells = _cells_of(pos, grid_size, halfwidth)
        for p in range(n_coherent):
            cell = cells[p, 0] * grid_size + cells[p, 1]
            true_cells[t, p] = cell
            true_support_idx[t, p] = lookup[cell]
        spaces.append(space)
        noisy_images.append(noisy)
        clean_images.append(clean)
        clean_densities.append(clean_density)
        support_rows.append(rows)
        support_cols.append(cols)
    return SynthParticles(
        spaces=spaces,
        noisy_images=noisy_images,
        clean_images=clean_images,
        clean_densities=clean_densities,
        support_rows=support_rows,
        support_cols=support_cols,
        true_positions=true_positions,
        true_cells=true_cells,
        true_support_idx=true_support_idx,
        grid_size=grid_size,
    )

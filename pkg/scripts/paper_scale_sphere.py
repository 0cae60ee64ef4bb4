"""Progressive interpolation between two sphere measures on an 80x80 grid.

Long-running; excluded from the timed test suite.  Writes one measure CSV
and one PNG render (azimuth x polar) per interpolation weight.
"""

import sys
from pathlib import Path

import numpy as np

from mmgw.barycenter import BarycenterSpec, fixed_support_barycenter
from mmgw.fileio import write_gray_png, write_matrix_csv
from mmgw.mmspace import MarginalPenalty, MmSpace, sphere_grid_mmspace, sphere_grid_points
from mmgw.sinkhorn import SinkhornConfig


def blob(grid, xyz, center_az, center_po, kappa=40.0, thresh=1e-4):
    c = np.array([
        np.sin(center_po) * np.cos(center_az),
        np.sin(center_po) * np.sin(center_az),
        np.cos(center_po),
    ])
    w = np.exp(kappa * (xyz @ c - 1.0))
    keep = np.nonzero(w > thresh)[0]
    wk = w[keep] / w[keep].sum()
    return MmSpace(grid.dist[np.ix_(keep, keep)], wk), keep


def main(outdir="paper_runs/sphere", n=80):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    grid = sphere_grid_mmspace(n, n, area_weights=True)
    pts = sphere_grid_points(n, n)
    xyz = np.stack([
        np.sin(pts[:, 1]) * np.cos(pts[:, 0]),
        np.sin(pts[:, 1]) * np.sin(pts[:, 0]),
        np.cos(pts[:, 1]),
    ], axis=1)
    b1, k1 = blob(grid, xyz, 2.4, 1.1)
    b2, k2 = blob(grid, xyz, 4.0, 1.9)
    bal = MarginalPenalty.balanced()
    cfg = SinkhornConfig(eps=3e-3, max_iter=4000, tolerance=1e-7)
    for rho in (0.8, 0.6, 0.4, 0.2):
        prior = np.zeros(grid.n)
        prior[k1] += rho * b1.weights
        prior[k2] += (1.0 - rho) * b2.weights
        prior = (prior + 1e-9) / (prior + 1e-9).sum()
        spec = BarycenterSpec((b1, b2), np.array([rho, 1.0 - rho]),
                              MmSpace(grid.dist, prior), 3e-3, (bal, bal))
        bary, res = fixed_support_barycenter(spec, outer_iter=20, inner_cfg=cfg)
        tag = f"rho_{rho:.1f}"
        write_matrix_csv(out / f"measure_{tag}.csv", bary.weights)
        write_gray_png(out / f"interp_{tag}.png", bary.weights.reshape(n, n))
        print(f"{tag}: iterations {res.iterations} converged {res.converged}")


if __name__ == "__main__":
    main(*sys.argv[1:])

"""Command-line front-end: ingestion, solver orchestration, artifact emission.

Subcommands: ``umgw``, ``barycenter``, ``transfer``, ``check``, ``synth``.
Every run writes a ``resolved_config.json`` into the output directory so it
can be reproduced bit-identically from that file alone (``--config``).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import oracle
from .barycenter import (
    BarycenterSpec,
    barycentric_loss,
    essential_support,
    fixed_support_barycenter,
    fused_fixed_support_barycenter,
)
from .fileio import (
    ParseError,
    read_image,
    read_mmspace_dir,
    write_gray_png,
    write_matrix_csv,
    write_mmspace_dir,
    write_pgm,
    write_rgb_png,
)
from .mmspace import (
    LabelledMmSpace,
    LabelSpace,
    MarginalPenalty,
    MmSpace,
    image_to_mmspace,
    kl_factorization_check,
    sphere_grid_mmspace,
)
from .sinkhorn import ReferenceMeasure, SinkhornConfig
from .shapes import disk_image, heart_image, spade_image
from .transfer import compose, propagate, synth_particles, transfer_operator
from .treecost import CostTree, FusedConfig, chain_tree, mcnd_quadratic_form
from .umgw import (
    UmgwProblem,
    init_plan_factors,
    objective_Fbi,
    solve_umgw,
    tightness_report,
)

LABEL_PALETTE = np.array(
    [
        [0.12, 0.37, 0.81],  # blue
        [0.84, 0.15, 0.16],  # red
        [0.17, 0.63, 0.17],  # green
        [1.00, 0.60, 0.05],  # orange
        [0.58, 0.40, 0.74],
        [0.55, 0.34, 0.29],
        [0.89, 0.47, 0.76],
        [0.50, 0.50, 0.50],
    ]
)


def _outdir(ns) -> Path:
    out = Path(ns["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge config-file values under explicit flags, then under defaults."""
    ns = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    config = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    resolved = dict(defaults)
    resolved.update({k: v for k, v in config.items() if k in defaults})
    resolved.update({k: v for k, v in ns.items() if v is not None})
    return resolved


def _load_input(path: str, threshold: float, normalize: str = "support"):
    p = Path(path)
    if p.is_dir():
        return read_mmspace_dir(p)
    if p.suffix.lower() in (".pgm", ".png"):
        return image_to_mmspace(read_image(p), threshold=threshold,
                                normalize=normalize, name=p.stem)
    raise ParseError(f"{p}: expected a space directory or a .pgm/.png image")


def _parse_penalties(spec: str, n: int):
    toks = [t.strip() for t in spec.split(",")]
    if len(toks) == 1:
        toks = toks * n
    if len(toks) != n:
        raise ValueError(f"expected 1 or {n} penalty tokens, got {len(toks)}")
    out = []
    for t in toks:
        if t == "balanced":
            out.append(MarginalPenalty.balanced())
        elif t == "free":
            out.append(MarginalPenalty.free())
        elif t.startswith("kl:"):
            out.append(MarginalPenalty.scaled_kl(float(t[3:])))
        else:
            raise ValueError(f"unknown penalty {t!r} (balanced | free | kl:LAMBDA)")
    return out


def _penalty_token(pen: MarginalPenalty) -> str:
    from .mmspace import PenaltyKind

    if pen.kind is PenaltyKind.BALANCED:
        return "balanced"
    if pen.kind is PenaltyKind.FREE:
        return "free"
    return f"kl:{pen.lam:g}"


def _reference_for(kind: str, spaces) -> ReferenceMeasure:
    if kind == "counting":
        return ReferenceMeasure.counting([sp.n for sp in spaces])
    if kind == "product":
        return ReferenceMeasure.product_of_inputs([sp.weights for sp in spaces])
    raise ValueError(f"unknown reference {kind!r} (counting | product)")


def _dump_result(out: Path, problem: UmgwProblem, result) -> None:
    np.savetxt(out / "objective_trace.csv", np.asarray(result.objective_trace),
               fmt="%.17g", header="fbi_per_half_step", comments="")
    for i in range(problem.tree.n_nodes):
        np.savetxt(out / f"node_marginal_{i}.csv", result.pi.node_marginal(i),
                   fmt="%.17g")
    for i, j, _ in problem.tree.edges:
        write_matrix_csv(out / f"edge_marginal_{i}_{j}.csv",
                         result.pi.edge_marginal(i, j))
    rep = tightness_report(problem, result)
    _write_json(out / "tightness.json", {
        "gap_pi": rep.gap_pi,
        "gap_gamma": rep.gap_gamma,
        "fbi": rep.fbi,
        "applicable": rep.applicable,
    })
    _write_json(out / "metadata.json", {
        "tree": json.loads(problem.tree.to_json()),
        "eps": problem.eps,
        "penalties": [_penalty_token(p) for p in problem.penalties],
        "sizes": list(problem.sizes),
        "iterations": result.iterations,
        "converged": result.converged,
        "plan_mass": result.pi.plan_mass(),
        "marginal_gap": result.marginal_gap,
        "final_objective": result.objective_trace[-1],
    })


# ---------------------------------------------------------------- umgw ----

UMGW_DEFAULTS = dict(
    inputs=None, tree="chain", penalties="balanced", eps=1e-3,
    reference="counting", threshold=0.0, normalize="support", outer_iter=50,
    inner_iter=2000, inner_tol=1e-7, oracle=False, out="umgw_out", seed=0,
)


def cmd_umgw(args) -> int:
    ns = _resolve(args, UMGW_DEFAULTS)
    if not ns["inputs"]:
        print("umgw: --inputs is required", file=sys.stderr)
        return 2
    spaces = [_load_input(p, ns["threshold"], ns["normalize"]) for p in ns["inputs"]]
    sizes = [sp.n for sp in spaces]
    if ns["tree"] == "chain":
        tree = chain_tree(sizes)
    else:
        tree = CostTree.from_json(Path(ns["tree"]).read_text(), n_nodes=len(sizes))
    penalties = _parse_penalties(ns["penalties"], len(spaces))
    reference = _reference_for(ns["reference"], spaces)
    problem = UmgwProblem(spaces, tree, penalties, ns["eps"], reference=reference)
    cfg = SinkhornConfig(eps=ns["eps"], max_iter=ns["inner_iter"],
                         tolerance=ns["inner_tol"])
    result = solve_umgw(problem, outer_iter=ns["outer_iter"], inner_cfg=cfg)
    out = _outdir(ns)
    _write_json(out / "resolved_config.json", ns)
    _dump_result(out, problem, result)
    if ns["oracle"]:
        dpi, dga, dtrace = oracle.dense_umgw(
            problem, outer_iter=ns["outer_iter"], inner_cfg=cfg
        )
        delta_plan = float(np.max(np.abs(result.pi.dense_tensor() - dpi.tensor)))
        delta_obj = abs(result.objective_trace[-1] - dtrace[-1])
        _write_json(out / "oracle_delta.json", {
            "max_plan_delta": delta_plan,
            "objective_delta": delta_obj,
            "oracle_objective": dtrace[-1],
        })
    print(f"umgw: wrote {out} (objective {result.objective_trace[-1]:.6g}, "
          f"converged={result.converged})")
    return 0


# ---------------------------------------------------------- barycenter ----

BARY_DEFAULTS = dict(
    inputs=None, support=None, support_grid=None, sphere_grid=None, rho=None,
    penalties="balanced", rho_scale_kl=True, eps=1e-3, reference="counting",
    threshold=0.0, normalize="grid", fused_beta=None, label_exponent=2.0,
    support_labels=None,
    product_labels=False, hub_prior="uniform", outer_iter=50, inner_iter=2000,
    inner_tol=1e-7, loss_every=0, out="barycenter_out", seed=0,
)


def _build_support(ns, inputs):
    # grid supports share the inputs' normalization so shapes embed
    # isometrically into the hub
    if ns["support"]:
        sp = read_mmspace_dir(ns["support"])
        base = sp.base if isinstance(sp, LabelledMmSpace) else sp
        return base, None
    if ns["support_grid"]:
        g = int(ns["support_grid"])
        return image_to_mmspace(np.ones((g, g)), threshold=0.0,
                                normalize=ns["normalize"], name=f"grid{g}"), (g, g)
    if ns["sphere_grid"]:
        g = int(ns["sphere_grid"])
        return sphere_grid_mmspace(g, g), (g, g)
    raise ValueError("need --support DIR, --support-grid N or --sphere-grid N")


def _product_label_support(support: MmSpace, label_space: LabelSpace):
    """Replicate every support point once per label (hub = Y x A)."""
    m = label_space.n
    n = support.n
    dist = np.tile(support.dist, (m, m))
    weights = np.tile(support.weights, m) / m
    labels = np.repeat(np.arange(m), n)
    return MmSpace(dist, weights, name="support-x-labels"), labels


def cmd_barycenter(args) -> int:
    ns = _resolve(args, BARY_DEFAULTS)
    if not ns["inputs"]:
        print("barycenter: --inputs is required", file=sys.stderr)
        return 2
    inputs = [_load_input(p, ns["threshold"], ns["normalize"]) for p in ns["inputs"]]
    n = len(inputs)
    rho = np.full(n, 1.0 / n) if ns["rho"] is None else np.asarray(
        [float(r) for r in ns["rho"]]
    )
    if abs(rho.sum() - 1.0) > 1e-9:
        print(f"barycenter: rho must sum to 1 (got {rho.sum()})", file=sys.stderr)
        return 2
    support, grid_shape = _build_support(ns, inputs)
    penalties = _parse_penalties(ns["penalties"], n)
    if ns["rho_scale_kl"]:
        penalties = [p.scaled(rho[i]) for i, p in enumerate(penalties)]
    fused = None
    support_labels = None
    if ns["fused_beta"] is not None:
        fused = FusedConfig(float(ns["fused_beta"]), ns["label_exponent"])
        if not all(isinstance(sp, LabelledMmSpace) for sp in inputs):
            print("barycenter: fused mode needs labelled inputs", file=sys.stderr)
            return 2
        if ns["product_labels"]:
            support, support_labels = _product_label_support(
                support, inputs[0].label_space
            )
            grid_shape = None
        elif ns["support_labels"]:
            support_labels = np.loadtxt(ns["support_labels"], dtype=int, ndmin=1)
        else:
            print("barycenter: fused mode needs --support-labels or --product-labels",
                  file=sys.stderr)
            return 2
    if ns["hub_prior"] == "mixture":
        bases = [sp.base if isinstance(sp, LabelledMmSpace) else sp for sp in inputs]
        if any(b.n != support.n for b in bases):
            print("barycenter: mixture prior needs inputs on the support grid",
                  file=sys.stderr)
            return 2
        prior = sum(rho[i] * bases[i].weights / bases[i].total_mass
                    for i in range(n))
        support = MmSpace(support.dist, prior, name=support.name)
    spec = BarycenterSpec(
        inputs=inputs,
        rho=rho,
        support=support,
        eps=ns["eps"],
        input_penalties=penalties,
        support_labels=support_labels,
    )
    cfg = SinkhornConfig(eps=ns["eps"], max_iter=ns["inner_iter"],
                         tolerance=ns["inner_tol"])
    reference = _reference_for(ns["reference"], list(inputs) + [support])
    out = _outdir(ns)
    _write_json(out / "resolved_config.json", ns)
    loss_rows = []
    if ns["loss_every"] and fused is None:
        from .umgw import UmgwResult  # stepwise loop shares the spec problem

        from .barycenter import _build_problem

        problem = _build_problem(spec, None, reference)
        state = None
        t0 = time.monotonic()
        result = None
        hub = problem.tree.n_nodes - 1
        done = 0
        while done < ns["outer_iter"]:
            step = min(ns["loss_every"], ns["outer_iter"] - done)
            result = solve_umgw(problem, outer_iter=step, inner_cfg=cfg, init=state)
            state = (result.pi, result.gamma)
            done += result.iterations
            bary_now = MmSpace(spec.support.dist, result.pi.node_marginal(hub))
            loss = barycentric_loss(
                [sp.base if isinstance(sp, LabelledMmSpace) else sp for sp in inputs],
                bary_now, ns["eps"], penalties=penalties, inner_cfg=cfg,
            )
            loss_rows.append((done, time.monotonic() - t0, loss,
                              result.objective_trace[-1]))
            if result.converged:
                break
        bary = MmSpace(spec.support.dist, result.pi.node_marginal(hub),
                       name="barycenter")
    elif fused is None:
        bary, result = fixed_support_barycenter(
            spec, outer_iter=ns["outer_iter"], inner_cfg=cfg, reference=reference
        )
    else:
        bary, result = fused_fixed_support_barycenter(
            spec, fused, outer_iter=ns["outer_iter"], inner_cfg=cfg,
            reference=reference,
        )
    base = bary.base if isinstance(bary, LabelledMmSpace) else bary
    np.savetxt(out / "barycenter_measure.csv", base.weights, fmt="%.17g")
    write_mmspace_dir(out / "barycenter_space", bary)
    if grid_shape is not None:
        img = base.weights.reshape(grid_shape)
        write_pgm(out / "barycenter.pgm", img)
        write_gray_png(out / "barycenter.png", img)
    if loss_rows:
        with open(out / "loss_curve.csv", "w", encoding="utf-8") as fh:
            fh.write("outer_iter,seconds,barycentric_loss,fbi\n")
            for row in loss_rows:
                fh.write(",".join(repr(v) for v in row) + "\n")
    if fused is not None:
        np.savetxt(out / "barycenter_labels.csv", support_labels, fmt="%d")
        _write_fused_render(out, inputs, result, support_labels, grid_shape)
    ess = essential_support(base.weights)
    _write_json(out / "metadata.json", {
        "rho": list(map(float, rho)),
        "eps": ns["eps"],
        "penalties": [_penalty_token(p) for p in penalties],
        "essential_support_count": int(ess.size),
        "iterations": result.iterations,
        "converged": result.converged,
        "final_objective": result.objective_trace[-1],
        "barycenter_mass": float(base.weights.sum()),
    })
    print(f"barycenter: wrote {out} (essential support {ess.size}, "
          f"converged={result.converged})")
    return 0


def _write_fused_render(out, inputs, result, support_labels, grid_shape):
    """Color render: per hub point, mass-weighted average of incoming label colors."""
    hub = result.pi.tree.n_nodes - 1
    m_hub = result.pi.node_marginal(hub)
    colors = np.zeros((m_hub.shape[0], 3))
    total = np.zeros(m_hub.shape[0])
    for i, sp in enumerate(inputs):
        pair = result.pi.edge_marginal(i, hub)
        pal = LABEL_PALETTE[np.asarray(sp.label_of) % len(LABEL_PALETTE)]
        colors += pair.T @ pal
        total += pair.sum(axis=0)
    pos = total > 0
    colors[pos] /= total[pos, None]
    intensity = m_hub / m_hub.max() if m_hub.max() > 0 else m_hub
    rgb_flat = colors * intensity[:, None]
    if grid_shape is not None:
        write_rgb_png(out / "barycenter_rgb.png", rgb_flat.reshape(*grid_shape, 3))
    else:
        write_matrix_csv(out / "barycenter_rgb.csv", rgb_flat)


# ------------------------------------------------------------- transfer ----

TRANSFER_DEFAULTS = dict(
    snapshots=None, synth=None, grid=32, rotation=0.35, drift=(0.1, 0.0),
    blur=0.6, threshold=1e-5, seed=7, eps=2e-4, kl=1e-3, reference="counting",
    outer_iter=30, inner_iter=2000, inner_tol=1e-7, out="transfer_out",
)


def cmd_transfer(args) -> int:
    ns = _resolve(args, TRANSFER_DEFAULTS)
    synth = None
    if ns["synth"]:
        nc, nn, nsnap = (int(v) for v in str(ns["synth"]).split(","))
        synth = synth_particles(
            nc, nn, nsnap, rotation_per_step=ns["rotation"],
            drift=tuple(ns["drift"]), grid_size=ns["grid"],
            blur_sigma=ns["blur"], seed=ns["seed"], threshold=ns["threshold"],
        )
        spaces = synth.spaces
    elif ns["snapshots"]:
        spaces = [read_mmspace_dir(p) for p in ns["snapshots"]]
    else:
        print("transfer: need --snapshots or --synth", file=sys.stderr)
        return 2
    if len(spaces) < 2:
        print("transfer: need at least two snapshots", file=sys.stderr)
        return 2
    tree = chain_tree([sp.n for sp in spaces])
    penalties = [MarginalPenalty.scaled_kl(ns["kl"])] * len(spaces)
    reference = _reference_for(ns["reference"], spaces)
    problem = UmgwProblem(spaces, tree, penalties, ns["eps"], reference=reference)
    cfg = SinkhornConfig(eps=ns["eps"], max_iter=ns["inner_iter"],
                         tolerance=ns["inner_tol"])
    result = solve_umgw(problem, outer_iter=ns["outer_iter"], inner_cfg=cfg)
    out = _outdir(ns)
    _write_json(out / "resolved_config.json", ns)
    ops = []
    for i in range(len(spaces) - 1):
        op = transfer_operator(result.pi, i, i + 1)
        ops.append(op)
        write_matrix_csv(out / f"operator_{i}_{i + 1}.csv", op.matrix)
    meta = {
        "eps": ns["eps"], "kl": ns["kl"], "snapshots": len(spaces),
        "converged": result.converged, "iterations": result.iterations,
        "final_objective": result.objective_trace[-1],
    }
    if synth is not None:
        acc = _transfer_accuracy(synth, result, ops, out)
        meta.update(acc)
        _write_json(out / "accuracy.json", acc)
    _write_json(out / "metadata.json", meta)
    print(f"transfer: wrote {out} (converged={result.converged})")
    return 0


def _transfer_accuracy(synth, result, ops, out) -> dict:
    """Row-argmax correspondence and propagated-mass localization."""
    n_snap = len(synth.spaces)
    n_part = synth.true_support_idx.shape[1]
    correct = 0
    checked = 0
    for e, op in enumerate(ops):
        kt = op.kt
        for p in range(n_part):
            src = synth.true_support_idx[e, p]
            tgt = synth.true_support_idx[e + 1, p]
            checked += 1
            if int(np.argmax(kt[src])) == tgt:
                correct += 1
    # propagate the first clean density along the chain
    localized = []
    density = synth.clean_densities[0]
    mass0 = float(density.sum())
    masses = [mass0]
    for t in range(1, n_snap):
        density = propagate(compose(ops[:t]), synth.clean_densities[0])
        masses.append(float(density.sum()))
        grid = synth.grid_size
        img = np.zeros((grid, grid))
        img[synth.support_rows[t], synth.support_cols[t]] = density
        write_pgm(out / f"propagated_{t}.pgm", img)
        _write_overlay(out / f"overlay_{t}.png", img, synth, t)
        mask = np.zeros((grid, grid), dtype=bool)
        for p in range(n_part):
            r, c = synth.cell_rowcol(t, p)
            mask[max(0, r - 1): r + 2, max(0, c - 1): c + 2] = True
        inside = float(img[mask].sum())
        total = float(img.sum())
        localized.append(inside / total if total > 0 else 0.0)
    return {
        "correspondence_accuracy": correct / checked if checked else 1.0,
        "localized_mass_per_step": localized,
        "propagated_mass_per_step": masses,
    }


def _write_overlay(path, propagated, synth, t) -> None:
    grid = synth.grid_size
    clean = synth.clean_images[t]
    noise = np.clip(synth.noisy_images[t] - clean, 0.0, None)
    rgb = np.zeros((grid, grid, 3))
    if clean.max() > 0:
        rgb[:, :, 2] = clean / clean.max()
    if noise.max() > 0:
        rgb[:, :, 0] = noise / noise.max()
    if propagated.max() > 0:
        rgb[:, :, 1] = 0.5 * propagated / propagated.max()
    write_rgb_png(path, rgb)


# ---------------------------------------------------------------- check ----

CHECK_DEFAULTS = dict(suite="all", trials=100, tol=1e-3, seed=0, out=None)


def _check_klfac(trials, rng):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 6))
        a1, a2, a3 = (rng.uniform(0.2, 2.0, size=n) for _ in range(3))
        worst = max(worst, kl_factorization_check(a1, a2, a3))
    return worst < 1e-10, f"max residual {worst:.3e} (tol 1e-10)"


def _check_mcnd(trials, rng):
    worst = -math.inf
    n_i = [2, 2, 2]
    pts = [rng.normal(size=(k, 2)) for k in n_i]
    spaces = [
        MmSpace(np.linalg.norm(p[:, None] - p[None, :], axis=2), np.ones(k) / k)
        for p, k in zip(pts, n_i)
    ]
    tree = chain_tree(n_i)
    sphere = sphere_grid_mmspace(3, 3)
    keep = [0, 4, 8]
    sp3 = MmSpace(sphere.dist[np.ix_(keep, keep)], np.ones(3) / 3)
    pts2 = rng.normal(size=(3, 2))
    sp_e = MmSpace(np.linalg.norm(pts2[:, None] - pts2[None, :], axis=2),
                   np.ones(3) / 3)
    tree2 = chain_tree([3, 3])
    for _ in range(trials):
        a = zero_marginal_tensor(rng.normal(size=n_i))
        worst = max(worst, mcnd_quadratic_form(tree, spaces, a))
        b = zero_marginal_tensor(rng.normal(size=(3, 3)))
        worst = max(worst, mcnd_quadratic_form(tree2, [sp3, sp_e], b))
    return worst <= 1e-12, f"max quadratic form {worst:.3e} (tol 1e-12)"


def zero_marginal_tensor(a: np.ndarray) -> np.ndarray:
    """Project onto the subspace with all node marginals zero.

    Sequential per-axis centering: after the first axis the total vanishes,
    so later centerings preserve earlier ones and one pass is exact.
    """
    for i in range(a.ndim):
        axes = tuple(k for k in range(a.ndim) if k != i)
        marg = a.sum(axis=axes, keepdims=True)
        a = a - marg * (a.shape[i] / a.size)
    return a


def _check_scaling(trials, rng):
    from .treecost import chain_tree as _chain

    worst = 0.0
    for _ in range(max(1, trials // 10)):
        spaces = []
        for _k in range(3):
            p = rng.normal(size=(3, 2))
            w = rng.uniform(0.5, 1.5, size=3)
            spaces.append(MmSpace(np.linalg.norm(p[:, None] - p[None, :], axis=2),
                                  w / w.sum()))
        prob = UmgwProblem(spaces, _chain([3, 3, 3]),
                           [MarginalPenalty.scaled_kl(0.3)] * 3, eps=0.05)
        res = solve_umgw(prob, outer_iter=3)
        base = objective_Fbi(prob, res.pi, res.gamma, balanced_tol=math.inf)
        for t in (0.5, 2.0, 10.0):
            v = objective_Fbi(prob, res.pi.rescale_by(t),
                              res.gamma.rescale_by(1.0 / t),
                              balanced_tol=math.inf)
            worst = max(worst, abs(v - base) / (1.0 + abs(base)))
    return worst <= 1e-10, f"max relative drift {worst:.3e} (tol 1e-10)"


def _check_tightness(tol):
    size = 8
    spade = image_to_mmspace(spade_image(size), threshold=0.05)
    heart = image_to_mmspace(heart_image(size), threshold=0.05)
    tree = chain_tree([spade.n, heart.n])
    ref = ReferenceMeasure.product_of_inputs([spade.weights, heart.weights])
    prob = UmgwProblem([spade, heart], tree,
                       [MarginalPenalty.balanced()] * 2, eps=5e-4, reference=ref)
    cfg = SinkhornConfig(eps=5e-4, max_iter=5000, tolerance=1e-7)
    res = solve_umgw(prob, outer_iter=30, inner_cfg=cfg)
    rep = tightness_report(prob, res)
    gap = max(rep.gap_pi, rep.gap_gamma)
    ok = gap <= tol * abs(rep.fbi)
    return ok, f"max gap {gap:.3e} vs {tol:g}*|F|={tol * abs(rep.fbi):.3e}"


def cmd_check(args) -> int:
    ns = _resolve(args, CHECK_DEFAULTS)
    rng = np.random.default_rng(ns["seed"])
    suites = ["klfac", "mcnd", "scaling", "tightness"]
    if ns["suite"] != "all":
        if ns["suite"] not in suites:
            print(f"check: unknown suite {ns['suite']!r}", file=sys.stderr)
            return 2
        suites = [ns["suite"]]
    all_ok = True
    rows = []
    for name in suites:
        if name == "klfac":
            ok, info = _check_klfac(ns["trials"], rng)
        elif name == "mcnd":
            ok, info = _check_mcnd(ns["trials"], rng)
        elif name == "scaling":
            ok, info = _check_scaling(ns["trials"], rng)
        else:
            ok, info = _check_tightness(ns["tol"])
        rows.append((name, ok, info))
        all_ok = all_ok and ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {info}")
    if ns["out"]:
        out = _outdir(ns)
        _write_json(out / "check_report.json",
                    {name: {"pass": ok, "info": info} for name, ok, info in rows})
        _write_json(out / "resolved_config.json", ns)
    return 0 if all_ok else 1


# ---------------------------------------------------------------- synth ----

SYNTH_DEFAULTS = dict(
    kind="particles", particles="10,2,3", grid=32, rotation=0.35,
    drift=(0.1, 0.0), blur=0.6, threshold=1e-5, seed=7,
    shape="spade", size=12, out="synth_out",
)


def cmd_synth(args) -> int:
    ns = _resolve(args, SYNTH_DEFAULTS)
    out = _outdir(ns)
    _write_json(out / "resolved_config.json", ns)
    if ns["kind"] == "particles":
        nc, nn, nsnap = (int(v) for v in str(ns["particles"]).split(","))
        synth = synth_particles(
            nc, nn, nsnap, rotation_per_step=ns["rotation"],
            drift=tuple(ns["drift"]), grid_size=ns["grid"],
            blur_sigma=ns["blur"], seed=ns["seed"], threshold=ns["threshold"],
        )
        for t, sp in enumerate(synth.spaces):
            write_mmspace_dir(out / f"snapshot_{t}", sp)
            write_pgm(out / f"snapshot_{t}.pgm", synth.noisy_images[t])
            write_pgm(out / f"clean_{t}.pgm", synth.clean_images[t])
        _write_json(out / "ground_truth.json", {
            "true_cells": synth.true_cells.tolist(),
            "grid_size": synth.grid_size,
        })
        print(f"synth: wrote {nsnap} particle snapshots to {out}")
        return 0
    if ns["kind"] == "shapes":
        makers = {"spade": spade_image, "heart": heart_image, "disk": disk_image}
        if ns["shape"] not in makers:
            print(f"synth: unknown shape {ns['shape']!r}", file=sys.stderr)
            return 2
        img = makers[ns["shape"]](int(ns["size"]))
        write_pgm(out / f"{ns['shape']}_{ns['size']}.pgm", img)
        space = image_to_mmspace(img, threshold=0.05, name=ns["shape"])
        write_mmspace_dir(out / f"{ns['shape']}_{ns['size']}", space)
        print(f"synth: wrote shape fixture to {out}")
        return 0
    print(f"synth: unknown kind {ns['kind']!r}", file=sys.stderr)
    return 2


# ----------------------------------------------------------------- main ----


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mgw",
        description="Multi-marginal Gromov-Wasserstein transport toolbox",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("umgw", help="solve a multi-marginal GW problem")
    p.add_argument("--inputs", nargs="+", help="space directories or images")
    p.add_argument("--tree", help="'chain' or a JSON tree file")
    p.add_argument("--penalties", help="balanced | free | kl:L (single or comma list)")
    p.add_argument("--balanced", action="store_const", const="balanced",
                   dest="penalties", help="shortcut for --penalties balanced")
    p.add_argument("--eps", type=float)
    p.add_argument("--reference", choices=("counting", "product"))
    p.add_argument("--threshold", type=float, help="image ingestion threshold")
    p.add_argument("--normalize", choices=("support", "grid"),
                   help="image metric normalization")
    p.add_argument("--outer-iter", type=int)
    p.add_argument("--inner-iter", type=int)
    p.add_argument("--inner-tol", type=float)
    p.add_argument("--oracle", action="store_true", default=None,
                   help="also run the dense oracle and report deltas")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_umgw)

    p = sub.add_parser("barycenter", help="fixed-support (fused) barycenter")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--support", help="support space directory")
    p.add_argument("--support-grid", type=int, help="square pixel grid side")
    p.add_argument("--sphere-grid", type=int, help="sphere grid side")
    p.add_argument("--rho", nargs="+")
    p.add_argument("--penalties")
    p.add_argument("--balanced", action="store_const", const="balanced",
                   dest="penalties")
    p.add_argument("--no-rho-scale-kl", action="store_false", dest="rho_scale_kl",
                   default=None, help="do not multiply KL weights by rho_i")
    p.add_argument("--eps", type=float)
    p.add_argument("--reference", choices=("counting", "product"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--normalize", choices=("support", "grid"),
                   help="image metric normalization (default grid: inputs and "
                        "hub share one scale)")
    p.add_argument("--fused-beta", type=float)
    p.add_argument("--label-exponent", type=float)
    p.add_argument("--support-labels", help="CSV of hub label indices")
    p.add_argument("--product-labels", action="store_true", default=None,
                   help="hub support = support x label set")
    p.add_argument("--hub-prior", choices=("uniform", "mixture"))
    p.add_argument("--outer-iter", type=int)
    p.add_argument("--inner-iter", type=int)
    p.add_argument("--inner-tol", type=float)
    p.add_argument("--loss-every", type=int,
                   help="emit the barycentric loss every K outer iterations")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_barycenter)

    p = sub.add_parser("transfer", help="transfer operators along a chain")
    p.add_argument("--snapshots", nargs="+")
    p.add_argument("--synth", help="N_COHERENT,N_NOISE,N_SNAPSHOTS")
    p.add_argument("--grid", type=int)
    p.add_argument("--rotation", type=float)
    p.add_argument("--drift", nargs=2, type=float)
    p.add_argument("--blur", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--kl", type=float, help="KL marginal weight")
    p.add_argument("--reference", choices=("counting", "product"))
    p.add_argument("--outer-iter", type=int)
    p.add_argument("--inner-iter", type=int)
    p.add_argument("--inner-tol", type=float)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("check", help="run the invariant suites")
    p.add_argument("--suite", choices=("all", "klfac", "mcnd", "scaling", "tightness"))
    p.add_argument("--trials", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", help="generate synthetic fixtures")
    p.add_argument("--kind", choices=("particles", "shapes"))
    p.add_argument("--particles", help="N_COHERENT,N_NOISE,N_SNAPSHOTS")
    p.add_argument("--grid", type=int)
    p.add_argument("--rotation", type=float)
    p.add_argument("--drift", nargs=2, type=float)
    p.add_argument("--blur", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--shape", choices=("spade", "heart", "disk"))
    p.add_argument("--size", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, FileNotFoundError, ValueError) as exc:
        print(f"mgw: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"mgw: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

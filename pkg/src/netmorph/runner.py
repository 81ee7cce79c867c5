"""Experiment orchestration: one function per experiment kind.

Every run writes ``manifest.json`` and ``summary.json`` into the output
directory next to its kind-specific CSV and VTK files.
"""

import logging
import math
from pathlib import Path

import numpy as np

from . import dynamics, fem, io, oned, stationary
from . import mesh as meshlib

log = logging.getLogger(__name__)


def build_mesh(cfg):
    ms = cfg.section("mesh")
    gen = ms["generator"]
    if gen == "diamond":
        mesh = meshlib.diamond_with_triangles(ms["triangles"]) if ms["triangles"] else meshlib.generate_diamond(ms["h"])
    elif gen == "unit_square":
        mesh = meshlib.generate_unit_square(ms["n"])
    else:
        f = Path(ms["file"])
        if cfg.path and not f.is_absolute() and (Path(cfg.path).parent / f).is_file():
            f = Path(cfg.path).parent / f
        mesh = meshlib.read_mesh(f)
    for _ in range(ms["refine"]):
        mesh = meshlib.refine_uniform(mesh)
    return mesh


def model_params(cfg, **override):
    m = dict(cfg.section("model"))
    m.update(override)
    return dynamics.ModelParams(
        D=m["D"], c=m["c"], gamma=m["gamma"], r=m["r"], rho=m["rho"], S=m["S"],
        m_boundary=m["m_boundary"], extinction_monitor=m["extinction_monitor"],
    )


def initial_m(cfg, mesh):
    ini = cfg.section("initial")
    if ini["kind"] == "strip":
        return dynamics.initial_conductance(mesh, shift=ini["shift"])
    m = np.zeros((mesh.n_triangles, 2))
    m[:, 0] = ini["shift"]
    return m


def stop_rule(cfg):
    s = cfg.section("stop")
    return dynamics.StopRule(T=s["T"], tol_E=s["tol_E"], tol_m=s["tol_m"], extinction=s["extinction"],
                             max_steps=s["max_steps"])


def _simulator(cfg, mesh, params):
    tm = cfg.section("time")
    return dynamics.Simulator(mesh, params, dt_max=tm["dt_max"], dt_min=tm["dt_min"], solver=tm["solver"],
                              on_energy_increase=tm["on_energy_increase"])


def _evolve(cfg, out, mesh, sim, state, stop, csv_name="diagnostics.csv", prefix="snapshot"):
    """Run ``sim`` from ``state``, streaming diagnostics and strided snapshots."""
    stride = cfg.section("experiment")["stride"]
    r = sim.params.r

    def snap(st):
        io.write_snapshot(out / f"{prefix}_{st.k:06d}.vtk", mesh, st.p, st.m, r, title=f"t = {st.t!r}")

    snap(state)
    with io.CsvWriter(out / csv_name, dynamics.CSV_HEADER) as w:
        w.write(state.diag.as_row())

        def callback(st):
            w.write(st.diag.as_row())
            if stride and st.k % stride == 0:
                snap(st)

        result = sim.run(state, stop, callback)
    if result.final.k > 0 and not (stride and result.final.k % stride == 0):
        snap(result.final)
    return result


def run_simulate(cfg, out):
    mesh = build_mesh(cfg)
    params = model_params(cfg)
    sim = _simulator(cfg, mesh, params)
    state = sim.initial_state(initial_m(cfg, mesh))
    result = _evolve(cfg, out, mesh, sim, state, stop_rule(cfg))
    d = result.final.diag
    summary = {
        "kind": "simulate",
        "reason": result.reason,
        "steps": d.k,
        "t": d.t,
        "E_h": d.E_h,
        "E_ht": d.E_ht,
        "s_k": d.s_k,
        "min_abs_m": d.min_abs_m,
        "T_ex": result.T_ex,
        "energy_violations": result.energy_violations,
        "rejected_steps": result.rejected_steps,
    }
    return mesh, summary


def _active_set(name):
    return {"hyperbola": stationary.hyperbola_set, "all": lambda x1, x2: np.ones_like(x1, dtype=bool),
            "none": lambda x1, x2: np.zeros_like(x1, dtype=bool)}[name]


def run_stationary_variational(cfg, out):
    mesh = build_mesh(cfg)
    mo, st = cfg.section("model"), cfg.section("stationary")
    res = stationary.f_alpha_minimize(mesh, mo["S"], _active_set(st["active_set"]), alpha=st["alpha"],
                                      gamma=mo["gamma"], c=mo["c"], r=mo["r"], tol=st["tol"])
    io.write_snapshot(out / "stationary.vtk", mesh, res.p0, res.m0, mo["r"],
                      extra_cell_data={"active": res.active_set.astype(float)})
    io.write_csv(out / "descent.csv", ("iteration", "F", "rel_change", "step"),
                 [(i + 1, *row) for i, row in enumerate(res.history)])
    summary = {
        "kind": "stationary-variational",
        "alpha": res.alpha,
        "iterations": res.iterations,
        "converged": res.converged,
        "stagnated": res.stagnated,
        "stationarity_residual": res.stationarity_residual,
        "active_triangles": int(res.active_set.sum()),
        "max_abs_m0": float(np.max(np.hypot(*res.m0.T))) if len(res.m0) else 0.0,
    }
    T = st["instability_T"]
    if T > 0:
        params = model_params(cfg, D=0.0)
        sim = _simulator(cfg, mesh, params)
        m_eta = stationary.perturb(mesh, res.m0, cfg.section("initial")["amplitude"],
                                   seed=cfg.section("experiment")["seed"])
        d0 = fem.l2_norm_p0(mesh, m_eta - res.m0)
        rows = []

        def distance(s):
            rows.append((s.k, s.t, fem.l2_norm_p0(mesh, s.m - res.m0) / d0))

        state = sim.initial_state(m_eta)
        distance(state)
        result = sim.run(state, dynamics.StopRule(T=T), distance)
        io.write_csv(out / "instability.csv", ("k", "t", "distance_ratio"), rows)
        ratios = np.array([r[2] for r in rows])
        summary.update(instability_T=T, distance_ratio_final=float(ratios[-1]),
                       distance_ratio_min=float(ratios.min()), instability_steps=result.final.k)
    return mesh, summary


def run_stationary_penalty(cfg, out):
    mesh = build_mesh(cfg)
    mo, st = cfg.section("model"), cfg.section("stationary")
    prob = stationary.PenaltyProblem(mesh, mo["S"], mo["c"], st["boundary"])
    results = stationary.penalty_continuation(mesh, mo["S"], mo["c"], st["eps"], st["boundary"])
    rows = []
    for res in results:
        kkt = stationary.kkt_residuals(mesh, res.p, res.a, mo["c"], mo["S"], problem=prob)
        rows.append((res.eps, res.violation_l1, res.violation_l2, res.complementarity, res.a_l2, res.value,
                     res.newton_iterations, *kkt))
    io.write_csv(out / "continuation.csv",
                 ("eps", "violation_l1", "violation_l2", "complementarity", "a_l2", "value", "newton_iterations",
                  "r_pde", "r_feas", "r_comp"), rows)
    last = results[-1]
    io.write_vtk(out / "penalty.vtk", mesh.vertices, mesh.triangles, {"p": last.p},
                 {"a": last.a, "grad_p_abs": np.hypot(*fem.gradient_per_triangle(mesh, last.p).T)},
                 title=f"eps = {last.eps!r}")
    summary = {
        "kind": "stationary-penalty",
        "eps": last.eps,
        "violation_l1": last.violation_l1,
        "complementarity": last.complementarity,
        "a_l2": last.a_l2,
        "r_pde": rows[-1][7],
        "r_feas": rows[-1][8],
        "r_comp": rows[-1][9],
    }
    return mesh, summary


def run_oned_extinction(cfg, out):
    mo, od, s = cfg.section("model"), cfg.section("oned"), cfg.section("stop")
    profile = oned.Profile1D.uniform(od["n"], mo["S"], od["m0"])
    thr = s["extinction"] if s["extinction"] is not None else 1e-8
    stride = cfg.section("experiment")["stride"]
    traj = oned.integrate_1d(profile, mo["D"], mo["c"], mo["gamma"], T=od["T"], extinction=thr, stride=stride)
    snaps = list(traj.snapshots) if stride else [(0.0, profile.m)]
    if snaps[-1][0] != traj.t[-1]:
        snaps.append((float(traj.t[-1]), traj.final))
    io.write_csv(out / "trajectory.csv", ("t", "x", "m"),
                 ((t, x, m) for t, prof in snaps for x, m in zip(profile.x, prof)))
    io.write_csv(out / "norms.csv", ("t", "l1", "sup", "min_abs"),
                 zip(traj.t, traj.l1, traj.sup, traj.min_abs))
    B_sup = float(np.max(np.abs(profile.B)))
    summary = {"kind": "oned-extinction", "reason": traj.reason, "T_ex": traj.T_ex, "t": float(traj.t[-1]),
               "l1_final": float(traj.l1[-1]), "cB_sup": mo["c"] * B_sup, "Z_gamma": oned.z_constant(mo["gamma"])}
    M = float(np.max(np.abs(profile.m)))
    if mo["c"] * B_sup < oned.z_constant(mo["gamma"]) and M > 0:
        delta = oned.breakdown_margin(mo["gamma"], mo["c"], B_sup, M)
        summary["margin"] = delta
        if mo["gamma"] < 0.5:
            summary["T_ex_bound"] = profile.l1_norm() / delta
        else:
            summary["decay_rate"] = traj.decay_rate()
    return None, summary


def run_oned_classify(cfg, out):
    mo, od = cfg.section("model"), cfg.section("oned")
    gamma = mo["gamma"]
    values = np.linspace(od["cB_min"], od["cB_max"], od["cB_count"])
    Z = oned.z_constant(gamma)
    if values[0] <= Z <= values[-1]:
        # the case boundary itself, where two roots merge
        values = np.unique(np.append(values, Z))
    reports = [oned.classify_stationary(float(v), gamma) for v in values]
    lines = [f"gamma = {gamma!r}, Z_gamma = {Z!r}", ""]
    for rep in reports:
        lines.append(rep.format())
    (out / "classification.txt").write_text("\n".join(lines) + "\n")
    io.write_csv(out / "classification.csv", ("cB", "count", "labels"),
                 [(rep.cB, rep.count, " ".join(rep.labels)) for rep in reports])
    counts = [rep.count for rep in reports]
    changes = [float(values[i]) for i in range(1, len(values)) if counts[i] != counts[i - 1]]
    return None, {"kind": "oned-classify", "gamma": gamma, "Z_gamma": Z, "count_changes_at": changes,
                  "counts": counts}


def run_convergence_study(cfg, out):
    cv = cfg.section("convergence")
    mesh = meshlib.generate_unit_square(cv["n0"])
    rows, meshes = [], []
    for level in range(cv["levels"]):
        if level:
            mesh = meshlib.refine_uniform(mesh)
        meshes.append(mesh)
        rows.append((level, mesh.h, *fem.manufactured_poisson_errors(mesh)))
    h = [r[1] for r in rows]
    l2 = fem.observed_orders(h, [r[2] for r in rows])
    h1 = fem.observed_orders(h, [r[3] for r in rows])
    io.write_csv(out / "convergence.csv", ("level", "h", "l2_error", "h1_error", "l2_order", "h1_order"),
                 [(*r, None if i == 0 else l2[i - 1], None if i == 0 else h1[i - 1]) for i, r in enumerate(rows)])
    return meshes[-1], {"kind": "convergence-study", "l2_orders": list(l2), "h1_orders": list(h1),
                        "l2_order_min": float(l2.min()), "h1_order_min": float(h1.min())}


def run_mesh_gen(cfg, out):
    mesh = build_mesh(cfg)
    mesh.check()
    meshlib.write_mesh(mesh, out / "mesh.txt")
    io.write_vtk(out / "mesh.vtk", mesh.vertices, mesh.triangles, cell_data={"area": mesh.areas}, title="mesh")
    return mesh, {"kind": "mesh-gen", **io.mesh_stats(mesh)}


RUNNERS = {
    "simulate": run_simulate,
    "stationary-variational": run_stationary_variational,
    "stationary-penalty": run_stationary_penalty,
    "oned-extinction": run_oned_extinction,
    "oned-classify": run_oned_classify,
    "convergence-study": run_convergence_study,
    "mesh-gen": run_mesh_gen,
}


def run_experiment(cfg, out, threads=1):
    """Run the experiment described by ``cfg`` and write its artifacts to ``out``.

    Returns the summary dict.  Errors propagate to the caller.
    """
    out = io.ensure_dir(out)
    np.random.seed(cfg.section("experiment")["seed"])
    mesh, summary = RUNNERS[cfg.kind](cfg, out)
    summary = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in summary.items()}
    io.write_json(out / "summary.json", summary)
    io.write_manifest(out / "manifest.json", cfg, mesh, threads)
    return summary

"""Experiment runners behind the command-line subcommands.

Each runner takes an :class:`ExperimentConfig`, writes its CSV outputs into a
directory and returns a small report dict.  Every CSV starts with ``#`` header
lines carrying the config hash and seed.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from . import calibration as calmod
from . import chip as chipmod
from . import finitekey, link, protocol, spgd
from .config import ExperimentConfig
from .polarization import H, V, to_stokes, x_state

# two-sided Gaussian 4-sigma tail, used as the Poisson-exact consistency level
FOUR_SIGMA_TAIL = 3.167e-5


class InvariantFailure(RuntimeError):
    """A run finished but violated one of its stated invariants."""


def header_lines(cfg: ExperimentConfig, command: str) -> list[str]:
    return [f"command={command}", f"config_hash={cfg.hash()}", f"seed={cfg.protocol.seed}"]


def read_csv(path) -> tuple[list[str], list[dict]]:
    """(header comment lines, rows) of a CSV written by this module."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    head = [l[2:] for l in lines if l.startswith("# ")]
    body = [l for l in lines if not l.startswith("#")]
    return head, list(csv.DictReader(body))


def _write(path, fields, rows, head):
    with open(path, "w", newline="") as fh:
        for line in head:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def calibrated_chip(cfg: ExperimentConfig) -> calmod.CalibrationResult:
    ex = cfg.experiment
    measure = None
    if ex.noise_sigma > 0:
        rng = protocol.make_rng(cfg.protocol.seed)
        measure = calmod.model_measure(cfg.chip, ex.noise_sigma, rng, ex.n_avg)
    return calmod.calibrate(cfg.chip, measure, ex.target_error)


# ---------------------------------------------------------------------------
# calibrate


def run_calibrate(cfg: ExperimentConfig, out: str) -> dict:
    head = header_lines(cfg, "calibrate")
    p = cfg.chip
    ex = cfg.experiment
    try:
        res = calibrated_chip(cfg)
    except calmod.CalibrationError as exc:
        raise InvariantFailure(str(exc)) from exc
    calmod.write_trajectory_csv(res.trajectory, os.path.join(out, "trajectory.csv"), head)
    calmod.write_trajectory_csv(res.x_trajectory, os.path.join(out, "trajectory_x.csv"), head)

    grid = calmod.grid_oracle(p, ex.landscape_resolution)
    rows = []
    for i, a in enumerate(grid.axis):
        for j, b in enumerate(grid.axis):
            rows.append({"dphi2_rad": a, "dphi3_rad": b, "r_err": grid.landscape[i, j]})
    _write(os.path.join(out, "landscape.csv"), ["dphi2_rad", "dphi3_rad", "r_err"], rows, head)

    # invariants use the true residuals, not the (possibly noisy) calibration readings
    truth = calmod.model_measure(p)
    states = res.states(p)
    inten = res.intensities(p)
    targets = {"H": H, "V": V, "plus": x_state(res.chi, +1), "minus": states["plus"].orthogonal()}
    true_res = {k: max(truth(res.settings[k], t), 0.0) for k, t in targets.items()}
    rows = []
    for k in calmod.STATE_NAMES:
        d = res.settings[k]
        st = to_stokes(states[k])
        rows.append({
            "state": k, "dphi2_rad": chipmod.dphi2(d, p), "dphi3_rad": chipmod.dphi3(d, p),
            "residual_error": res.residual_error[k], "true_error": true_res[k], "intensity": inten[k],
            "s1": st.s1, "s2": st.s2, "s3": st.s3,
        })
    _write(os.path.join(out, "calibration.csv"),
           ["state", "dphi2_rad", "dphi3_rad", "residual_error", "true_error", "intensity", "s1", "s2", "s3"],
           rows, head)

    mub = calmod.mub_defect(res, p)
    imb = calmod.intensity_imbalance(res, p)
    report = {
        "sweeps": res.iterations_used,
        "final_r_err": res.trajectory[-1].r_err,
        "max_residual": max(true_res.values()),
        "mub_defect": mub,
        "intensity_imbalance_signal": imb["signal"],
        "intensity_imbalance_decoy": imb["decoy"],
        "grid_min_r_err": grid.grid_min,
    }
    if report["max_residual"] >= ex.target_error or mub > 2 * ex.target_error:
        raise InvariantFailure(f"calibration invariants violated: {report}")
    return report


# ---------------------------------------------------------------------------
# skr-curve


def run_skr_curve(cfg: ExperimentConfig, out: str) -> dict:
    cal = calibrated_chip(cfg)
    pts = finitekey.skr_vs_distance(cfg.experiment.distances, cfg.link, cfg.chip, cal, cfg.protocol,
                                    cfg.security, optimize=cfg.experiment.optimize)
    finitekey.write_curve_csv(pts, os.path.join(out, "skr_curve.csv"), header_lines(cfg, "skr-curve"))
    for p in pts:
        if not (math.isfinite(p.skr_bps) and p.skr_bps >= 0):
            raise InvariantFailure(f"invalid SKR at {p.distance_km} km")
    return {"points": [(p.distance_km, p.skr_bps, p.qber_z) for p in pts]}


# ---------------------------------------------------------------------------
# mc-vs-analytic


def poisson_consistent(observed: float, expected: float) -> bool:
    """True unless ``observed`` sits beyond the 4-sigma-equivalent tail of Poisson(expected)."""
    if expected <= 0:
        return observed == 0
    lo = poisson.cdf(observed, expected)
    hi = poisson.sf(observed - 1, expected)
    return bool(min(lo, hi) >= FOUR_SIGMA_TAIL / 2)


def run_mc_vs_analytic(cfg: ExperimentConfig, out: str) -> dict:
    ex = cfg.experiment
    cal = calibrated_chip(cfg)
    pp = cfg.protocol.replace(block_pulses=ex.mc_pulses)
    rm = protocol.build_receiver_model(pp, cfg.link, cal, cfg.chip)
    exp = protocol.expected_statistics(pp, cfg.link, cal, cfg.chip, rm=rm).tallies()
    rows, bad, worst = [], [], 0.0
    for i in range(ex.mc_seeds):
        seed = cfg.protocol.seed + i
        obs = protocol.simulate_block(pp, cfg.link, cal, cfg.chip, protocol.make_rng(seed), rm=rm).tallies()
        for k, e in exp.items():
            o = obs[k]
            z = (o - e) / math.sqrt(e) if e > 0 else (0.0 if o == 0 else math.inf)
            ok = abs(o - e) <= 4 * math.sqrt(e) or poisson_consistent(o, e)
            worst = max(worst, abs(z))
            rows.append({"seed": seed, "tally": k, "observed": int(o), "expected": float(e), "z": z, "ok": ok})
            if not ok:
                bad.append((seed, k, o, e))
    _write(os.path.join(out, "mc_vs_analytic.csv"), ["seed", "tally", "observed", "expected", "z", "ok"], rows,
           header_lines(cfg, "mc-vs-analytic"))
    if bad:
        raise InvariantFailure(f"{len(bad)} tallies outside 4 sigma, first {bad[0]}")
    return {"max_abs_z": worst, "tallies": len(rows)}


# ---------------------------------------------------------------------------
# stability and spgd-demo


@dataclass
class BlockResult:
    block: int
    t_s: float
    skr_bps: float
    qber_z: float
    qber_x: float
    qber_proxy: float


def stability_blocks(cfg: ExperimentConfig, cal=None, pp=None) -> list[BlockResult]:
    """Consecutive key blocks with channel drift and SPGD compensation running.

    Each block lasts ``block_pulses / rep_rate``; SPGD runs every ``dt_s`` inside
    it.  Block statistics use the channel and controller state at the block end
    and count-level sampling around the analytic expectation.
    """
    lp, s = cfg.link, cfg.spgd
    cal = cal or calibrated_chip(cfg)
    pp = pp or cfg.protocol
    rng = protocol.make_rng(pp.seed)
    ctrl_rng, count_rng = rng.spawn(2)
    ctrl = spgd.SpgdController(gain=s.gain, perturbation=s.perturbation)
    cs = link.ChannelState()
    block_s = pp.block_pulses / lp.rep_rate_hz
    budget = s.probe_budget or None
    align = link.alignment_transform(cal.chi or 0.0)
    out = []
    for b in range(cfg.experiment.blocks):
        trace = spgd.run_compensation(lp, ctrl, block_s, s.dt_s, ctrl_rng, budget, cs, cal.chi or 0.0)
        cs = trace.channel
        epc = align @ spgd.epc_transform(ctrl.voltages)
        exp = protocol.expected_statistics(pp, lp, cal, cfg.chip, cs, epc)
        oc = protocol.sample_statistics(exp, count_rng)
        res = finitekey.secret_length(oc, pp, cfg.security, lp.rep_rate_hz)
        proxy = float(trace.qber_proxy.mean()) if trace.qber_proxy.size else float("nan")
        out.append(BlockResult(b, cs.elapsed_s, res.skr_bps, res.qber_z, res.qber_x, proxy))
    return out


def emit_summary(results, metrics=("skr_bps", "qber_z", "qber_x")) -> tuple[str, list[dict]]:
    """Mean, sample std, min and max per metric; a single result gets std 0 and n=1 flagged."""
    if not results:
        raise ValueError("emit_summary needs at least one result")
    rows = []
    for m in metrics:
        vals = np.array([getattr(r, m) if not isinstance(r, dict) else r[m] for r in results], dtype=float)
        n = vals.size
        rows.append({
            "metric": m, "n": n, "mean": float(vals.mean()),
            # identical values get an exact zero rather than the mean's rounding residue
            "std": float(vals.std(ddof=1)) if n > 1 and np.ptp(vals) > 0 else 0.0,
            "min": float(vals.min()), "max": float(vals.max()),
            "flag": "n=1" if n == 1 else "",
        })
    width = max(len(r["metric"]) for r in rows)
    lines = [f"{'metric':<{width}}  {'n':>5}  {'mean':>12}  {'std':>12}  {'min':>12}  {'max':>12}"]
    for r in rows:
        lines.append(f"{r['metric']:<{width}}  {r['n']:>5}  {r['mean']:>12.6g}  {r['std']:>12.6g}  "
                     f"{r['min']:>12.6g}  {r['max']:>12.6g}  {r['flag']}".rstrip())
    return "\n".join(lines), rows


SUMMARY_FIELDS = ["metric", "n", "mean", "std", "min", "max", "flag"]


def trend_test(y) -> tuple[float, float]:
    """Least-squares slope of ``y`` against its index and the slope's standard error."""
    y = np.asarray(y, dtype=float)
    x = np.arange(y.size, dtype=float)
    if y.size < 3:
        return 0.0, math.inf
    xc = x - x.mean()
    slope = float(np.sum(xc * (y - y.mean())) / np.sum(xc**2))
    resid = y - y.mean() - slope * xc
    se = float(math.sqrt(np.sum(resid**2) / (y.size - 2) / np.sum(xc**2)))
    return slope, se


def run_stability(cfg: ExperimentConfig, out: str) -> dict:
    blocks = stability_blocks(cfg)
    head = header_lines(cfg, "stability")
    fields = ["block", "t_s", "skr_bps", "qber_z", "qber_x", "qber_proxy"]
    _write(os.path.join(out, "stability.csv"), fields, [b.__dict__ for b in blocks], head)
    table, rows = emit_summary(blocks)
    _write(os.path.join(out, "stability_summary.csv"), SUMMARY_FIELDS, rows, head)
    slope, se = trend_test([b.skr_bps for b in blocks])
    return {"table": table, "summary": rows, "skr_slope": slope, "skr_slope_se": se}


def run_spgd_demo(cfg: ExperimentConfig, out: str) -> dict:
    s = cfg.spgd
    rng = protocol.make_rng(cfg.protocol.seed)
    ctrl = spgd.SpgdController(gain=s.gain, perturbation=s.perturbation)
    trace = spgd.run_compensation(cfg.link, ctrl, s.duration_s, s.dt_s, rng, s.probe_budget or None)
    trace.to_csv(os.path.join(out, "spgd_trace.csv"), header_lines(cfg, "spgd-demo"))
    q = trace.qber_proxy
    return {"steps": int(q.size), "p95_qber_proxy": float(np.percentile(q, 95)) if q.size else float("nan"),
            "mean_qber_proxy": float(q.mean()) if q.size else float("nan")}


RUNNERS = {
    "calibrate": run_calibrate,
    "skr-curve": run_skr_curve,
    "stability": run_stability,
    "mc-vs-analytic": run_mc_vs_analytic,
    "spgd-demo": run_spgd_demo,
}

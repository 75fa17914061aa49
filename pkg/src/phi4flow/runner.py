"""Experiment orchestration: resolved config in, report files plus a manifest out.

Each experiment is a function ``(cfg, executor) -> (files, passed)`` where
``files`` maps output names to bytes.  The coordinator owns the run
directory: it writes the files, hashes them and records everything needed to
re-execute the run in ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_config, section
from .dynamics import Phi4Model, coming_down_profile, constant_profile, simulate
from .estimators import (
    EstimateReport,
    SimSettings,
    be_identity_check,
    be_s_grid,
    choose_lambda,
    contraction_rate,
    gaussian_gap_ratio,
    gaussian_variance,
    shipped_functionals,
    smoothing_exponent,
    spectral_gap_estimate,
    verify_energy_inequality,
)
from .linearization import finite_diff_check
from .noise import NoiseStream, wick_moments
from .spectral import Field, TorusGrid, multiplicative_inequality_check
from .stopping import StoppingConfig, calibrate_eta, simulate_restarts, tail_estimate

MANIFEST = "manifest.json"


class RunError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------------

def _grid(cfg) -> TorusGrid:
    return TorusGrid(cfg["grid"]["N"], cfg["grid"]["L"])


def _sim(cfg, dt: float) -> SimSettings:
    return SimSettings(cfg["grid"]["N"], cfg["grid"]["L"], dt, cfg["run"]["base_seed"],
                       cfg["run"]["batch"])


def _report_files(rep: EstimateReport, extra: dict | None = None) -> dict[str, bytes]:
    files = {"report.json": (rep.to_json() + "\n").encode(), "report.csv": rep.to_csv().encode()}
    files.update(extra or {})
    return files


def _functionals(grid, names):
    by_name = {F.name: F for F in shipped_functionals(grid)}
    return [by_name[n] for n in names]


def _csv(header, rows) -> bytes:
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                       for v in r) for r in rows]
    return ("\n".join(lines) + "\n").encode()


def _finite(x) -> bool:
    return x is not None and math.isfinite(x)


# -- experiments -------------------------------------------------------------------------

def run_calibrate(cfg, executor=None):
    s = section(cfg, "calibrate")
    grid = _grid(cfg)
    cal = calibrate_eta(grid, s["m"], s["alpha"], s["replicas"], cfg["run"]["base_seed"],
                        s["dt"], s["step"])
    rep = EstimateReport("calibrate", cfg)
    rep.add_row(cal.eta, (cal.p_hat, cal.ci_upper), cal.n, quantity="eta")
    rep.fits["calibration"] = cal.as_dict()
    rep.add_verdict("P(sup >= eta) < 1/4 at one-sided 95%", cal.ci_upper < 0.25,
                    0.25 - cal.ci_upper)
    return _report_files(rep), rep.passed


def run_contraction(cfg, executor=None):
    s = section(cfg, "contraction")
    if s["potential_free"]:
        coupling, noise = 0.0, False
    else:
        coupling, noise = s["coupling"], True
    rep = contraction_rate(s["m_list"], s["t_grid"], s["p"], s["replicas"], _sim(cfg, s["dt"]),
                           coupling=coupling, noise=noise, budget=s["budget"], executor=executor)
    if s["potential_free"]:
        for m, r in zip(s["m_list"], rep.fits["rates"]):
            rep.add_verdict(f"potential-free slope -m (m={m})", abs(r - m) <= 1e-6, 1e-6 - abs(r - m))
    plot_rows = [(r["m"], r["t"], r["log_estimate"], r["log_se"]) for r in rep.rows]
    files = {"plot_contraction.csv": _csv(["m", "t", "log_estimate", "log_se"], plot_rows)}
    if s["smoothing"]:
        sm = smoothing_exponent(s["short_m"], s["kappa"], s["alpha"], s["short_t_grid"], s["p"],
                                s["short_replicas"], _sim(cfg, s["short_dt"]),
                                coupling=coupling, noise=noise, budget=s["budget"],
                                executor=executor)
        files["smoothing.json"] = (sm.to_json() + "\n").encode()
        files["plot_smoothing.csv"] = _csv(
            ["t", "log_estimate", "log_se"],
            [(r["t"], r["log_estimate"], r["log_se"]) for r in sm.rows])
        rep.fits["smoothing_exponent"] = sm.fits["exponent"]
        rep.verdicts.extend(sm.verdicts)
    return _report_files(rep, files), rep.passed


def _resolve_m_star(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        pass
    path = Path(value)
    if not path.is_file():
        raise RunError(f"m_star: prerequisite contraction report {value!r} not found")
    data = json.loads(path.read_text())
    try:
        return float(data["fits"]["m_star_hat"])
    except (KeyError, TypeError):
        raise RunError(f"m_star: {value!r} is not a contraction report") from None


def run_spectral_gap(cfg, executor=None):
    s = section(cfg, "spectral_gap")
    grid = _grid(cfg)
    m_star = _resolve_m_star(s["m_star"])
    if not all(m > m_star for m in s["m_list"]):
        raise RunError(f"every m must exceed m_star = {m_star}")
    Fs = _functionals(grid, s["functionals"])
    coupling = 0.0 if s["gaussian"] else 1.0
    rep = EstimateReport("spectral_gap", cfg)
    rep.fits["m_star"] = m_star
    ratios = {F.name: [] for F in Fs}
    for m in s["m_list"]:
        res = spectral_gap_estimate(Fs, m, s["kappa"], s["burn_in"], s["run_length"],
                                    s["replicas"], _sim(cfg, s["dt"]), coupling=coupling,
                                    thin=s["thin"], batches=s["batches"], z_max=s["z_max"],
                                    executor=executor)
        for F, r in zip(Fs, res):
            lo, hi = r.ratio - 1.96 * r.ratio_se, r.ratio + 1.96 * r.ratio_se
            rep.add_row(r.ratio, (lo, hi), r.var.n, m=m, F=r.name, var=r.var.mean,
                        dirichlet=r.dirichlet.mean, z_halves=r.z_halves)
            ratios[r.name].append(r.ratio)
            rep.add_verdict(f"stationarity F={r.name} m={m}", r.stationary, s["z_max"] - abs(r.z_halves))
            rep.add_verdict(f"finite ratio F={r.name} m={m}", _finite(r.ratio), None)
            if s["gaussian"] and F.kind == "linear":
                exact = gaussian_gap_ratio(grid, F, m, s["kappa"])
                ok = abs(r.ratio - exact) <= 3 * r.ratio_se
                rep.add_verdict(f"Gaussian oracle F={r.name} m={m}", ok,
                                3 * r.ratio_se - abs(r.ratio - exact), exact=exact)
    for name, rs in ratios.items():
        dec = all(b < a for a, b in zip(rs, rs[1:]))
        rep.add_verdict(f"ratio decreasing in m F={name}", dec,
                        min((a - b for a, b in zip(rs, rs[1:])), default=None))
    return _report_files(rep), rep.passed


def run_be_check(cfg, executor=None):
    s = section(cfg, "be_check")
    grid = _grid(cfg)
    sim = _sim(cfg, s["dt"])
    model = Phi4Model(s["m"], coupling=0.0) if s["gaussian"] else Phi4Model(s["m"])
    Fs = _functionals(grid, ["linear"] if s["gaussian"] else s["functionals"])
    f0 = np.zeros((grid.N, grid.N))
    sg = be_s_grid(s["t"], s["uniform"], s["refine"])
    rep = EstimateReport("be_check", cfg)
    for F in Fs:
        be = be_identity_check(F, f0, s["t"], sg, s["replicas"], sim, model, s["outer"],
                               s["inner"], executor)
        rep.add_row(be.lhs.mean, (be.lhs.lo, be.lhs.hi), be.lhs.n, F=F.name, side="lhs")
        rep.add_row(be.rhs.mean, (be.rhs.lo, be.rhs.hi), be.rhs.n, F=F.name, side="rhs",
                    quad_error=be.quad_error)
        rep.add_verdict(f"95% CIs overlap F={F.name}", be.overlap,
                        min(be.rhs.hi - be.lhs.lo, be.lhs.hi - be.rhs.lo))
        if s["gaussian"]:
            exact = gaussian_variance(grid, np.einsum("i,ikl->kl", F.a, F.hs), s["m"], s["t"])
            for side, ci in (("lhs", be.lhs), ("rhs", be.rhs)):
                tol = 3 * ci.se + 1e-12 * abs(exact)
                rep.add_verdict(f"Gaussian closed form {side} F={F.name}",
                                abs(ci.mean - exact) <= tol, tol - abs(ci.mean - exact),
                                exact=exact)
    return _report_files(rep), rep.passed


def run_coming_down(cfg, executor=None):
    s = section(cfg, "coming_down")
    grid = _grid(cfg)
    prof = coming_down_profile(s["magnitudes"], s["p"], s["T"], s["dt"], s["replicas"], grid,
                               s["m"], s["noise"], constant_profile, cfg["run"]["base_seed"],
                               tuple(s["probs"]), s["fine_until"], s["refine"])
    rep = EstimateReport("coming_down", cfg)
    rows = []
    for pr in s["probs"]:
        q = prof.quantiles[pr]
        for a, v in zip(s["magnitudes"], q):
            rep.add_row(float(v), (float(v), float(v)), s["replicas"], magnitude=a, quantile=pr)
            rows.append((a, pr, float(v)))
        ratio = float(np.max(q) / np.min(q))
        rep.fits[f"ratio_q{pr}"] = ratio
        rep.add_verdict(f"matched quantile {pr} ratio < {s['max_ratio']}", ratio < s["max_ratio"],
                        s["max_ratio"] - ratio)
    files = {"plot_coming_down.csv": _csv(["magnitude", "quantile", "value"], rows)}
    return _report_files(rep, files), rep.passed


def _eta(value: str, cfg, s) -> tuple[float, dict | None]:
    if value == "calibrate":
        cal = calibrate_eta(_grid(cfg), s["m"], s["alpha"], s["calibration_replicas"],
                            cfg["run"]["base_seed"], 0.01)
        return cal.eta, cal.as_dict()
    try:
        v = float(value)
    except ValueError:
        raise ConfigError(f"verify.eta must be a number, inf or 'calibrate', got {value!r}") \
            from None
    if not v > 0:
        raise ConfigError("verify.eta must be positive")
    return v, None


def run_verify(cfg, executor=None):
    """Property suite at desk scale; one verdict per check."""
    s = section(cfg, "verify")
    grid = _grid(cfg)
    seed = cfg["run"]["base_seed"]
    dt = s["dt"]
    rep = EstimateReport("verify", cfg)
    rng = np.random.default_rng(seed)

    # spectral sanity: Parseval and a product estimate
    a = rng.standard_normal((grid.N, grid.N))
    f = Field(grid, a)
    gap = abs(np.mean(a * a) * grid.L**2 - float(grid.l2sq(f.half)))
    rep.add_verdict("Parseval", gap <= 1e-10 * np.mean(a * a), 1e-10 - gap)
    pb = multiplicative_inequality_check(f, Field(grid, rng.standard_normal((grid.N, grid.N))),
                                         -0.3, 0.5)
    rep.fits["product_ratio"] = pb.ratio
    rep.add_verdict("product estimate ratio finite", _finite(pb.ratio), None)

    # Wick moments
    for mc in wick_moments(grid, s["m"], s["wick_t"], s["wick_t"], s["wick_replicas"], seed,
                           s["wick_constant_scale"]):
        rep.add_row(mc.estimate, (mc.estimate - 3 * mc.se, mc.estimate + 3 * mc.se),
                    s["wick_replicas"], check=mc.name, target=mc.target)
        rep.add_verdict(f"Wick moment {mc.name}", mc.passes(3.0), 3.0 - abs(mc.z))

    # stopping barrier
    eta, cal = _eta(s["eta"], cfg, s)
    if cal is not None:
        rep.fits["calibration"] = cal
    stop = StoppingConfig(eta, s["theta"], s["alpha"], s["eps"]).validate()

    # energy inequality on restart trajectories
    lc = choose_lambda(s["alpha"])
    Re = s["energy_replicas"]
    tr = simulate(grid, Phi4Model(s["m"]), np.zeros((grid.N, grid.N)), s["energy_T"], dt,
                  [NoiseStream(seed, 10_000_000 + r) for r in range(Re)], stopping=stop)
    h = grid.fwd(rng.standard_normal((grid.N, grid.N)))
    ec = verify_energy_inequality(tr, h, lc.lam, s["alpha"])
    rep.fits["energy"] = {"lambda": lc.lam, "c_alpha": lc.c_alpha,
                          "min_interval_margin": float(ec.interval_margin.min()),
                          "min_chained_margin": float(ec.chained_margin.min()),
                          "c_empirical_max": float(ec.c_empirical.max())}
    rep.add_verdict("energy inequality", ec.passed, float(ec.interval_margin.min()) - 1 / 1.05)

    # finite differences against the tangent flow
    f0 = Field.from_function(grid, _fd_profile)
    hh = Field.from_function(grid, _fd_direction)
    errs = [finite_diff_check(f0, hh, e, s["fd_T"], dt, NoiseStream(seed, 20_000_000)).rel_error
            for e in s["fd_eps"]]
    rep.fits["finite_difference"] = dict(zip(map(str, s["fd_eps"]), errs))
    dec = all(b < a for a, b in zip(errs, errs[1:]))
    rep.add_verdict("finite difference decreasing in eps", dec, None)
    rep.add_verdict("finite difference error <= 1e-3", errs[-1] <= 1e-3, 1e-3 - errs[-1])

    # counting-process tails
    # N(t) needs the first restart at or after t, at most theta later
    T = round((max(s["tail_times"]) + s["theta"]) / dt + 1) * dt
    recs = simulate_restarts(grid, s["m"], T, dt, stop,
                             [NoiseStream(seed, 30_000_000 + r) for r in range(s["tail_replicas"])])
    for t in s["tail_times"]:
        n = 1
        while True:
            te = tail_estimate(recs, t, n, s["theta"])
            if te.count < 5:
                break
            rep.add_row(te.p_hat, te.ci, te.samples, check="tail", t=t, level=n, bound=te.bound)
            rep.add_verdict(f"tail P(N({t}) >= {n})", te.passes, te.bound - te.ci[0])
            n += 1
    if math.isinf(eta):
        exact = all(r.N(t) == _cap_count(t, s["theta"], dt) for r in recs for t in s["tail_times"])
        rep.add_verdict("eta = inf: N(t) equals the deterministic cap count", exact, None)

    # Bakry-Emery identity, Gaussian control against the closed form
    sim = _sim(cfg, dt)
    F = _functionals(grid, ["linear"])[0]
    be = be_identity_check(F, np.zeros((grid.N, grid.N)), s["be_t"],
                           be_s_grid(s["be_t"], 4, 2), s["be_replicas"], sim,
                           Phi4Model(s["m"], coupling=0.0), s["be_outer"], s["be_inner"], executor)
    exact = gaussian_variance(grid, F.hs[0], s["m"], s["be_t"])
    for side, ci in (("lhs", be.lhs), ("rhs", be.rhs)):
        tol = 3 * ci.se + 1e-12 * abs(exact)
        rep.add_verdict(f"Bakry-Emery Gaussian {side}", abs(ci.mean - exact) <= tol,
                        tol - abs(ci.mean - exact), exact=exact)
    return _report_files(rep), rep.passed


def _cap_count(t: float, theta: float, dt: float) -> int:
    """N(t) when every interval is capped: restarts every ceil(theta/dt) steps."""
    cap = max(1, int(math.ceil(theta / dt - 1e-9)))
    j = int(round(t / dt))
    return (j - 1) // cap + 1 if j > 0 else 1


def _fd_profile(x, y):
    return np.sin(2 * np.pi * x) + 0.5 * np.cos(2 * np.pi * y)


def _fd_direction(x, y):
    return np.cos(2 * np.pi * (x + y)) + 0.3 * np.sin(4 * np.pi * x)


EXPERIMENTS = {
    "calibrate": run_calibrate,
    "contraction": run_contraction,
    "spectral_gap": run_spectral_gap,
    "verify": run_verify,
    "be_check": run_be_check,
    "coming_down": run_coming_down,
}


# -- coordinator ---------------------------------------------------------------------------

@contextmanager
def worker_pool(workers: int):
    if workers <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield ex


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def execute(experiment: str, cfg: dict, workers: int = 1) -> tuple[dict[str, bytes], bool]:
    """Run one experiment in memory."""
    if experiment not in EXPERIMENTS:
        raise RunError(f"unknown experiment {experiment!r}")
    with worker_pool(workers) as ex:
        return EXPERIMENTS[experiment](cfg, ex)


def _stream_specs(cfg) -> dict:
    return {"generator": "philox4x64", "key": ["base_seed", "replica_id"],
            "counter": ["0", "event", "0", "lane"], "base_seed": cfg["run"]["base_seed"]}


def write_run(out, experiment: str, cfg: dict, files: dict[str, bytes], passed: bool,
              config_path=None, config_sha=None, force: bool = False) -> dict:
    """Write outputs and the manifest; refuses to touch a used directory without ``force``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    existing = [p for p in [MANIFEST, *files] if (out / p).exists()]
    if existing and not force:
        raise RunError(f"{out} already holds {existing[0]}; pass --force to overwrite")
    inventory = {}
    for name in sorted(files):
        (out / name).write_bytes(files[name])
        inventory[name] = sha256(files[name])
    manifest = {
        "artifact_version": __version__,
        "experiment": experiment,
        "config": cfg,
        "config_path": None if config_path is None else str(Path(config_path).resolve()),
        "config_sha256": config_sha,
        "streams": _stream_specs(cfg),
        "files": inventory,
        "passed": bool(passed),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def replay(manifest_path, workers: int = 1) -> tuple[bool, str]:
    """Re-execute a manifest and compare output hashes.

    The config file named in the manifest must still hash to the recorded
    value; the run itself uses the config echo stored in the manifest.
    """
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / MANIFEST
    man = json.loads(mpath.read_text())
    if man.get("config_path"):
        cpath = Path(man["config_path"])
        if not cpath.is_file():
            return False, f"config {cpath} referenced by the manifest is missing"
        _, sha = load_config(cpath)
        if sha != man["config_sha256"]:
            return False, f"config {cpath} changed since the run (sha256 mismatch)"
    cfg = man["config"]
    files, _ = execute(man["experiment"], cfg, workers)
    for name in sorted(set(man["files"]) | set(files)):
        if name not in files:
            return False, f"replay did not produce {name}"
        if name not in man["files"]:
            return False, f"replay produced unexpected {name}"
        if sha256(files[name]) != man["files"][name]:
            return False, f"first divergent file: {name}"
    return True, f"{len(files)} files reproduced bit-exactly"


def resolve_out(flag: str | None) -> Path:
    value = flag or os.environ.get("PHI4FLOW_OUT")
    if not value:
        raise RunError("no output directory: pass --out or set PHI4FLOW_OUT")
    return Path(value)


def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("PHI4FLOW_WORKERS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise RunError(f"PHI4FLOW_WORKERS must be an integer, got {env!r}") from None


def scratch_dir() -> Path:
    return Path(tempfile.mkdtemp(prefix="phi4flow-"))


__all__ = ["EXPERIMENTS", "execute", "write_run", "replay", "RunError", "parse_config"]

"""Batch experiment CLI.

Subcommands run named pipelines over the library modules from a flat
key=value config file, write a JSON summary plus CSV tables (and figures on
request) into the output directory, cache spectral bases, and record a
manifest with content hashes.  `verify` re-checks stored outputs against the
hard invariants.

Result payloads (summary.json and the CSVs) are byte-deterministic for a
fixed (config, seed); the manifest carries the wall clock and is excluded
from that guarantee, as are cached basis archives (zip timestamps).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import grid, observability, shape_design, smallness, spectral, time_optimal

_REQUIRED = object()

_COMMON = {
    "lx": (float, lambda v: v > 0),
    "ly": (float, lambda v: v > 0),
    "nx": (int, lambda v: v >= 4),
    "ny": (int, lambda v: v >= 4),
    "t_horizon": (float, lambda v: v > 0),
    "nt": (int, lambda v: v >= 2),
    "j_count": (int, lambda v: v >= 1),
    "method": (str, lambda v: v in ("auto", "dense", "iterative")),
}

_MASK = {
    "mask": (str, lambda v: v in ("ball", "random")),
    "ball_cx": (float, lambda v: True),
    "ball_cy": (float, lambda v: True),
    "ball_r": (float, lambda v: v > 0),
    "fraction": (float, lambda v: 0 < v < 1),
}


def _floats(text: str) -> tuple:
    return tuple(float(p) for p in text.split(","))


_SCHEMAS = {
    "eigen": {**_COMMON},
    "spectral": {**_COMMON, **_MASK,
                 "cutoff_counts": (lambda s: tuple(int(p) for p in s.split(",")),
                                   lambda v: all(c >= 1 for c in v)),
                 "restarts": (int, lambda v: v >= 8),
                 "seed": (int, lambda v: True)},
    "observe": {**_COMMON, **_MASK,
                "steps": (str, lambda v: v in ("all", "even", "firsthalf")),
                "c_interp": (float, lambda v: v > 0),
                "m_max": (int, lambda v: v >= 1),
                "iters": (int, lambda v: v >= 1),
                "seed": (int, lambda v: True)},
    "shape": {**_COMMON,
              "L": (float, lambda v: 0 < v < 1),
              "j_lp": (int, lambda v: v >= 1),
              "u0": (_floats, lambda v: len(v) >= 1),
              "mc_samples": (int, lambda v: v >= 100),
              "mc_law": (str, lambda v: v in ("gaussian", "bernoulli")),
              "seed": (int, lambda v: True)},
    "timeopt": {**_COMMON, **_MASK,
                "u0": (_floats, lambda v: len(v) >= 1),
                "r": (lambda s: np.inf if s == "inf" else float(s),
                      lambda v: v >= 1),
                "bound": (float, lambda v: v > 0),
                "bracket_tol": (float, lambda v: v > 0),
                "iters": (int, lambda v: v >= 1),
                "seed": (int, lambda v: True)},
}

_DEFAULTS = {
    "method": "auto", "mask": "ball", "ball_cx": None, "ball_cy": None,
    "ball_r": None, "fraction": 0.1, "restarts": 8, "steps": "all",
    "c_interp": 1.0, "m_max": 6, "iters": 200, "u0": (1.0,),
    "r": 2.0, "bound": 1.0, "bracket_tol": 1e-3, "mc_samples": 10000,
    "mc_law": "gaussian", "j_lp": None,  # None: min(5, j_count)
    "cutoff_counts": (2, 4, 6, 8),
}

_SEED_REQUIRED = {"spectral", "shape", "observe"}


class ConfigError(ValueError):
    pass


def parse_config(path: str) -> dict:
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def validate_config(kind: str, raw: dict, seed_flag: int | None) -> dict:
    schema = _SCHEMAS[kind]
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown field {key!r} for kind {kind!r}")
        conv, check = schema[key]
        try:
            typed = conv(value)
        except Exception as exc:
            raise ConfigError(f"field {key!r}: cannot parse {value!r}") from exc
        if not check(typed):
            raise ConfigError(f"field {key!r}: value {value!r} out of range")
        out[key] = typed
    if seed_flag is not None:
        out["seed"] = seed_flag
    for key in schema:
        if key in out:
            continue
        if key in _DEFAULTS:
            out[key] = _DEFAULTS[key]
        elif key == "seed":
            if kind in _SEED_REQUIRED:
                raise ConfigError(f"field 'seed' is required for kind {kind!r}")
            out[key] = 0
        else:
            raise ConfigError(f"missing required field {key!r} for kind {kind!r}")
    return out


def _config_hash(kind: str, cfg: dict) -> str:
    canon = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(f"{kind}\n{canon}".encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2,
                               default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _domain(cfg: dict) -> grid.RectDomain:
    return grid.build_domain(cfg["lx"], cfg["ly"], cfg["nx"], cfg["ny"],
                             cfg["t_horizon"], cfg["nt"])


def _basis_cached(dom: grid.RectDomain, cfg: dict, out: Path) -> spectral.SpectralBasis:
    cache = out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256(
        repr((dom.key(), cfg["j_count"], cfg["method"])).encode()).hexdigest()[:16]
    path = cache / f"basis_{key}.npz"
    if path.exists():
        try:
            basis = spectral.load_basis(path)
            _check_basis(basis)
            return basis
        except Exception as exc:  # corrupt cache: recompute
            warnings.warn(f"basis cache {path.name} rejected ({exc}); recomputing")
    method = cfg["method"]
    if method == "auto":
        method = "dense" if dom.n_x * dom.n_y <= 4096 else "iterative"
    basis = spectral.solve_modes(dom, j_count=cfg["j_count"], method=method)
    spectral.save_basis(basis, path)
    return basis


def _check_basis(basis: spectral.SpectralBasis) -> None:
    g = smallness.gram(basis, grid.mask_full(basis.domain),
                       basis.lams[-1] + 1.0).matrix
    dev = float(np.max(np.abs(g - np.eye(len(g)))))
    if dev > 1e-8:
        raise RuntimeError(f"orthonormality deviation {dev}")
    if np.any(np.diff(basis.lams) < 0):
        raise RuntimeError("eigenvalues not sorted")


def _spatial_mask(dom: grid.RectDomain, cfg: dict) -> grid.SpatialMask:
    if cfg["mask"] == "ball":
        cx = cfg["ball_cx"] if cfg["ball_cx"] is not None else dom.lx / 2
        cy = cfg["ball_cy"] if cfg["ball_cy"] is not None else dom.ly / 2
        r = cfg["ball_r"] if cfg["ball_r"] is not None else min(dom.lx, dom.ly) / 6
        return grid.mask_ball(dom, (cx, cy), r)
    return grid.mask_random(dom, cfg["fraction"], cfg["seed"])


def _steps(dom: grid.RectDomain, pattern: str) -> np.ndarray:
    steps = np.ones(dom.n_t, dtype=bool)
    if pattern == "even":
        steps[1::2] = False
    elif pattern == "firsthalf":
        steps[dom.n_t // 2:] = False
    return steps


# ---------------------------------------------------------------------------
# pipelines


def _run_eigen(cfg, out, figures):
    dom = _domain(cfg)
    basis = _basis_cached(dom, cfg, out)
    _write_csv(out / "eigenvalues.csv", ["j", "lambda"],
               [(j + 1, float(l)) for j, l in enumerate(basis.lams)])
    files = ["eigenvalues.csv"]
    summary = {"kind": "eigen", "method": basis.method,
               "eigenvalues": basis.lams,
               "modes_at_or_below_last": int(basis.count_below(basis.lams[-1] + 1e-9))}
    if figures:
        from . import report
        report.save_spectrum(basis.lams, out / "spectrum.png")
        files.append("spectrum.png")
    return summary, files


def _run_spectral(cfg, out, figures):
    dom = _domain(cfg)
    basis = _basis_cached(dom, cfg, out)
    mask = _spatial_mask(dom, cfg)
    rows, pairs = [], []
    for count in cfg["cutoff_counts"]:
        if count > basis.size:
            raise ConfigError(f"field 'cutoff_counts': {count} exceeds j_count")
        cutoff = float(basis.lams[count - 1]) + 1e-9
        c2, _ = smallness.l2_constant(basis, mask, cutoff)
        est = smallness.l1_constant_estimate(basis, mask, cutoff,
                                             restarts=cfg["restarts"],
                                             seed=cfg["seed"])
        floor = c2 / np.sqrt(mask.measure)
        rows.append((cutoff, float(c2), est["c1_lower"], float(floor),
                     int(est["mode_count"])))
        pairs.append((cutoff, c2))
    fit = smallness.growth_fit(pairs) if len(pairs) >= 3 else None
    _write_csv(out / "constants.csv",
               ["cutoff", "c2", "c1_lower", "cauchy_schwarz_floor", "modes"],
               rows)
    (out / "mask.txt").write_text(grid.mask_to_text(mask))
    files = ["constants.csv", "mask.txt"]
    summary = {"kind": "spectral", "mask_measure": mask.measure,
               "rows": [list(r) for r in rows]}
    if fit is not None:
        summary["fit"] = {"c0": fit.c0, "c1": fit.c1, "r2": fit.r2}
    if figures:
        from . import report
        ext = (0, dom.lx, 0, dom.ly)
        report.save_mask(mask.indicator, ext, out / "mask.png")
        if fit is not None:
            report.save_fit([np.sqrt(p[0]) for p in pairs],
                            [np.log(p[1]) for p in pairs], fit.c1, fit.c0,
                            out / "growth_fit.png", "sqrt(cutoff)", "log c2")
        files += ["mask.png"] + (["growth_fit.png"] if fit is not None else [])
    return summary, files


def _run_observe(cfg, out, figures):
    dom = _domain(cfg)
    basis = _basis_cached(dom, cfg, out)
    mask = _spatial_mask(dom, cfg)
    stmask = grid.cylinder_mask(mask, _steps(dom, cfg["steps"]))
    e = grid.good_time_set(stmask)
    c = cfg["c_interp"]
    mu = 2.0 * (c + 1.0) / (2.0 * c + 1.0)
    sched = observability.build_schedule(e, mu, cfg["m_max"])
    rng = np.random.Generator(np.random.Philox(cfg["seed"]))
    a0 = rng.standard_normal(basis.size)
    a0 /= np.linalg.norm(a0)
    rep = observability.telescoping_bound(basis, stmask, sched, c, a0)
    ctrl = observability.dual_null_control(basis, a0, stmask, iters=cfg["iters"])
    _write_csv(out / "intervals.csv", ["m", "lhs", "rhs", "gap"],
               [(r["m"], float(r["lhs"]), float(r["rhs"]), float(r["gap"]))
                for r in rep.per_interval])
    _write_csv(out / "descent.csv", ["iteration", "objective"],
               [(k, float(v)) for k, v in ctrl["history"]])
    files = ["intervals.csv", "descent.csv"]
    z_t = float(np.linalg.norm(a0 * np.exp(-basis.lams * dom.t_horizon)))
    summary = {"kind": "observe", "c_obs": rep.c_obs, "c_used": rep.c_used,
               "mask_integral": rep.mask_integral,
               "direct_ratio": z_t / rep.mask_integral,
               "remainder": rep.remainder, "mu": mu,
               "schedule": {"l": sched.l, "l1": sched.l1, "m_max": sched.m_max,
                            "snap_distance": sched.snap_distance},
               "good_set_measure": e.measure,
               "control_residual_rel": ctrl["residual_rel"],
               "control_bound": ctrl["m_hat"], "state": a0}
    if figures:
        from . import report
        report.save_mask(stmask.indicator[:, :, 0], (0, dom.lx, 0, dom.ly),
                         out / "mask_t0.png", title="mask at t=0")
        report.save_history(ctrl["history"], out / "descent.png")
        files += ["mask_t0.png", "descent.png"]
    return summary, files


def _run_shape(cfg, out, figures):
    dom = _domain(cfg)
    basis = _basis_cached(dom, cfg, out)
    j_lp = cfg["j_lp"] if cfg["j_lp"] is not None else min(5, basis.size)
    if j_lp > basis.size:
        raise ConfigError("field 'j_lp': exceeds j_count")
    cfg = {**cfg, "j_lp": j_lp}
    sol = shape_design.solve_relaxed_design(basis, dom.t_horizon, cfg["L"], j_lp)
    design = sol["design"]
    cert = shape_design.truncation_certificate(basis, dom.t_horizon, design,
                                               cfg["j_lp"], sol["log_objective"])
    a_modal = np.asarray(cfg["u0"], dtype=float)
    mc = shape_design.randomized_constant_mc(basis, design, dom.t_horizon,
                                             a_modal, cfg["mc_samples"],
                                             cfg["seed"], cfg["mc_law"])
    table = sol["weights"]
    masses = shape_design._modal_cell_mass(basis, basis.size) @ design.values.ravel()
    _write_csv(out / "modal.csv", ["j", "log_gamma", "design_mass"],
               [(j + 1, float(shape_design.modal_weights(basis, dom.t_horizon,
                                                         basis.size).log_gamma[j]),
                 float(masses[j])) for j in range(basis.size)])
    xc, yc = dom.cell_centers()
    _write_csv(out / "design.csv", ["x", "y", "density"],
               [(float(x), float(y), float(v)) for x, y, v in
                zip(xc.ravel(), yc.ravel(), design.values.ravel())])
    files = ["modal.csv", "design.csv"]
    summary = {"kind": "shape", "objective": sol["objective"],
               "log_objective": sol["log_objective"],
               "duality_gap_rel": sol["duality_gap_rel"],
               "fractional_count": sol["fractional_count"],
               "active_modes": sol["active_modes"], "L": cfg["L"],
               "j_lp": cfg["j_lp"], "design_mass": design.mass,
               "truncation": {"ok": cert["ok"],
                              "min_margin_log": cert["min_margin_log"]
                              if np.isfinite(cert["min_margin_log"]) else None,
                              "flag": cert["flag"]},
               "mc": {k: mc[k] for k in
                      ("mc_mean", "closed_form", "z_score", "samples", "law", "flag")}}
    if figures:
        from . import report
        report.save_design(design.values, (0, dom.lx, 0, dom.ly),
                           out / "design.png")
        files.append("design.png")
    return summary, files


def _run_timeopt(cfg, out, figures):
    dom = _domain(cfg)
    basis = _basis_cached(dom, cfg, out)
    mask = _spatial_mask(dom, cfg)
    u0 = np.zeros(basis.size)
    vals = np.asarray(cfg["u0"], dtype=float)
    u0[:len(vals)] = vals
    res = time_optimal.minimal_time(basis, u0, cfg["bound"], mask, cfg["r"],
                                    bracket_tol=cfg["bracket_tol"],
                                    iters=cfg["iters"])
    _write_csv(out / "m_min_curve.csv", ["tau", "m_min"],
               [(float(t), float(m)) for t, m in res.curve])
    files = ["m_min_curve.csv"]
    summary = {"kind": "timeopt", "tau_star": res.tau_star,
               "bound": res.bound, "r": "inf" if res.r == np.inf else res.r,
               "bracket": list(res.bracket),
               "residual_rel": res.residual_rel,
               "bang_bang": res.bang_bang, "flag": res.flag}
    if figures:
        from . import report
        report.save_curve(res.curve, out / "m_min_curve.png", "tau", "M_min",
                          logy=True)
        files.append("m_min_curve.png")
    return summary, files


_PIPELINES = {"eigen": _run_eigen, "spectral": _run_spectral,
              "observe": _run_observe, "shape": _run_shape,
              "timeopt": _run_timeopt}


def run(kind: str, config_path: str, out_dir: str, seed: int | None = None,
        figures: bool = False) -> dict:
    cfg = validate_config(kind, parse_config(config_path), seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary, files = _PIPELINES[kind](cfg, out, figures)
    summary["config"] = {k: ("inf" if v == np.inf else v)
                         for k, v in sorted(cfg.items())}
    _write_json(out / "summary.json", summary)
    files = ["summary.json"] + files
    manifest = {"kind": kind, "config_hash": _config_hash(kind, cfg),
                "outputs": {name: _sha256(out / name) for name in files},
                "wall_clock_s": time.perf_counter() - t0,
                "payload_files": [f for f in files if not f.endswith(".png")]}
    _write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# verification


def verify(out_dir: str) -> list[tuple[str, bool, str]]:
    """Re-check stored outputs: hashes, cached bases, per-kind invariants."""
    out = Path(out_dir)
    results = []
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        return [("manifest present", False, "manifest.json missing")]
    manifest = json.loads(manifest_path.read_text())
    for name, digest in manifest["outputs"].items():
        path = out / name
        if not path.exists():
            results.append((f"file {name}", False, "missing"))
        else:
            ok = _sha256(path) == digest
            results.append((f"hash {name}", ok, "" if ok else "content changed"))
    for npz in sorted((out / "cache").glob("basis_*.npz")) if (out / "cache").exists() else []:
        try:
            basis = spectral.load_basis(npz)
            _check_basis(basis)
            results.append((f"basis {npz.name} orthonormal", True, ""))
        except Exception as exc:
            results.append((f"basis {npz.name} orthonormal", False, str(exc)))
    summary_path = out / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        results += _verify_summary(summary)
    return results


def _verify_summary(summary: dict) -> list[tuple[str, bool, str]]:
    kind = summary.get("kind")
    checks = []
    if kind == "eigen":
        lams = summary["eigenvalues"]
        ok = all(lams[i] <= lams[i + 1] for i in range(len(lams) - 1))
        checks.append(("eigenvalues sorted", ok, ""))
        checks.append(("eigenvalues positive", min(lams) > 0, ""))
    elif kind == "spectral":
        ok = all(r[2] >= r[3] * (1 - 1e-12) for r in summary["rows"])
        checks.append(("c1 above Cauchy-Schwarz floor", ok, ""))
        c2s = [r[1] for r in summary["rows"]]
        checks.append(("c2 nondecreasing in cutoff",
                       all(a <= b * (1 + 1e-12) for a, b in zip(c2s, c2s[1:])), ""))
    elif kind == "observe":
        ok = summary["c_obs"] >= summary["direct_ratio"] * (1 - 1e-12)
        checks.append(("telescoped constant dominates direct ratio", ok, ""))
    elif kind == "shape":
        checks.append(("duality gap <= 1e-7",
                       summary["duality_gap_rel"] <= 1e-7, ""))
        checks.append(("fractional cells <= J+1",
                       summary["fractional_count"] <= summary["j_lp"] + 1, ""))
        checks.append(("MC z-score within +-4",
                       abs(summary["mc"]["z_score"]) <= 4, ""))
    elif kind == "timeopt":
        checks.append(("steering residual <= 1e-2",
                       not np.isfinite(summary["residual_rel"])
                       or summary["residual_rel"] <= 1e-2, ""))
    return checks


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stokeslab",
        description="Stokes observability and control experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in _PIPELINES:
        p = sub.add_parser(kind, help=f"run the {kind} pipeline")
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--figures", action="store_true",
                       help="render figures next to the CSV output")
    v = sub.add_parser("verify", help="re-check stored outputs")
    v.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    if getattr(args, "threads", None):
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(args.threads)
        except ImportError:
            warnings.warn("threadpoolctl not installed; --threads ignored")

    if args.command == "verify":
        results = verify(args.out)
        failed = 0
        for name, ok, note in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name}{': ' + note if note else ''}")
        failed = sum(1 for _, ok, _ in results if not ok)
        print(f"{len(results) - failed}/{len(results)} checks passed")
        return 1 if failed else 0

    try:
        manifest = run(args.command, args.config, args.out, args.seed,
                       args.figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(manifest['outputs'])} files to {args.out} "
          f"(config {manifest['config_hash'][:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())

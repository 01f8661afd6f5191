"""Acceptance gate: one criterion per test, one pass/fail line per criterion.

Lines are collected in ACCEPTANCE_LINES and echoed in the terminal summary by
a conftest hook, so they survive pytest's output capture; soft (reported,
non-gating) metrics are included on the line.
"""

import numpy as np
import pytest

ACCEPTANCE_LINES = []

from stokeslab import cli
from stokeslab.grid import (
    build_domain,
    cylinder_mask,
    good_time_set,
    mask_ball,
    mask_full,
    spacetime_from_slices,
)
from stokeslab.observability import (
    build_schedule,
    dual_null_control,
    mask_l1_per_step,
    pointwise_rnorm,
    telescoping_bound,
)
from stokeslab.shape_design import (
    _modal_cell_mass,
    constant_density,
    modal_weights,
    randomized_constant_mc,
    solve_relaxed_design,
    truncation_certificate,
)
from stokeslab.smallness import growth_fit, gram, l1_constant_estimate, l1_norm_on_mask, l2_constant
from stokeslab.spectral import solve_modes
from stokeslab.time_optimal import RNorm, duality_map, min_norm_control, minimal_time


def _report(num, name, ok, detail=""):
    line = f"[ACCEPTANCE {num}] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_eigen_suite():
    import time
    t0 = time.perf_counter()
    lam1 = {}
    checks = []
    for n in (16, 32, 64):
        dom = build_domain(1.0, 1.0, n, n, 1.0, 8)
        b = solve_modes(dom, j_count=10, method="dense")
        lam1[n] = float(b.lams[0])
        if n == 16:
            it = solve_modes(dom, j_count=10, method="iterative")
            agree = float(np.max(np.abs(b.lams[:10] - it.lams[:10]) / b.lams[:10]))
            checks.append(("dense vs iterative", agree < 1e-8))
            g = gram(b, mask_full(dom), b.lams[-1] + 1).matrix
            ortho = float(np.max(np.abs(g - np.eye(10))))
            checks.append(("orthonormality", ortho < 1e-8))
            div = 0.0
            for j in range(b.size):
                u, v = b.u[j], b.v[j]
                d = ((u[1:, :] - u[:-1, :]) / dom.h_x
                     + (v[:, 1:] - v[:, :-1]) / dom.h_y)
                div = max(div, float(np.max(np.abs(d))))
            checks.append(("divergence", div <= 1e-14))
    ratio = (lam1[16] - lam1[32]) / (lam1[32] - lam1[64])
    checks.append(("Richardson ratio", 3.2 <= ratio <= 4.8))
    elapsed = time.perf_counter() - t0
    checks.append(("runtime <= 2 min", elapsed <= 120))
    ok = all(c[1] for c in checks)
    _report(1, "eigen suite", ok,
            f"richardson={ratio:.3f}, runtime={elapsed:.1f}s, "
            + ", ".join(f"{n}={'ok' if v else 'BAD'}" for n, v in checks))


def test_criterion_2_decay_law(dom, basis):
    rng = np.random.Generator(np.random.Philox(2))
    worst = -np.inf
    t = 0.013
    for cut_idx in (1, 2, 4, 6, 8):
        cutoff = float(basis.lams[cut_idx - 1])
        for _ in range(100):
            a0 = rng.standard_normal(basis.size)
            tail = np.where(basis.lams > cutoff, a0, 0.0)
            lhs = float(np.linalg.norm(tail * np.exp(-basis.lams * t)))
            rhs = np.exp(-cutoff * t) * float(np.linalg.norm(a0))
            worst = max(worst, lhs - rhs)
    _report(2, "modal tail decay", worst <= 1e-12, f"max excess={worst:.2e}")


def test_criterion_3_spectral_constants(dom, basis, ball):
    cutoff = float(basis.lams[5]) + 1e-9
    c2_full, _ = l2_constant(basis, mask_full(dom), cutoff)
    ok_full = abs(c2_full - 1.0) <= 1e-4

    ok_monotone = True
    prev = -np.inf
    for r in np.linspace(0.31, 0.13, 10):
        c2, _ = l2_constant(basis, mask_ball(dom, (0.5, 0.35), float(r)), cutoff)
        if c2 < prev * (1 - 1e-12):
            ok_monotone = False
        prev = c2

    ok_floor = True
    pairs = []
    for count in (2, 4, 6, 8):
        cut = float(basis.lams[count - 1]) + 1e-9
        c2, _ = l2_constant(basis, ball, cut)
        est = l1_constant_estimate(basis, ball, cut, restarts=8, seed=3)
        if est["c1_lower"] < c2 / np.sqrt(ball.measure) * (1 - 1e-12):
            ok_floor = False
        pairs.append((cut, c2))
    fit = growth_fit(pairs)

    basis2 = solve_modes(dom, j_count=2)
    est2 = l1_constant_estimate(basis2, ball, float(basis2.lams[1]) + 1e-9,
                                restarts=8, seed=5)
    thetas = np.linspace(0.0, np.pi, 50001)
    brute = 1.0 / min(l1_norm_on_mask(basis2, np.array([np.cos(t), np.sin(t)]),
                                      ball) for t in thetas)
    ok_brute = abs(est2["c1_lower"] - brute) / brute <= 1e-3

    ok = ok_full and ok_monotone and ok_floor and ok_brute
    _report(3, "spectral constants", ok,
            f"c2(full)-1={c2_full - 1:.1e}, fit R2={fit.r2:.3f} (soft), "
            f"2-mode rel err={abs(est2['c1_lower'] - brute) / brute:.1e}")


def test_criterion_4_telescoping():
    dom = build_domain(1.0, 0.7, 16, 12, 1.0, 256)
    steps = np.ones(dom.n_t, dtype=bool)
    late = np.arange(dom.n_t // 2, dom.n_t)
    steps[late[late % 5 < 2]] = False  # 80% coverage, dense early
    ball = mask_ball(dom, (0.5, 0.35), 0.15)
    st = cylinder_mask(ball, steps)
    e = good_time_set(st)
    coverage = e.measure / dom.t_horizon

    c = 1.0
    mu = 2.0 * (c + 1.0) / (2.0 * c + 1.0)
    ok_mu = abs(mu - 4.0 / 3.0) <= 1e-15
    sched = build_schedule(e, mu, 12)
    ok_ids = True
    for m in range(1, sched.m_max + 3):
        expect = sched.l + mu ** (-(m - 1.0)) * (sched.l1 - sched.l)
        if abs(sched.ls[m - 1] - expect) > 1e-12:
            ok_ids = False
    for m in range(sched.m_max + 1):
        expect = sched.ls[m + 1] + (sched.ls[m] - sched.ls[m + 1]) / 6.0
        if abs(sched.taus[m] - expect) > 1e-12:
            ok_ids = False
    ok_density = True
    for m in range(sched.m_max):
        gap = sched.ls[m] - sched.ls[m + 1]
        if e.intersect_measure(sched.ls[m + 1], sched.ls[m]) < gap / 3 - 1e-12:
            ok_density = False

    basis = solve_modes(dom, j_count=6)
    rng = np.random.Generator(np.random.Philox(4))
    ok_dom = True
    for _ in range(20):
        a0 = rng.standard_normal(basis.size)
        a0 /= np.linalg.norm(a0)
        rep = telescoping_bound(basis, st, sched, c, a0)
        direct = (float(np.linalg.norm(a0 * np.exp(-basis.lams * dom.t_horizon)))
                  / rep.mask_integral)
        if rep.c_obs < direct * (1 - 1e-12):
            ok_dom = False
    ok = ok_mu and ok_ids and ok_density and ok_dom and coverage >= 0.8
    _report(4, "telescoping machinery", ok,
            f"coverage={coverage:.2f}, depth={sched.m_max}, mu={mu:.6f}")


def test_criterion_5_null_control(dom, basis, ball):
    cyl = cylinder_mask(ball)
    u1 = np.zeros(basis.size)
    u1[0] = 1.0
    out1 = dual_null_control(basis, u1, cyl, iters=200)
    ok_single = out1["residual_rel"] <= 1e-3

    steps = np.zeros(dom.n_t, dtype=bool)
    steps[::2] = True
    steps[: dom.n_t // 2] = True
    st = cylinder_mask(ball, steps)
    u5 = np.zeros(basis.size)
    u5[:5] = [1.0, -0.5, 0.3, 0.2, -0.1]
    out5 = dual_null_control(basis, u5, st, iters=200)
    ok_five = out5["residual_rel"] <= 1e-2

    # hard container invariants on the emitted controls
    ok_inv = True
    for out in (out1, out5):
        ctrl = out["control"]
        if np.any(ctrl.values[~ctrl.stmask.indicator] != 0.0):
            ok_inv = False
        on = ctrl.values[ctrl.stmask.indicator]
        if on.size and float(np.max(pointwise_rnorm(on, ctrl.r))) > \
                ctrl.bound * (1 + 1e-9):
            ok_inv = False

    # genuinely non-cylindrical mask: the ball drifts across the box
    slices = []
    for k in range(dom.n_t):
        cx = 0.35 + 0.3 * k / (dom.n_t - 1)
        slices.append(mask_ball(dom, (cx, 0.35), 0.15).indicator)
    moving = spacetime_from_slices(dom, slices)
    outm = dual_null_control(basis, u5, moving, iters=200)
    soft_ok = outm["residual_rel"] <= 5e-2

    ok = ok_single and ok_five and ok_inv
    _report(5, "null control", ok,
            f"single={out1['residual_rel']:.1e}, five={out5['residual_rel']:.1e}, "
            f"moving={outm['residual_rel']:.1e} (soft {'ok' if soft_ok else 'MISS'})")


def test_criterion_6_shape_design(dom, basis):
    t_small = 0.005
    sol1 = solve_relaxed_design(basis, t_small, 0.3, 1)
    m = _modal_cell_mass(basis, 1)[0]
    order = np.argsort(-m)
    target = 0.3 * dom.area / dom.cell_area
    k = int(np.floor(target))
    greedy = (m[order[:k]].sum() + (target - k) * m[order[k]]) \
        * modal_weights(basis, t_small, 1).gamma[0]
    ok_greedy = abs(sol1["objective"] - greedy) <= 1e-10 * greedy

    ok_gap = ok_frac = True
    objs = []
    for fraction in (0.1, 0.2, 0.4):
        sol = solve_relaxed_design(basis, t_small, fraction, 5)
        ok_gap &= sol["duality_gap_rel"] <= 1e-7
        ok_frac &= sol["fractional_count"] <= 6
        objs.append(sol["log_objective"])
    ok_mono = objs[0] <= objs[1] <= objs[2]

    des = constant_density(dom, 0.3)
    zs = {}
    for law in ("gaussian", "bernoulli"):
        mc = randomized_constant_mc(basis, des, t_small,
                                    np.array([1.0, -0.5, 0.3]), 10000, 7, law)
        zs[law] = mc["z_score"]
    ok_mc = all(abs(z) <= 4 for z in zs.values())

    solt = solve_relaxed_design(basis, 1.0, 0.3, 5)
    cert = truncation_certificate(basis, 1.0, solt["design"], 5,
                                  solt["log_objective"])
    ok_cert = cert["ok"] and cert["min_margin_log"] >= np.log(10.0)

    ok = ok_greedy and ok_gap and ok_frac and ok_mono and ok_mc and ok_cert
    _report(6, "shape design", ok,
            f"z(gauss)={zs['gaussian']:.2f}, z(bern)={zs['bernoulli']:.2f}, "
            f"cert margin(log)={cert['min_margin_log']:.1f}")


def test_criterion_7_time_optimal(dom, basis, ball):
    rng = np.random.Generator(np.random.Philox(9))
    ok_dual = True
    for r in (1, 1.5, 2, 4, np.inf):
        rp = RNorm(r).conjugate
        for _ in range(20):
            phi = rng.standard_normal(4)
            v, _ = duality_map(phi, r)
            if abs(v @ phi - pointwise_rnorm(phi, rp)) > 1e-10 \
                    or abs(pointwise_rnorm(v, r) - 1.0) > 1e-10:
                ok_dual = False

    u0 = np.zeros(basis.size)
    u0[:3] = [1.0, -0.5, 0.3]
    ms = [min_norm_control(basis, u0, ball, t, 2, iters=120)["m_min"]
          for t in (0.02, 0.04, 0.08, 0.16)]
    ok_mono_tau = all(b <= a * (1 + 1e-12) for a, b in zip(ms, ms[1:]))

    taus, resids, bbs = [], [], []
    results = []
    for bound in (1.0, 2.0, 4.0):
        res = minimal_time(basis, u0, bound, ball, 2, bracket_tol=2e-3,
                           iters=120)
        results.append(res)
        taus.append(res.tau_star)
        resids.append(res.residual_rel)
        bbs.append(res.bang_bang["fraction"])
    ok_mono_m = taus[0] >= taus[1] >= taus[2]
    ok_steer = max(resids) <= 1e-2
    bb_soft = max(bang_bang_fraction for bang_bang_fraction in bbs) <= 0.05

    r1 = minimal_time(basis, u0, 2.0, ball, 2, bracket_tol=2e-3, iters=120)
    ok_det = (r1.tau_star == results[1].tau_star
              and np.array_equal(r1.control.values, results[1].control.values))

    from stokeslab.time_optimal import uniqueness_check
    uq = uniqueness_check(basis, u0, 2.0, ball, 2, 11, 12, bracket_tol=2e-3,
                          iters=120)
    uq_soft = uq["flag"] is None and uq["distance_rel"] <= 1e-2

    ok = ok_dual and ok_mono_tau and ok_mono_m and ok_steer and ok_det
    _report(7, "time optimal", ok,
            f"max resid={max(resids):.1e}, bang-bang={max(bbs):.3f} "
            f"(soft {'ok' if bb_soft else 'MISS'}), inter-seed="
            f"{uq['distance_rel'] if uq['flag'] is None else 'n/a'} "
            f"(soft {'ok' if uq_soft else 'MISS'})")


def test_criterion_8_end_to_end_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("lx=1.0\nly=0.7\nnx=12\nny=8\nt_horizon=0.02\nnt=16\n"
                   "j_count=4\nL=0.3\nmc_samples=500\n")
    m1 = cli.run("shape", str(cfg), str(tmp_path / "a"), seed=5)
    m2 = cli.run("shape", str(cfg), str(tmp_path / "b"), seed=5)
    same_hashes = m1["outputs"] == m2["outputs"]
    same_bytes = all(
        (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in m1["payload_files"])
    ok = same_hashes and same_bytes
    _report(8, "end-to-end determinism", ok,
            f"{len(m1['payload_files'])} payload files byte-identical")

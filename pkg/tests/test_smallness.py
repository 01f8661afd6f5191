import numpy as np
import pytest

from stokeslab.grid import mask_ball, mask_from_indicator, mask_full
from stokeslab.smallness import (
    growth_fit,
    gram,
    l1_constant_estimate,
    l1_norm_on_mask,
    l2_constant,
    smallness_diagnostic,
)
from stokeslab.spectral import solve_modes


def test_full_domain_gram_is_identity(dom, basis):
    g = gram(basis, mask_full(dom), basis.lams[-1] + 1)
    assert abs(g.min_eigenvalue - 1.0) < 1e-10


def test_c2_is_one_on_full_domain(dom, basis):
    c2, _ = l2_constant(basis, mask_full(dom), basis.lams[-1] + 1)
    assert abs(c2 - 1.0) < 1e-4


def test_c2_monotone_under_nested_masks(dom, basis):
    cutoff = float(basis.lams[5]) + 1e-9
    radii = np.linspace(0.31, 0.13, 10)
    prev = -np.inf
    for r in radii:  # shrinking mask, growing constant
        c2, _ = l2_constant(basis, mask_ball(dom, (0.5, 0.35), float(r)), cutoff)
        assert c2 >= prev * (1 - 1e-12)
        prev = c2


def test_c1_floor_and_restart_requirement(dom, basis, ball):
    cutoff = float(basis.lams[5]) + 1e-9
    c2, _ = l2_constant(basis, ball, cutoff)
    est = l1_constant_estimate(basis, ball, cutoff, restarts=8, seed=2)
    assert est["c1_lower"] >= c2 / np.sqrt(ball.measure) * (1 - 1e-12)
    with pytest.raises(ValueError, match="restarts"):
        l1_constant_estimate(basis, ball, cutoff, restarts=4, seed=2)


def test_two_mode_brute_force(dom, ball):
    basis2 = solve_modes(dom, j_count=2)
    cutoff = float(basis2.lams[1]) + 1e-9
    est = l1_constant_estimate(basis2, ball, cutoff, restarts=8, seed=5)
    assert est["mode_count"] == 2
    thetas = np.linspace(0.0, np.pi, 50001)
    vals = [l1_norm_on_mask(basis2, np.array([np.cos(t), np.sin(t)]), ball)
            for t in thetas]
    brute = 1.0 / min(vals)
    assert abs(est["c1_lower"] - brute) / brute < 1e-3


def test_gram_rejects_empty_mask(dom, basis):
    empty = mask_from_indicator(
        dom, np.zeros((dom.n_cells_x, dom.n_cells_y), dtype=bool))
    with pytest.raises(ValueError, match="empty"):
        gram(basis, empty, basis.lams[-1] + 1)


def test_growth_fit_validation():
    with pytest.raises(ValueError):
        growth_fit([(1.0, 2.0), (2.0, 3.0)])  # too few
    with pytest.raises(ValueError):
        growth_fit([(1.0, 2.0), (1.0, 3.0), (2.0, 4.0)])  # duplicate cutoff
    with pytest.raises(ValueError):
        growth_fit([(1.0, 2.0), (2.0, -3.0), (3.0, 4.0)])  # negative constant


def test_growth_fit_recovers_exponential():
    lams = np.array([10.0, 40.0, 90.0, 160.0])
    cs = 2.0 * np.exp(0.3 * np.sqrt(lams))
    fit = growth_fit(list(zip(lams, cs)))
    assert fit.c1 == pytest.approx(0.3, rel=1e-10)
    assert fit.c0 == pytest.approx(np.log(2.0), rel=1e-9)
    assert fit.r2 == pytest.approx(1.0)


def test_smallness_diagnostic(dom, basis):
    big = mask_ball(dom, (0.5, 0.35), 0.2)
    sub = mask_ball(dom, (0.5, 0.35), 0.08)
    a = np.zeros(basis.size)
    a[:4] = [1.0, 0.6, -0.4, 0.2]
    out = smallness_diagnostic(basis, a, big, sub, float(basis.lams[3]), 0.2)
    assert out["sup_ball"] > 0 and out["l1_sub"] > 0
    if out["flag"] is None:
        assert 0.0 < out["theta"] < 1.0
    with pytest.raises(ValueError, match="contained"):
        smallness_diagnostic(basis, a, sub, big, float(basis.lams[3]), 0.2)

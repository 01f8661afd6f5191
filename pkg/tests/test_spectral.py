import numpy as np
import pytest

from stokeslab.grid import build_domain, mask_ball, mask_full
from stokeslab.smallness import gram
from stokeslab.spectral import (
    ModalState,
    assemble_operators,
    derivative_growth_check,
    evolve,
    inertia_below,
    load_basis,
    save_basis,
    solve_modes,
    synthesize_field,
)


def test_operators_symmetric_and_definite(dom):
    a, b = assemble_operators(dom)
    assert abs(a - a.T).max() == 0.0
    assert abs(b - b.T).max() == 0.0
    rng = np.random.Generator(np.random.Philox(1))
    x = rng.standard_normal(a.shape[0])
    assert x @ (b @ x) > 0
    assert x @ (a @ x) > 0


def test_eigenvalues_positive_sorted(basis):
    assert basis.lams[0] > 0
    assert np.all(np.diff(basis.lams) >= 0)


def test_dense_vs_iterative(dom):
    d = solve_modes(dom, j_count=6, method="dense")
    it = solve_modes(dom, j_count=6, method="iterative")
    rel = np.abs(d.lams[:6] - it.lams[:6]) / d.lams[:6]
    assert rel.max() < 1e-8


def test_orthonormality_via_face_quadrature(dom, basis):
    g = gram(basis, mask_full(dom), basis.lams[-1] + 1).matrix
    assert np.max(np.abs(g - np.eye(basis.size))) < 1e-8


def test_divergence_below_roundoff_floor(dom, basis):
    """Quantized stream values keep the discrete cell divergence at the
    division-roundoff floor (exactly zero when h_x == h_y)."""
    hx, hy = dom.h_x, dom.h_y
    for j in range(basis.size):
        u, v = basis.u[j], basis.v[j]
        div = (u[1:, :] - u[:-1, :]) / hx + (v[:, 1:] - v[:, :-1]) / hy
        assert np.max(np.abs(div)) <= 1e-14


def test_divergence_exact_zero_isotropic():
    dom = build_domain(1.0, 1.0, 12, 12, 0.02, 8)
    b = solve_modes(dom, j_count=4)
    h = dom.h_x
    for j in range(b.size):
        u, v = b.u[j], b.v[j]
        div = (u[1:, :] - u[:-1, :]) / h + (v[:, 1:] - v[:, :-1]) / h
        assert np.max(np.abs(div)) == 0.0


def test_completeness_certificate(dom, basis):
    cutoff = float(basis.lams[-1]) * (1 + 1e-9)
    assert inertia_below(dom, cutoff) == basis.size


def test_lam_max_interface(dom, basis):
    cutoff = float(basis.lams[4]) * (1 + 1e-9)
    sub = solve_modes(dom, lam_max=cutoff)
    assert sub.size == 5
    np.testing.assert_allclose(sub.lams, basis.lams[:5], rtol=1e-10)


def test_solve_modes_argument_guard(dom):
    with pytest.raises(ValueError):
        solve_modes(dom)
    with pytest.raises(ValueError):
        solve_modes(dom, j_count=3, lam_max=100.0)


def test_evolution_semigroup(basis):
    a0 = np.arange(1.0, basis.size + 1)
    s = ModalState(a0, basis)
    s1 = evolve(evolve(s, 0.003), 0.005)
    s2 = evolve(s, 0.008)
    np.testing.assert_allclose(s1.a, s2.a, rtol=1e-14)
    assert s1.t == pytest.approx(0.008)
    with pytest.raises(ValueError):
        evolve(s, -0.1)


def test_tail_decay_bound(basis, rng):
    """Modes above a cutoff decay at least like exp(-cutoff * t)."""
    t = 0.01
    for cut_idx in (2, 4, 6):
        cutoff = float(basis.lams[cut_idx - 1])
        for _ in range(20):
            a0 = rng.standard_normal(basis.size)
            tail = a0.copy()
            tail[basis.lams <= cutoff] = 0.0
            evolved = tail * np.exp(-basis.lams * t)
            assert np.linalg.norm(evolved) <= np.exp(-cutoff * t) * np.linalg.norm(a0) + 1e-12


def test_synthesize_matches_mode(basis):
    e1 = np.zeros(basis.size)
    e1[0] = 1.0
    fld = synthesize_field(basis, e1)
    np.testing.assert_array_equal(fld.u, basis.u[0])
    np.testing.assert_array_equal(fld.vc, basis.vc[0])


def test_derivative_growth_check_shape(dom, basis):
    ball = mask_ball(dom, (0.5, 0.35), 0.1)
    a = np.zeros(basis.size)
    a[:3] = [1.0, -0.5, 0.25]
    out = derivative_growth_check(basis, a, float(basis.lams[2]), ball, 0.1)
    assert out["K_hat"] >= 0
    assert out["rho_hat"] > 0
    assert 0 <= out["r2"] <= 1
    assert len(out["table"]) >= 3


def test_save_load_roundtrip(tmp_path, dom, basis):
    path = tmp_path / "basis.npz"
    save_basis(basis, path)
    back = load_basis(path)
    np.testing.assert_array_equal(back.lams, basis.lams)
    np.testing.assert_array_equal(back.psi, basis.psi)
    np.testing.assert_array_equal(back.f, basis.f)  # faces rebuilt identically
    assert back.domain == dom

"""Spectral-inequality constants on masks.

The L2 constant is exact on the discretization (smallest Gram eigenvalue);
the L1 constant is a certified lower bound obtained by minimizing the masked
L1 norm of eigen-sums over the unit coefficient sphere.  A growth fit against
sqrt(cutoff) exposes the exponential envelope, and a propagation-of-smallness
diagnostic reports the implied interpolation exponent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SpatialMask
from .optimize import sphere_minimize
from .spectral import SpectralBasis, derivative_growth_check, synthesize_field

__all__ = [
    "GramMatrix",
    "ConstantFit",
    "gram",
    "l2_constant",
    "l1_norm_on_mask",
    "l1_constant_estimate",
    "growth_fit",
    "smallness_diagnostic",
]


@dataclass(frozen=True)
class GramMatrix:
    """Pairwise masked L2 pairings of the retained eigenfields."""

    matrix: np.ndarray
    lam_cutoff: float
    mask: SpatialMask

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])


def _mode_count(basis: SpectralBasis, lam_cutoff: float) -> int:
    count = basis.count_below(lam_cutoff)
    if count == 0:
        raise ValueError("no mode at or below the requested cutoff")
    return count


def gram(basis: SpectralBasis, mask: SpatialMask, lam_cutoff: float) -> GramMatrix:
    """Exact cell-sum quadrature of e_i . e_j over the marked cells."""
    if mask.n_marked == 0:
        raise ValueError("mask is empty")
    count = _mode_count(basis, lam_cutoff)
    fm = basis.f[:count][:, :, mask.indicator]  # (J, 4, n_marked)
    flat = fm.reshape(count, -1)
    g = basis.domain.cell_area * (flat @ flat.T)
    return GramMatrix(g, lam_cutoff, mask)


def l2_constant(basis: SpectralBasis, mask: SpatialMask,
                lam_cutoff: float) -> tuple[float, np.ndarray]:
    """Worst-case (sum a^2)^(1/2) / (masked L2 of the eigen-sum); exact.

    Returns the constant and the minimizing coefficient vector.
    """
    g = gram(basis, mask, lam_cutoff)
    w, vecs = np.linalg.eigh(g.matrix)
    if w[0] <= 0:
        raise ValueError("masked Gram is numerically singular; refine the grid")
    return float(1.0 / np.sqrt(w[0])), vecs[:, 0]


def l1_norm_on_mask(basis: SpectralBasis, a: np.ndarray, mask: SpatialMask) -> float:
    """Cell-sum of |u_a| (pointwise Euclidean norm at cell centers)."""
    count = len(a)
    uc = np.tensordot(a, basis.uc[:count], 1)
    vc = np.tensordot(a, basis.vc[:count], 1)
    return float(basis.domain.cell_area
                 * np.sum(np.hypot(uc[mask.indicator], vc[mask.indicator])))


def l1_constant_estimate(basis: SpectralBasis, mask: SpatialMask, lam_cutoff: float,
                         restarts: int = 8, seed: int = 0) -> dict:
    """Certified lower bound on the L1 spectral constant for this mask.

    Minimizes a -> integral_omega |u_a| over the unit sphere by projected
    subgradient descent with random restarts.  The Gram minimizer is always
    included as a start, which pins the Cauchy-Schwarz floor c2 / sqrt(|omega|).
    """
    if restarts < 8:
        raise ValueError("need at least 8 restarts")
    count = _mode_count(basis, lam_cutoff)
    area = basis.domain.cell_area
    ind = mask.indicator
    ucm = basis.uc[:count][:, ind]  # (J, n_marked)
    vcm = basis.vc[:count][:, ind]

    def func(a):
        return area * float(np.sum(np.hypot(a @ ucm, a @ vcm)))

    def subgrad(a):
        u = a @ ucm
        v = a @ vcm
        mag = np.hypot(u, v)
        nz = mag > 0
        gu = np.where(nz, u / np.where(nz, mag, 1.0), 0.0)
        gv = np.where(nz, v / np.where(nz, mag, 1.0), 0.0)
        return area * (ucm @ gu + vcm @ gv)

    _, gram_min = l2_constant(basis, mask, lam_cutoff)
    res = sphere_minimize(func, subgrad, count, restarts, seed,
                          extra_starts=[gram_min])
    return {
        "c1_lower": float(1.0 / res.best_value),
        "best_a": res.best_x,
        "restart_values": [1.0 / v for v in res.restart_values],
        "stagnated": res.stagnated,
        "mode_count": count,
    }


@dataclass(frozen=True)
class ConstantFit:
    """Least-squares fit of log c = C0 + C1 sqrt(Lambda)."""

    pairs: tuple
    c0: float
    c1: float
    r2: float


def growth_fit(pairs) -> ConstantFit:
    pairs = [(float(l), float(c)) for l, c in pairs]
    if len(pairs) < 3:
        raise ValueError("need at least 3 (cutoff, constant) pairs")
    lams = np.array([p[0] for p in pairs])
    cs = np.array([p[1] for p in pairs])
    if len(np.unique(lams)) < len(lams):
        raise ValueError("cutoffs must be distinct")
    if np.any(cs <= 0):
        raise ValueError("constants must be positive")
    x = np.sqrt(lams)
    y = np.log(cs)
    c1, c0 = np.polyfit(x, y, 1)
    pred = c1 * x + c0
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return ConstantFit(tuple(pairs), float(c0), float(c1), r2)


def smallness_diagnostic(basis: SpectralBasis, a: np.ndarray, ball_mask: SpatialMask,
                         sub_mask: SpatialMask, lam_cutoff: float,
                         radius: float) -> dict:
    """Sup over the ball, L1 over the subset, analytic majorant, implied theta.

    Solves sup = (L1)^theta * M^(1-theta) with unit leading constant; theta and
    the constant are not separately identifiable from one sample, so only
    trends across masks are meaningful.
    """
    if not sub_mask.is_subset_of(ball_mask):
        raise ValueError("sub_mask must be contained in the ball mask")
    a = np.asarray(a, dtype=float)
    if np.linalg.norm(a) == 0:
        raise ValueError("zero field")
    fld = synthesize_field(basis, a[: basis.size] if len(a) == basis.size else a)
    sup = float(np.max(np.hypot(fld.uc[ball_mask.indicator], fld.vc[ball_mask.indicator])))
    l1 = l1_norm_on_mask(basis, a, sub_mask)
    growth = derivative_growth_check(basis, a, lam_cutoff, ball_mask, radius)
    majorant = float(np.exp(growth["K_hat"] * np.sqrt(lam_cutoff)) * np.linalg.norm(a))
    out = {"sup_ball": sup, "l1_sub": l1, "majorant": majorant,
           "K_hat": growth["K_hat"], "theta": None, "flag": None}
    if l1 <= 0 or majorant <= 0 or sup <= 0:
        out["flag"] = "degenerate quantities"
        return out
    denom = np.log(l1 / majorant)
    if abs(denom) < 1e-300:
        out["flag"] = "l1 equals majorant"
        return out
    theta = float(np.log(sup / majorant) / denom)
    out["theta"] = theta
    if not 0.0 < theta < 1.0:
        out["flag"] = "theta outside (0,1)"
    return out

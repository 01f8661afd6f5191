"""Time-optimal bounded control: minimal-norm dual subproblem at a fixed
horizon, bisection on the horizon, pointwise r-norm duality maps, bang-bang
saturation measurement, and an empirical uniqueness check for r in (1, inf).

The admissible set is |v(x,t)|_r <= M a.e. on omega x (0, tau) with v
supported there; its support function is M times the space-time integral of
the conjugate pointwise norm of the adjoint, which is the quadratic dual
functional minimized here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import SpatialMask, SpaceTimeMask, cylinder_mask
from .observability import ControlSignal, pointwise_rnorm, step_weights, forward_terminal
from .optimize import convex_descent
from .spectral import SpectralBasis

__all__ = [
    "RNorm",
    "TimeOptimalResult",
    "duality_map",
    "min_norm_control",
    "minimal_time",
    "bang_bang_residual",
    "uniqueness_check",
]

_DEAD_RTOL = 1e-14
_MAX_DOUBLINGS = 32
# finite surrogate exponent for the conjugate of r = 1 (a max-norm); the
# relative overshoot of the p-norm over the max is at most 2**(1/p)
_INF_SURROGATE = 64.0


@dataclass(frozen=True)
class RNorm:
    """Pointwise norm exponent and its conjugate, 1/r + 1/r' = 1."""

    r: float

    def __post_init__(self):
        if not (self.r >= 1):
            raise ValueError("r must lie in [1, inf]")

    @property
    def conjugate(self) -> float:
        if self.r == 1:
            return np.inf
        if self.r == np.inf:
            return 1.0
        return self.r / (self.r - 1.0)

    def of(self, x: np.ndarray) -> float:
        return float(pointwise_rnorm(np.asarray(x, dtype=float), self.r))


def duality_map(phi: np.ndarray, r: float) -> tuple[np.ndarray, bool]:
    """argmax of v . phi over the unit r-ball; (vector, zero_flag).

    r in (1, inf): v_i = sign(phi_i)|phi_i|^(r'-1) / |phi|_{r'}^(r'-1);
    r = inf: componentwise sign; r = 1: unit mass on a largest component
    (ties resolved to the lowest index).  phi = 0 returns a flagged zero.
    """
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("phi must be finite")
    if np.all(phi == 0):
        return np.zeros_like(phi), True
    if r == np.inf:
        return np.sign(phi), False
    if r == 1:
        out = np.zeros_like(phi)
        i = int(np.argmax(np.abs(phi)))
        out[i] = np.sign(phi[i])
        return out, False
    if r <= 1:
        raise ValueError("r must lie in [1, inf]")
    rp = r / (r - 1.0)
    norm = np.sum(np.abs(phi) ** rp) ** (1.0 / rp)
    return np.sign(phi) * (np.abs(phi) / norm) ** (rp - 1.0), False


def _conjugate_exponent(r: float) -> float:
    return RNorm(r).conjugate


def _rho_and_grad(pu: np.ndarray, pv: np.ndarray, rprime: float, eps: float):
    """Smoothed pointwise conjugate norm and its gradient, overflow-safe.

    rho = ((pu^2+eps^2)^(r'/2) + (pv^2+eps^2)^(r'/2))^(1/r'), evaluated with
    a per-point rescaling so large exponents cannot overflow.  The gradient
    components satisfy |(gu, gv)|_r <= 1 pointwise for the primal r.
    """
    m = np.maximum(np.maximum(np.abs(pu), np.abs(pv)), max(eps, 1e-300))
    au, av, ae = pu / m, pv / m, eps / m
    su = np.sqrt(au * au + ae * ae)
    sv = np.sqrt(av * av + ae * ae)
    q = su ** rprime + sv ** rprime
    rho = m * q ** (1.0 / rprime)
    scale = q ** ((1.0 - rprime) / rprime)
    gu = scale * su ** (rprime - 2.0) * au
    gv = scale * sv ** (rprime - 2.0) * av
    return rho, gu, gv


def _duality_field(pu: np.ndarray, pv: np.ndarray, r: float):
    """Exact pointwise duality map applied to a vector field; returns the
    unit-sphere field and the dead-zone mask (|phi| below 1e-14 of the peak)."""
    mag_rp = pointwise_rnorm(np.stack([pu, pv], axis=-1), _conjugate_exponent(r)
                             if r > 1 else np.inf)
    peak = float(np.max(mag_rp)) if mag_rp.size else 0.0
    dead = mag_rp <= _DEAD_RTOL * peak
    if r == np.inf:
        vu, vv = np.sign(pu), np.sign(pv)
    elif r == 1:
        on_u = np.abs(pu) >= np.abs(pv)  # ties -> first component
        vu = np.where(on_u, np.sign(pu), 0.0)
        vv = np.where(on_u, 0.0, np.sign(pv))
    else:
        rp = r / (r - 1.0)
        safe = np.where(dead, 1.0, mag_rp)
        vu = np.sign(pu) * (np.abs(pu) / safe) ** (rp - 1.0)
        vv = np.sign(pv) * (np.abs(pv) / safe) ** (rp - 1.0)
    vu = np.where(dead, 0.0, vu)
    vv = np.where(dead, 0.0, vv)
    return vu, vv, dead


def min_norm_control(basis: SpectralBasis, u0: np.ndarray, omega: SpatialMask,
                     tau: float, r: float, iters: int = 300,
                     smooth_rel: float = 1e-3,
                     b0: np.ndarray | None = None) -> dict:
    """Minimal pointwise r-norm bound steering u0 to zero over (0, tau).

    Minimizes J(b) = (1/2)(integral of |phi_b|_{r'} over omega x (0,tau))^2
    + <u0, phi_b(0)> (smoothed conjugate norm; for r = 1 the max-norm
    conjugate is approximated by a high-exponent norm and flagged).  Returns
    the bound M_min, the bang-bang control v = M_min * duality_map(phi*), and
    the forward steering residual.  The solve is run on u0 normalized to unit
    norm and rescaled, so M_min is exactly 1-homogeneous in u0.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    dom = basis.domain
    stmask = cylinder_mask(omega)
    u0 = np.asarray(u0, dtype=float)
    scale = float(np.linalg.norm(u0))
    if scale == 0.0:
        zero = np.zeros((dom.n_cells_x, dom.n_cells_y, dom.n_t, 2))
        return {"control": ControlSignal(stmask, r, 0.0, zero, tau),
                "m_min": 0.0, "residual_rel": 0.0, "stagnated": False,
                "dead_fraction": 0.0, "flag": None}
    un = u0 / scale

    rp = _conjugate_exponent(r)
    flag = None
    if rp == np.inf:
        rp = _INF_SURROGATE
        flag = "r = 1 conjugate max-norm approximated by a 64-norm"

    n_t = dom.n_t
    dt = tau / n_t
    area = dom.cell_area
    w = step_weights(basis.lams, tau, n_t)
    dvec = np.exp(-basis.lams * tau)
    mask_t = omega.indicator[None, :, :]  # broadcast over time

    def adjoint_fields(b):
        coeff = (b[:, None] * w).T
        return (np.tensordot(coeff, basis.uc, 1),
                np.tensordot(coeff, basis.vc, 1))

    def make_funcs(eps):
        def func(b):
            pu, pv = adjoint_fields(b)
            rho, _, _ = _rho_and_grad(pu, pv, rp, eps)
            i_val = dt * area * float(np.sum(rho * mask_t))
            return 0.5 * i_val ** 2 + float(np.sum(un * dvec * b))

        def grad(b):
            pu, pv = adjoint_fields(b)
            rho, gu, gv = _rho_and_grad(pu, pv, rp, eps)
            i_val = dt * area * float(np.sum(rho * mask_t))
            cu = np.einsum("kxy,jxy->jk", gu * mask_t, basis.uc)
            cv = np.einsum("kxy,jxy->jk", gv * mask_t, basis.vc)
            d = dt * area * np.sum(w * (cu + cv), axis=1)
            return i_val * d + un * dvec

        return func, grad

    if b0 is None:
        b0 = np.zeros(basis.size)
    else:
        b0 = np.asarray(b0, dtype=float) / scale
    f0, g0 = make_funcs(0.0)
    b, _, _ = convex_descent(f0, g0, b0, iters=min(50, iters))
    pu, pv = adjoint_fields(b)
    eps = smooth_rel * max(float(np.max(np.hypot(pu, pv) * mask_t)), 1e-300)
    func, grad = make_funcs(eps)
    b, _, stagnated = convex_descent(func, grad, b, iters=iters)

    pu, pv = adjoint_fields(b)
    rho, _, _ = _rho_and_grad(pu, pv, rp, eps)
    m_min = dt * area * float(np.sum(rho * mask_t))
    vu, vv, dead = _duality_field(pu, pv, r)
    vu = m_min * vu * mask_t
    vv = m_min * vv * mask_t
    values = np.stack([np.moveaxis(vu, 0, -1), np.moveaxis(vv, 0, -1)], axis=-1)
    control = ControlSignal(stmask, r, m_min, values, tau)
    terminal = forward_terminal(basis, un, control)
    residual = float(np.linalg.norm(terminal))
    marked = int(omega.n_marked) * n_t
    return {"control": ControlSignal(stmask, r, m_min * scale, values * scale, tau),
            "m_min": m_min * scale, "residual_rel": residual,
            "stagnated": stagnated,
            "dead_fraction": float(np.sum(dead & (mask_t > 0))) / marked,
            "flag": flag}


@dataclass
class TimeOptimalResult:
    tau_star: float
    bound: float
    r: float
    control: ControlSignal | None
    bracket: tuple[float, float]
    curve: list = field(default_factory=list)  # (tau, M_min) samples
    residual_rel: float = np.nan
    bang_bang: dict | None = None
    flag: str | None = None


def minimal_time(basis: SpectralBasis, u0: np.ndarray, bound: float,
                 omega: SpatialMask, r: float, bracket_tol: float = 1e-3,
                 iters: int = 300, b0: np.ndarray | None = None) -> TimeOptimalResult:
    """Minimal horizon tau with M_min(tau) <= bound, by bisection on the
    monotone predicate; returns the control at the accepted horizon."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    u0 = np.asarray(u0, dtype=float)
    if np.linalg.norm(u0) == 0:
        return TimeOptimalResult(0.0, bound, r, None, (0.0, 0.0), [],
                                 0.0, None, "zero initial state: tau* = 0")
    curve = []

    def m_min(tau):
        out = min_norm_control(basis, u0, omega, tau, r, iters=iters, b0=b0)
        curve.append((tau, out["m_min"]))
        return out

    hi = basis.domain.t_horizon
    out_hi = m_min(hi)
    if out_hi["m_min"] > bound:
        for _ in range(_MAX_DOUBLINGS):
            hi *= 2.0
            out_hi = m_min(hi)
            if out_hi["m_min"] <= bound:
                break
        else:
            return TimeOptimalResult(
                np.nan, bound, r, None, (np.nan, hi), curve, np.nan, None,
                f"budget too small: M_min({hi}) = {out_hi['m_min']} > {bound}")
    lo = hi / 2.0
    while lo > bracket_tol and m_min(lo)["m_min"] <= bound:
        hi = lo
        lo /= 2.0
    if lo <= bracket_tol:
        lo = 0.0
    while hi - lo > bracket_tol:
        mid = 0.5 * (lo + hi)
        if m_min(mid)["m_min"] <= bound:
            hi = mid
        else:
            lo = mid
    final = min_norm_control(basis, u0, omega, hi, r, iters=iters, b0=b0)
    bb = bang_bang_residual(final["control"], final["m_min"], r, 1e-2)
    return TimeOptimalResult(hi, bound, r, final["control"], (lo, hi),
                             sorted(curve), final["residual_rel"], bb,
                             final["flag"])


def bang_bang_residual(control: ControlSignal, m: float, r: float,
                       eps: float) -> dict:
    """Fraction of marked space-time entries where | |v|_r - M | > eps M,
    plus the excluded (vanishing-adjoint) zone fraction."""
    on = control.values[control.stmask.indicator]
    if on.size == 0:
        return {"fraction": 0.0, "excluded_fraction": 0.0, "n_marked": 0}
    rn = pointwise_rnorm(on, r)
    excluded = rn == 0.0
    bad = np.abs(rn - m) > eps * m
    return {"fraction": float(np.mean(bad)),
            "excluded_fraction": float(np.mean(excluded)),
            "n_marked": int(on.size)}


def uniqueness_check(basis: SpectralBasis, u0: np.ndarray, bound: float,
                     omega: SpatialMask, r: float, seed1: int, seed2: int,
                     bracket_tol: float = 1e-3, iters: int = 300) -> dict:
    """Relative L1 distance between optimal controls computed from two
    independent optimizer initializations; valid only for r in (1, inf)."""
    if not 1.0 < r < np.inf:
        raise ValueError("uniqueness holds only for r strictly between 1 and inf")
    if seed1 == seed2:
        pass  # identical seeds are legal and must reproduce bit-for-bit
    outs = []
    for seed in (seed1, seed2):
        rng = np.random.Generator(np.random.Philox(seed))
        b0 = rng.standard_normal(basis.size) * float(np.linalg.norm(u0))
        outs.append(minimal_time(basis, u0, bound, omega, r,
                                 bracket_tol=bracket_tol, iters=iters, b0=b0))
    t1, t2 = outs[0].tau_star, outs[1].tau_star
    if abs(t1 - t2) > 2 * bracket_tol:
        return {"distance_rel": None, "tau": (t1, t2),
                "flag": "inconclusive: tau* estimates differ beyond 2*bracket_tol"}
    v1 = outs[0].control.values
    v2 = outs[1].control.values
    num = float(np.sum(np.abs(v1 - v2)))
    den = 0.5 * float(np.sum(np.abs(v1)) + np.sum(np.abs(v2)))
    return {"distance_rel": num / den if den > 0 else 0.0,
            "tau": (t1, t2), "flag": None}

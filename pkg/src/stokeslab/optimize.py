"""Shared nonsmooth optimizers: sphere-constrained subgradient descent with
random restarts, and a descent loop for convex dual functionals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SphereResult", "sphere_minimize", "convex_descent"]


@dataclass
class SphereResult:
    best_x: np.ndarray
    best_value: float
    restart_values: list[float]
    stagnated: bool


def _polish(func, x, value, rng, steps=60, radius=0.05):
    """Shrinking random local search on the sphere around the incumbent."""
    for k in range(steps):
        r = radius * 0.93 ** k
        cand = x + r * rng.standard_normal(x.shape)
        cand /= np.linalg.norm(cand)
        v = func(cand)
        if v < value:
            x, value = cand, v
    return x, value


def sphere_minimize(func, subgrad, dim: int, restarts: int, seed: int,
                    iters: int = 200, step0: float = 0.1,
                    extra_starts: list[np.ndarray] | None = None) -> SphereResult:
    """Minimize a positively homogeneous functional on the unit sphere.

    Projected subgradient with diminishing steps eta_k = step0 / sqrt(k),
    independent restarts, and a short shrinking local search around the best
    iterate.  Deterministic for a fixed seed.
    """
    if restarts < 1:
        raise ValueError("need at least one restart")
    starts = []
    root = np.random.SeedSequence(seed)
    children = root.spawn(restarts + 1)
    for ss in children[:restarts]:
        rng = np.random.Generator(np.random.Philox(ss))
        x0 = rng.standard_normal(dim)
        starts.append(x0 / np.linalg.norm(x0))
    for x0 in (extra_starts or []):
        starts.append(np.asarray(x0, dtype=float) / np.linalg.norm(x0))

    best_x, best_value = None, np.inf
    restart_values = []
    for x0 in starts:
        x = x0.copy()
        loc_x, loc_v = x, func(x)
        for k in range(1, iters + 1):
            g = subgrad(x)
            gn = np.linalg.norm(g)
            if gn == 0:
                break
            x = x - (step0 / np.sqrt(k)) * g / gn
            nx = np.linalg.norm(x)
            if nx == 0:
                break
            x = x / nx
            v = func(x)
            if v < loc_v:
                loc_x, loc_v = x, v
        restart_values.append(loc_v)
        if loc_v < best_value:
            best_x, best_value = loc_x, loc_v

    polish_rng = np.random.Generator(np.random.Philox(children[restarts]))
    best_x, best_value = _polish(func, best_x, best_value, polish_rng)
    spread = max(restart_values) - min(restart_values)
    stagnated = bool(spread > 0.5 * abs(best_value) + 1e-12) and len(restart_values) > 1
    return SphereResult(best_x, best_value, restart_values, stagnated)


def convex_descent(func, grad, x0: np.ndarray, iters: int = 200,
                   record=None) -> tuple[np.ndarray, float, bool]:
    """Descent for a convex, almost-everywhere differentiable functional.

    Barzilai-Borwein trial steps with Armijo backtracking; falls back to a
    diminishing normalized subgradient step when backtracking exhausts (the
    genuinely nonsmooth case).  Returns (x_best, f_best, stagnated).
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = func(x)
    g = grad(x)
    best_x, best_f = x.copy(), fx
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    stalls = 0
    for k in range(1, iters + 1):
        gn2 = float(g @ g)
        if gn2 == 0:
            break
        t = step
        accepted = False
        for _ in range(30):
            xn = x - t * g
            fn = func(xn)
            if fn <= fx - 1e-4 * t * gn2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            xn = x - (0.3 / (np.sqrt(k) * np.sqrt(gn2))) * g
            fn = func(xn)
            stalls += 1
        gn_new = grad(xn)
        s = xn - x
        y = gn_new - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 1e-30 else t * 2.0
        x, fx, g = xn, fn, gn_new
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        if record is not None:
            record(k, best_f)
    stagnated = stalls > iters // 2
    return best_x, best_f, stagnated

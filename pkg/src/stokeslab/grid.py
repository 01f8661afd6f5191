"""Rectangular domain, uniform staggered grid, and measurable-set masks.

Measurable subsets of the box and of the space-time cylinder are represented
as unions of grid cells (one boolean per cell, resp. per cell and time step),
so every integral in the package reduces to an exact cell sum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RectDomain",
    "SpatialMask",
    "SpaceTimeMask",
    "GoodTimeSet",
    "build_domain",
    "mask_full",
    "mask_ball",
    "mask_random",
    "mask_from_indicator",
    "cylinder_mask",
    "spacetime_from_slices",
    "good_time_set",
    "mask_to_text",
    "mask_from_text",
]


@dataclass(frozen=True)
class RectDomain:
    """Axis-aligned box (0,lx)x(0,ly) with a uniform interior node grid.

    Stream-function nodes live at (i*h_x, j*h_y), i=0..n_x+1, j=0..n_y+1;
    the boundary nodes carry homogeneous (clamped) data.  Cells are the
    (n_x+1)x(n_y+1) squares of the node grid; masks mark whole cells.
    """

    lx: float
    ly: float
    n_x: int
    n_y: int
    t_horizon: float
    n_t: int

    @property
    def h_x(self) -> float:
        return self.lx / (self.n_x + 1)

    @property
    def h_y(self) -> float:
        return self.ly / (self.n_y + 1)

    @property
    def n_cells_x(self) -> int:
        return self.n_x + 1

    @property
    def n_cells_y(self) -> int:
        return self.n_y + 1

    @property
    def cell_area(self) -> float:
        return self.h_x * self.h_y

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def dt(self) -> float:
        return self.t_horizon / self.n_t

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates as (xc, yc) meshgrid arrays (ij indexing)."""
        xs = (np.arange(self.n_cells_x) + 0.5) * self.h_x
        ys = (np.arange(self.n_cells_y) + 0.5) * self.h_y
        return np.meshgrid(xs, ys, indexing="ij")

    def step_times(self) -> np.ndarray:
        """Midpoints of the n_t time steps."""
        return (np.arange(self.n_t) + 0.5) * self.dt

    def key(self) -> tuple:
        return (self.lx, self.ly, self.n_x, self.n_y, self.t_horizon, self.n_t)


def build_domain(lx: float, ly: float, n_x: int, n_y: int,
                 t_horizon: float, n_t: int) -> RectDomain:
    if lx <= 0 or ly <= 0:
        raise ValueError("side lengths must be positive")
    if n_x < 4 or n_y < 4:
        raise ValueError("grid too coarse: need n_x, n_y >= 4 for the biharmonic stencil")
    if t_horizon <= 0:
        raise ValueError("t_horizon must be positive")
    if n_t < 2:
        raise ValueError("need at least 2 time steps")
    return RectDomain(float(lx), float(ly), int(n_x), int(n_y),
                      float(t_horizon), int(n_t))


@dataclass(frozen=True)
class SpatialMask:
    """Union of grid cells representing a measurable subset of the box."""

    domain: RectDomain
    indicator: np.ndarray  # bool, shape (n_cells_x, n_cells_y)

    def __post_init__(self):
        ind = np.asarray(self.indicator, dtype=bool)
        if ind.shape != (self.domain.n_cells_x, self.domain.n_cells_y):
            raise ValueError("indicator shape does not match the cell grid")
        object.__setattr__(self, "indicator", ind)
        ind.setflags(write=False)

    @property
    def n_marked(self) -> int:
        return int(self.indicator.sum())

    @property
    def measure(self) -> float:
        return self.n_marked * self.domain.cell_area

    def is_subset_of(self, other: "SpatialMask") -> bool:
        return bool(np.all(other.indicator[self.indicator]))


@dataclass(frozen=True)
class SpaceTimeMask:
    """Union of (cell, time step) boxes in the space-time cylinder."""

    domain: RectDomain
    indicator: np.ndarray  # bool, shape (n_cells_x, n_cells_y, n_t)

    def __post_init__(self):
        ind = np.asarray(self.indicator, dtype=bool)
        shape = (self.domain.n_cells_x, self.domain.n_cells_y, self.domain.n_t)
        if ind.shape != shape:
            raise ValueError("indicator shape does not match the space-time grid")
        object.__setattr__(self, "indicator", ind)
        ind.setflags(write=False)

    @property
    def measure(self) -> float:
        return float(self.indicator.sum()) * self.domain.cell_area * self.domain.dt

    def slice_measures(self) -> np.ndarray:
        """Area |M_t| of every time slice."""
        return self.indicator.sum(axis=(0, 1)) * self.domain.cell_area

    def time_slice(self, k: int) -> SpatialMask:
        return SpatialMask(self.domain, self.indicator[:, :, k])


@dataclass(frozen=True)
class GoodTimeSet:
    """Time steps whose mask slice is at least half the average slice area."""

    domain: RectDomain
    indicator: np.ndarray  # bool, shape (n_t,)
    threshold: float

    def __post_init__(self):
        ind = np.asarray(self.indicator, dtype=bool)
        if ind.shape != (self.domain.n_t,):
            raise ValueError("indicator length does not match n_t")
        object.__setattr__(self, "indicator", ind)
        ind.setflags(write=False)

    @property
    def measure(self) -> float:
        return float(self.indicator.sum()) * self.domain.dt

    def intervals(self) -> list[tuple[float, float]]:
        """Maximal runs of marked steps as (start, end) time intervals."""
        out = []
        dt = self.domain.dt
        k = 0
        ind = self.indicator
        while k < len(ind):
            if ind[k]:
                start = k
                while k < len(ind) and ind[k]:
                    k += 1
                out.append((start * dt, k * dt))
            else:
                k += 1
        return out

    def intersect_measure(self, a: float, b: float) -> float:
        """Exact measure of E intersected with the open interval (a, b)."""
        total = 0.0
        for lo, hi in self.intervals():
            total += max(0.0, min(hi, b) - max(lo, a))
        return total


def mask_full(domain: RectDomain) -> SpatialMask:
    return SpatialMask(domain, np.ones((domain.n_cells_x, domain.n_cells_y), dtype=bool))


def mask_from_indicator(domain: RectDomain, indicator: np.ndarray) -> SpatialMask:
    return SpatialMask(domain, np.asarray(indicator, dtype=bool))


def mask_ball(domain: RectDomain, center: tuple[float, float], radius: float) -> SpatialMask:
    """Cells whose center lies in the open ball B_radius(center).

    The containment of the four-times-larger concentric ball inside the box is
    a simplifying technicality, so its violation only warns.
    """
    cx, cy = center
    if not (0.0 < cx < domain.lx and 0.0 < cy < domain.ly):
        raise ValueError("ball center lies outside the domain")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if (cx - 4 * radius < 0 or cx + 4 * radius > domain.lx
            or cy - 4 * radius < 0 or cy + 4 * radius > domain.ly):
        warnings.warn("ball of radius 4R around the center does not fit inside the box",
                      stacklevel=2)
    xc, yc = domain.cell_centers()
    ind = (xc - cx) ** 2 + (yc - cy) ** 2 < radius ** 2
    if not ind.any():
        raise ValueError("no cell center inside the ball; radius below grid resolution")
    return SpatialMask(domain, ind)


def mask_random(domain: RectDomain, fraction: float, seed: int) -> SpatialMask:
    """Mark exactly round(fraction * n_cells) cells, at least one."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    total = domain.n_cells_x * domain.n_cells_y
    count = max(1, int(round(fraction * total)))
    rng = np.random.Generator(np.random.Philox(seed))
    chosen = rng.choice(total, size=count, replace=False)
    flat = np.zeros(total, dtype=bool)
    flat[chosen] = True
    return SpatialMask(domain, flat.reshape(domain.n_cells_x, domain.n_cells_y))


def cylinder_mask(spatial: SpatialMask, steps: np.ndarray | None = None) -> SpaceTimeMask:
    """Space-time mask omega x (union of time steps); all steps by default."""
    dom = spatial.domain
    if steps is None:
        steps = np.ones(dom.n_t, dtype=bool)
    steps = np.asarray(steps, dtype=bool)
    ind = spatial.indicator[:, :, None] & steps[None, None, :]
    return SpaceTimeMask(dom, ind)


def spacetime_from_slices(domain: RectDomain, slices: list[np.ndarray]) -> SpaceTimeMask:
    if len(slices) != domain.n_t:
        raise ValueError("need one slice indicator per time step")
    ind = np.stack([np.asarray(s, dtype=bool) for s in slices], axis=-1)
    return SpaceTimeMask(domain, ind)


def good_time_set(stmask: SpaceTimeMask) -> GoodTimeSet:
    """Steps t with |M_t| >= |M| / (2 T)."""
    if stmask.measure <= 0:
        raise ValueError("space-time mask is empty")
    dom = stmask.domain
    threshold = stmask.measure / (2.0 * dom.t_horizon)
    slices = stmask.slice_measures()
    return GoodTimeSet(dom, slices >= threshold, threshold)


# ---------------------------------------------------------------------------
# Mask exchange format: flat key=value text with a run-length-encoded bit
# string.  Floats are serialized as hex for bit-exact round trips.

def _rle_encode(bits: np.ndarray) -> str:
    bits = np.asarray(bits, dtype=bool).ravel()
    if bits.size == 0:
        return ""
    flips = np.flatnonzero(np.diff(bits.view(np.int8)))
    starts = np.concatenate(([0], flips + 1, [bits.size]))
    runs = []
    for a, b in zip(starts[:-1], starts[1:]):
        runs.append(f"{int(bits[a])}x{b - a}")
    return ",".join(runs)


def _rle_decode(text: str, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    pos = 0
    if text:
        for run in text.split(","):
            val, count = run.split("x")
            count = int(count)
            out[pos:pos + count] = bool(int(val))
            pos += count
    if pos != size:
        raise ValueError("run-length data does not cover the indicator")
    return out


def mask_to_text(mask: SpatialMask | SpaceTimeMask) -> str:
    dom = mask.domain
    spatial = isinstance(mask, SpatialMask)
    lines = [
        f"kind={'spatial' if spatial else 'spacetime'}",
        f"lx={dom.lx.hex()}",
        f"ly={dom.ly.hex()}",
        f"t_horizon={dom.t_horizon.hex()}",
        f"nx={dom.n_x}",
        f"ny={dom.n_y}",
        f"nt={dom.n_t}",
        f"rle={_rle_encode(mask.indicator)}",
        f"measure={float(mask.measure).hex()}",
    ]
    return "\n".join(lines) + "\n"


def mask_from_text(text: str) -> SpatialMask | SpaceTimeMask:
    fields = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value
    dom = build_domain(float.fromhex(fields["lx"]), float.fromhex(fields["ly"]),
                       int(fields["nx"]), int(fields["ny"]),
                       float.fromhex(fields["t_horizon"]), int(fields["nt"]))
    if fields["kind"] == "spatial":
        shape = (dom.n_cells_x, dom.n_cells_y)
        mask: SpatialMask | SpaceTimeMask = SpatialMask(
            dom, _rle_decode(fields["rle"], shape[0] * shape[1]).reshape(shape))
    else:
        shape = (dom.n_cells_x, dom.n_cells_y, dom.n_t)
        mask = SpaceTimeMask(
            dom, _rle_decode(fields["rle"], int(np.prod(shape))).reshape(shape))
    stored = float.fromhex(fields["measure"])
    if stored != mask.measure:
        raise ValueError("stored measure disagrees with the decoded indicator")
    return mask

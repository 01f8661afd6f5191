"""Stokes Dirichlet eigenproblem in 2D via the clamped stream function.

In a simply connected planar box every divergence-free velocity with no-slip
boundary data is the curl of a clamped scalar stream function, so the Stokes
eigenproblem becomes the symmetric definite pencil

    A psi = lambda B psi,

with A the 13-point clamped biharmonic operator and B the 5-point Laplacian.
Velocities are reconstructed on a MAC staggered grid, which makes the discrete
divergence vanish identically.  Stream values are quantized to multiples of
2^-48 after normalization; cell-to-cell stream differences then subtract
without rounding, so the staggered divergence is an exact floating-point zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import RectDomain, SpatialMask, build_domain

__all__ = [
    "VelocityMode",
    "SpectralBasis",
    "ModalState",
    "Field",
    "assemble_operators",
    "inertia_below",
    "solve_modes",
    "synthesize_field",
    "evolve",
    "derivative_growth_check",
    "save_basis",
    "load_basis",
]

_QUANTUM = 2.0 ** -48
_CLUSTER_RTOL = 1e-9


def _laplacian_1d(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)],
                    [-1, 0, 1], format="csr")


def assemble_operators(domain: RectDomain) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Clamped biharmonic A and Dirichlet Laplacian B on interior nodes.

    A is assembled as M2 @ M1 where M1 evaluates -Laplacian(psi) on the full
    node grid (ghost reflection psi_ghost = psi_inner at the boundary) and M2
    applies -Laplacian at interior nodes again.  Both A and B are symmetric
    positive definite.
    """
    nx, ny = domain.n_x, domain.n_y
    hx2, hy2 = domain.h_x ** 2, domain.h_y ** 2

    tx = _laplacian_1d(nx) / hx2
    ty = _laplacian_1d(ny) / hy2
    b = sp.kron(tx, sp.identity(ny), format="csr") + \
        sp.kron(sp.identity(nx), ty, format="csr")

    n_int = nx * ny
    full_ny = ny + 2

    def full_idx(i, j):
        return i * full_ny + j

    def int_idx(i, j):  # 1-based interior coordinates
        return (i - 1) * ny + (j - 1)

    rows, cols, vals = [], [], []
    # interior rows of M1: the Dirichlet Laplacian
    bcoo = b.tocoo()
    for r, c, v in zip(bcoo.row, bcoo.col, bcoo.data):
        ri, rj = divmod(r, ny)
        rows.append(full_idx(ri + 1, rj + 1))
        cols.append(c)
        vals.append(v)
    # boundary rows: ghost reflection leaves -2 psi_inner / h^2
    for j in range(1, ny + 1):
        rows += [full_idx(0, j), full_idx(nx + 1, j)]
        cols += [int_idx(1, j), int_idx(nx, j)]
        vals += [-2.0 / hx2, -2.0 / hx2]
    for i in range(1, nx + 1):
        rows += [full_idx(i, 0), full_idx(i, ny + 1)]
        cols += [int_idx(i, 1), int_idx(i, ny)]
        vals += [-2.0 / hy2, -2.0 / hy2]
    m1 = sp.coo_matrix((vals, (rows, cols)),
                       shape=((nx + 2) * (ny + 2), n_int)).tocsr()

    rows, cols, vals = [], [], []
    for i in range(1, nx + 1):
        for j in range(1, ny + 1):
            r = int_idx(i, j)
            rows += [r] * 5
            cols += [full_idx(i, j), full_idx(i - 1, j), full_idx(i + 1, j),
                     full_idx(i, j - 1), full_idx(i, j + 1)]
            vals += [2.0 / hx2 + 2.0 / hy2, -1.0 / hx2, -1.0 / hx2,
                     -1.0 / hy2, -1.0 / hy2]
    m2 = sp.coo_matrix((vals, (rows, cols)),
                       shape=(n_int, (nx + 2) * (ny + 2))).tocsr()

    a = (m2 @ m1).tocsr()
    a = ((a + a.T) * 0.5).tocsr()  # stencil is symmetric; cancel assembly roundoff
    return a, b.tocsr()


def inertia_below(domain: RectDomain, lam: float,
                  ops: tuple[sp.spmatrix, sp.spmatrix] | None = None) -> int:
    """Number of pencil eigenvalues strictly below lam (inertia of A - lam B)."""
    a, b = ops if ops is not None else assemble_operators(domain)
    s = (a - lam * b).toarray()
    _, d, _ = scipy.linalg.ldl(s)
    neg = 0
    k = 0
    n = d.shape[0]
    while k < n:
        if k + 1 < n and (d[k, k + 1] != 0.0 or d[k + 1, k] != 0.0):
            w = np.linalg.eigvalsh(d[k:k + 2, k:k + 2])
            neg += int((w < 0).sum())
            k += 2
        else:
            neg += int(d[k, k] < 0)
            k += 1
    return neg


@dataclass(frozen=True)
class VelocityMode:
    """One eigenpair: stream values on all nodes plus staggered velocities."""

    index: int
    lam: float
    psi: np.ndarray  # (n_x+2, n_y+2)
    u: np.ndarray    # x-velocity on vertical faces, (n_x+2, n_y+1)
    v: np.ndarray    # y-velocity on horizontal faces, (n_x+1, n_y+2)

    @property
    def uc(self) -> np.ndarray:
        return 0.5 * (self.u[:-1, :] + self.u[1:, :])

    @property
    def vc(self) -> np.ndarray:
        return 0.5 * (self.v[:, :-1] + self.v[:, 1:])


def _faces(psi: np.ndarray, domain: RectDomain) -> tuple[np.ndarray, np.ndarray]:
    u = (psi[:, 1:] - psi[:, :-1]) / domain.h_y
    v = -(psi[1:, :] - psi[:-1, :]) / domain.h_x
    return u, v


def _half_face_factors(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Stack (4, ncx, ncy) such that area * sum(F^2) over cells = face L2 norm^2."""
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    return np.stack([u[:-1, :] * inv_sqrt2, u[1:, :] * inv_sqrt2,
                     v[:, :-1] * inv_sqrt2, v[:, 1:] * inv_sqrt2])


@dataclass
class SpectralBasis:
    """Ordered eigenpairs with staggered velocities and quadrature factors.

    `f` holds per-mode half-face factors: the exact L2 pairing over any cell
    union is  area * sum_{marked cells} f_i . f_j , which reproduces the
    eigenvector B-orthonormality without quadrature error.
    """

    domain: RectDomain
    lams: np.ndarray          # (J,)
    psi: np.ndarray           # (J, n_x+2, n_y+2)
    u: np.ndarray             # (J, n_x+2, n_y+1)
    v: np.ndarray             # (J, n_x+1, n_y+2)
    uc: np.ndarray            # (J, ncx, ncy)
    vc: np.ndarray            # (J, ncx, ncy)
    f: np.ndarray             # (J, 4, ncx, ncy)
    method: str
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.lams)

    def mode(self, j: int) -> VelocityMode:
        return VelocityMode(j, float(self.lams[j]), self.psi[j], self.u[j], self.v[j])

    def modes(self) -> list[VelocityMode]:
        return [self.mode(j) for j in range(self.size)]

    def count_below(self, lam: float) -> int:
        return int((self.lams <= lam).sum())


@dataclass(frozen=True)
class ModalState:
    """Truncated coefficient vector for a solution of the evolution problem."""

    a: np.ndarray
    basis: SpectralBasis
    t: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.shape != (self.basis.size,):
            raise ValueError("coefficient length does not match the basis")
        object.__setattr__(self, "a", a)

    @property
    def h_norm(self) -> float:
        return float(np.linalg.norm(self.a))


@dataclass(frozen=True)
class Field:
    """Velocity field synthesized from modal coefficients."""

    domain: RectDomain
    u: np.ndarray
    v: np.ndarray
    uc: np.ndarray
    vc: np.ndarray
    f: np.ndarray


def _build_mode_arrays(domain: RectDomain, psi_int: np.ndarray):
    """Pad, normalize in the face L2 norm, fix sign, quantize, rebuild faces."""
    nx, ny = domain.n_x, domain.n_y
    psi = np.zeros((nx + 2, ny + 2))
    psi[1:-1, 1:-1] = psi_int.reshape(nx, ny)
    u, v = _faces(psi, domain)
    nrm = np.sqrt(domain.cell_area * (np.sum(u * u) + np.sum(v * v)))
    psi = psi / nrm
    flat = np.argmax(np.abs(psi))
    if psi.ravel()[flat] < 0:
        psi = -psi
    psi = np.round(psi / _QUANTUM) * _QUANTUM
    u, v = _faces(psi, domain)
    return psi, u, v


def solve_modes(domain: RectDomain, j_count: int | None = None,
                lam_max: float | None = None, method: str = "dense",
                certify: bool = True) -> SpectralBasis:
    """Solve A psi = lambda B psi and package the leading eigenpairs.

    Either `j_count` (number of modes) or `lam_max` (eigenvalue cutoff) must be
    given.  The dense path solves the full generalized symmetric problem and is
    the oracle; the iterative path uses shift-invert Lanczos (ARPACK).  With a
    `lam_max` cutoff the completeness of the returned list is certified against
    the inertia of A - lam_max B.
    """
    if (j_count is None) == (lam_max is None):
        raise ValueError("specify exactly one of j_count or lam_max")
    a, b = assemble_operators(domain)
    n = a.shape[0]
    if method == "dense":
        if n > 4096:
            raise ValueError("dense path limited to 4096 interior dof")
        w, vecs = scipy.linalg.eigh(a.toarray(), b.toarray())
    elif method == "iterative":
        want = j_count if j_count is not None else 8
        w = vecs = None
        while True:
            k = min(want, n - 2)
            v0 = np.full(n, 1.0 / np.sqrt(n))
            try:
                w, vecs = spla.eigsh(a.tocsc(), k=k, M=b.tocsc(), sigma=0.0,
                                     which="LM", v0=v0)
            except spla.ArpackNoConvergence as exc:  # pragma: no cover
                raise RuntimeError(f"shift-invert Lanczos did not converge: {exc}")
            order = np.argsort(w)
            w, vecs = w[order], vecs[:, order]
            if lam_max is None or w[-1] > lam_max or k == n - 2:
                break
            want *= 2
    else:
        raise ValueError(f"unknown method {method!r}")

    if lam_max is not None:
        keep = int((w <= lam_max).sum())
        if keep == 0:
            raise ValueError("no eigenvalue at or below the requested cutoff")
        if keep < len(w) and (w[keep] - w[keep - 1]) < _CLUSTER_RTOL * w[keep - 1]:
            keep += 1  # do not split a numerically degenerate cluster
    else:
        keep = min(j_count, len(w))
        while keep < len(w) and (w[keep] - w[keep - 1]) < _CLUSTER_RTOL * w[keep - 1]:
            keep += 1
    w, vecs = w[:keep], vecs[:, :keep]

    meta = {"grid": (domain.n_x, domain.n_y), "method": method,
            "j_count": j_count, "lam_max": lam_max}
    if lam_max is not None and certify:
        count = inertia_below(domain, lam_max * (1.0 + 1e-12), ops=(a, b))
        meta["inertia_below_cutoff"] = count
        if count != keep:
            raise RuntimeError(
                f"completeness check failed: inertia {count} vs {keep} computed modes")

    psis, us, vs = [], [], []
    for j in range(keep):
        psi, u, v = _build_mode_arrays(domain, vecs[:, j])
        psis.append(psi)
        us.append(u)
        vs.append(v)
    psi = np.stack(psis)
    u = np.stack(us)
    v = np.stack(vs)
    uc = 0.5 * (u[:, :-1, :] + u[:, 1:, :])
    vc = 0.5 * (v[:, :, :-1] + v[:, :, 1:])
    f = np.stack([_half_face_factors(u[j], v[j]) for j in range(keep)])
    return SpectralBasis(domain, w.copy(), psi, u, v, uc, vc, f, method, meta)


def synthesize_field(basis: SpectralBasis, a: np.ndarray) -> Field:
    a = np.asarray(a, dtype=float)
    if a.shape != (basis.size,):
        raise ValueError("coefficient length does not match the basis")
    return Field(basis.domain,
                 np.tensordot(a, basis.u, 1), np.tensordot(a, basis.v, 1),
                 np.tensordot(a, basis.uc, 1), np.tensordot(a, basis.vc, 1),
                 np.tensordot(a, basis.f, 1))


def evolve(state: ModalState, dt: float) -> ModalState:
    """Semigroup step a_j -> a_j exp(-lambda_j dt)."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return ModalState(state.a * np.exp(-state.basis.lams * dt),
                      state.basis, state.t + dt)


def _central_derivative(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    return np.gradient(arr, h, axis=axis, edge_order=2)


def derivative_growth_check(basis: SpectralBasis, a: np.ndarray, lam_cutoff: float,
                            ball: SpatialMask, radius: float,
                            max_order: int = 3) -> dict:
    """Measure sup |d^alpha u| over the ball against the factorial envelope.

    Returns the table of normalized ratios r(alpha) together with a linear fit
    of log r against |alpha|, exhibited as (rho_hat, K_hat, r2).
    """
    if max_order > 4:
        raise ValueError("finite-difference differentiation supports order <= 4")
    dom = basis.domain
    if min(dom.n_cells_x, dom.n_cells_y) < 2 * (max_order + 1):
        raise ValueError("grid too coarse for the requested derivative order")
    fld = synthesize_field(basis, a)
    norm_a = float(np.linalg.norm(a))
    if norm_a == 0:
        raise ValueError("zero coefficient vector")
    mask = ball.indicator

    # all mixed derivatives up to max_order by successive central differencing
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {(0, 0): (fld.uc, fld.vc)}
    table = []
    for total in range(max_order + 1):
        for p in range(total + 1):
            q = total - p
            if (p, q) not in cache:
                if p > 0:
                    du, dv = cache[(p - 1, q)]
                    cache[(p, q)] = (_central_derivative(du, 0, dom.h_x),
                                     _central_derivative(dv, 0, dom.h_x))
                else:
                    du, dv = cache[(p, q - 1)]
                    cache[(p, q)] = (_central_derivative(du, 1, dom.h_y),
                                     _central_derivative(dv, 1, dom.h_y))
            du, dv = cache[(p, q)]
            sup = float(np.max(np.hypot(du[mask], dv[mask])))
            table.append({"alpha": (p, q), "order": total,
                          "sup": sup, "ratio": sup / (factorial(total) * norm_a)})

    orders = np.array([row["order"] for row in table], dtype=float)
    logs = np.log([max(row["ratio"], 1e-300) for row in table])
    slope, intercept = np.polyfit(orders, logs, 1)
    pred = slope * orders + intercept
    ss_res = float(np.sum((logs - pred) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    rho_hat = float(np.exp(-slope) / radius)
    k_hat = float(max(intercept, 0.0) / np.sqrt(lam_cutoff))
    return {"table": table, "slope": float(slope), "intercept": float(intercept),
            "rho_hat": rho_hat, "K_hat": k_hat, "r2": r2}


def save_basis(basis: SpectralBasis, path) -> None:
    """Archive grid metadata, eigenvalues, and stream arrays."""
    dom = basis.domain
    np.savez_compressed(
        path,
        domain=np.array([dom.lx, dom.ly, dom.n_x, dom.n_y, dom.t_horizon, dom.n_t]),
        lams=basis.lams, psi=basis.psi, method=np.array(basis.method))


def load_basis(path) -> SpectralBasis:
    with np.load(path, allow_pickle=False) as data:
        lx, ly, nx, ny, t_h, n_t = data["domain"]
        dom = build_domain(lx, ly, int(nx), int(ny), t_h, int(n_t))
        lams = data["lams"]
        psi = data["psi"]
        method = str(data["method"])
    us, vs = [], []
    for j in range(len(lams)):
        u, v = _faces(psi[j], dom)
        us.append(u)
        vs.append(v)
    u = np.stack(us)
    v = np.stack(vs)
    uc = 0.5 * (u[:, :-1, :] + u[:, 1:, :])
    vc = 0.5 * (v[:, :, :-1] + v[:, :, 1:])
    f = np.stack([_half_face_factors(u[j], v[j]) for j in range(len(lams))])
    return SpectralBasis(dom, lams, psi, u, v, uc, vc, f, method, {"loaded": True})

"""Localised resolvent block norms and the deterministic decay checks.

The resolvent R(E) = (H - E)^{-1} of the assembled pencil acts on coefficient
vectors as S(E)^{-1} M with S(E) = K + P - E M, and is self-adjoint in the
M inner product.  A block norm ||chi_A R(E) chi_B|| is realised between the
M-weighted subspaces spanned by the hat functions whose nodes fall in the
closed regions A and B:

    ||T||^2 = lambda_max( F' M_AA^{-1} F,  M_BB ),   F = (M S^{-1} M)_{A,B}.

F is symmetric under swapping A and B, so the computed norm is exactly
symmetric, and for A = B = everything it reduces to 1/dist(E, spectrum) of
the discrete pencil.  Small masks go through a dense column-solve path (a
factorisation of S plus one solve per mask column); large masks through a
matrix-free power iteration in the same geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh, splu

from .assembly import DiscreteOperator
from .lattice import GraphRegion, LatticeBox, region_mask, set_distance
from .spectral import SolverError, eigen_low

__all__ = [
    "ResolventProbe",
    "DecayFit",
    "fit_decay",
    "combes_thomas_experiment",
    "gri_experiment",
    "resolvent_identity_residuals",
    "caccioppoli_check",
]

DENSE_COLUMNS = 900


def _submatrix(mat, idx):
    return mat[idx][:, idx]


class ResolventProbe:
    """Factorised resolvent of one operator at one energy.

    The energy must lie in the resolvent set; energies below the exact lower
    bound min(omega) are certified analytically, anything else is checked
    against the nearest computed eigenvalue unless the caller vouches for a
    gap with ``assume_in_resolvent_set``.
    """

    def __init__(
        self,
        op: DiscreteOperator,
        energy: float,
        assume_in_resolvent_set: bool = False,
        spectrum_atol: float = 1e-10,
    ):
        self.op = op
        self.energy = float(energy)
        if not assume_in_resolvent_set:
            gap = self.distance_to_spectrum()
            if gap < spectrum_atol:
                raise ValueError(
                    f"energy {energy} is within {gap:.2e} of the spectrum"
                )
        self._lu = splu(op.pencil(self.energy).tocsc())

    def distance_to_spectrum(self) -> float:
        lower = float(self.op.omega.min())
        if self.energy < lower:
            return lower - self.energy
        n = self.op.n_dofs
        if n <= 1500:
            from scipy.linalg import eigvalsh

            vals = eigvalsh(self.op.hamiltonian().toarray(), self.op.M.toarray())
            return float(np.abs(vals - self.energy).min())
        try:
            near, _ = eigsh(
                self.op.hamiltonian(),
                k=min(4, n - 1),
                M=self.op.M,
                sigma=self.energy,
                which="LM",
                v0=np.ones(n),
            )
        except Exception:
            return 0.0  # factorisation at E failed: effectively on the spectrum
        return float(np.abs(np.asarray(near) - self.energy).min())

    def apply(self, g: np.ndarray) -> np.ndarray:
        """Resolvent action on an L2 element given by coefficients g."""
        return self._lu.solve(self.op.M @ g)

    def solve_load(self, load: np.ndarray) -> np.ndarray:
        """Solve S(E) u = load for an already-assembled dual load."""
        return self._lu.solve(load)

    # -- block norms -------------------------------------------------------

    def block_norm(
        self,
        dofs_a: np.ndarray,
        dofs_b: np.ndarray,
        tol: float = 1e-6,
        method: str = "auto",
    ) -> float:
        """Operator norm of the A-localised resolvent applied to B-supported data.

        dofs_a / dofs_b are boolean masks or index arrays over DOFs (use
        DiscreteOperator.region_dofs).  Exactly symmetric in (A, B).
        """
        ia = self._as_index(dofs_a)
        ib = self._as_index(dofs_b)
        if ia.size == 0 or ib.size == 0:
            raise ValueError("empty DOF mask")
        # the reduced matrix F is symmetric under the swap; solve with the
        # smaller side as columns
        if ib.size <= ia.size:
            cols, rows = ib, ia
        else:
            cols, rows = ia, ib
        if method == "auto":
            small = cols.size <= DENSE_COLUMNS and self.op.n_dofs * cols.size <= 40_000_000
            method = "dense" if small else "krylov"
        if method == "dense":
            return self._block_norm_dense(rows, cols)
        if method == "krylov":
            return self._block_norm_krylov(rows, cols, tol)
        raise ValueError(f"unknown method {method!r}")

    def _as_index(self, dofs) -> np.ndarray:
        dofs = np.asarray(dofs)
        if dofs.dtype == bool:
            return np.nonzero(dofs)[0]
        return dofs.astype(np.int64)

    def _block_norm_dense(self, rows, cols) -> float:
        M = self.op.M
        rhs = M.tocsc()[:, cols].toarray()
        X = self._lu.solve(rhs)                       # S^{-1} M restricted to cols
        F = np.asarray(M[rows, :].dot(X))             # (n_rows, n_cols)
        m_rr = _submatrix(M, rows).tocsc()
        g = splu(m_rr).solve(F)                       # M_AA^{-1} F
        Q = F.T @ g
        Q = 0.5 * (Q + Q.T)
        m_cc = np.asarray(_submatrix(M, cols).todense())
        lam = eigh(Q, m_cc, subset_by_index=(len(cols) - 1, len(cols) - 1), eigvals_only=True)
        return float(np.sqrt(max(lam[0], 0.0)))

    def _block_norm_krylov(self, rows, cols, tol, maxiter: int = 400) -> float:
        M = self.op.M
        m_rr = splu(_submatrix(M, rows).tocsc())
        m_cc = _submatrix(M, cols).tocsc()
        m_cc_lu = splu(m_cc)
        m_cols = M.tocsc()[:, cols]
        m_rows = M[rows, :].tocsr()

        def f_apply(u):
            x = self._lu.solve(m_cols @ u)
            return m_rows @ x

        def ft_apply(y):
            x = self._lu.solve(m_rows.T @ y)
            return m_cols.T @ x

        # power iteration on the M_BB-generalised pencil F' M_AA^{-1} F
        u = np.ones(len(cols))
        u /= np.sqrt(u @ (m_cc @ u))
        lam_old = 0.0
        for it in range(maxiter):
            w = ft_apply(m_rr.solve(f_apply(u)))
            v = m_cc_lu.solve(w)
            lam = float(u @ w)
            nrm = np.sqrt(max(v @ (m_cc @ v), 1e-300))
            u = v / nrm
            if it > 2 and abs(lam - lam_old) <= tol * max(lam, 1e-300):
                return float(np.sqrt(max(lam, 0.0)))
            lam_old = lam
        raise SolverError(
            f"block-norm power iteration did not converge in {maxiter} steps "
            f"(last value {lam_old:.6e})"
        )


# ---------------------------------------------------------------------------
# exponential decay fits
# ---------------------------------------------------------------------------

NORM_FLOOR = 1e-13


@dataclass
class DecayFit:
    """Least-squares fit of log(norm) against separation."""

    deltas: np.ndarray
    norms: np.ndarray
    used: np.ndarray              # mask of samples above the numerical floor
    rate: float                   # gamma: norm ~ prefactor * exp(-gamma * delta)
    prefactor: float
    r_squared: float

    def to_rows(self):
        return list(zip(self.deltas.tolist(), self.norms.tolist(), self.used.tolist()))


def fit_decay(deltas, norms, floor: float = NORM_FLOOR) -> DecayFit:
    deltas = np.asarray(deltas, dtype=float)
    norms = np.asarray(norms, dtype=float)
    used = norms > floor
    if used.sum() < 2:
        raise ValueError("need at least two norms above the numerical floor")
    x = deltas[used]
    y = np.log(norms[used])
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(deltas, norms, used, -float(slope), float(np.exp(intercept)), r2)


def _certify_window(op: DiscreteOperator, window) -> None:
    """Refuse unless (r, s) provably contains no eigenvalue."""
    r, s = float(window[0]), float(window[1])
    if s <= r:
        raise ValueError("empty spectral window")
    if s < float(op.omega.min()):
        return  # entirely below the exact lower bound of the spectrum
    spec = eigen_low(op, count=min(16, op.n_dofs), tol=1e-7)
    inside = spec.in_window(r, s)
    if inside.size:
        raise ValueError(f"window ({r}, {s}) contains eigenvalues {spec.eigenvalues[inside]}")
    if spec.eigenvalues[-1] < s:
        raise ValueError("window certification inconclusive; enlarge the probe count")


def combes_thomas_experiment(
    op: DiscreteOperator,
    window,
    energy: float,
    region_pairs,
    tol: float = 1e-6,
) -> dict:
    """Measure ||chi_A R(E) chi_B|| along a family of separations and fit the
    exponential decay.

    region_pairs is a list of (region_a, region_b); their Euclidean set
    distance is the abscissa of the fit.  The window (r, s) must be certified
    free of spectrum and contain E; eta = dist(E, {r, s}).  Returns the fit,
    the per-sample rows, and the self-consistent prefactor constant c1 such
    that norm_i <= (c1 / eta) exp(-rate * delta_i) for every sample used.
    """
    r, s = float(window[0]), float(window[1])
    if not (r < energy < s):
        raise ValueError("energy must lie inside the window")
    _certify_window(op, window)
    eta = min(energy - r, s - energy)

    probe = ResolventProbe(op, energy, assume_in_resolvent_set=True)
    deltas, norms = [], []
    for reg_a, reg_b in region_pairs:
        mask_a = region_mask(op.graph, reg_a, allow_override=True)
        mask_b = region_mask(op.graph, reg_b, allow_override=True)
        delta = set_distance(op.graph, mask_a, mask_b)
        if delta < 1.0:
            raise ValueError(f"regions must be separated by at least 1, got {delta}")
        da = op.region_dofs(reg_a, allow_override=True)
        db = op.region_dofs(reg_b, allow_override=True)
        deltas.append(delta)
        norms.append(probe.block_norm(da, db, tol=tol))

    fit = fit_decay(deltas, norms)
    used = fit.used
    c1 = float(
        np.max(np.asarray(norms)[used] * eta * np.exp(fit.rate * np.asarray(deltas)[used]))
    )
    return {
        "energy": energy,
        "window": (r, s),
        "eta": eta,
        "eta_times_width": eta * (s - r),
        "deltas": list(map(float, deltas)),
        "norms": list(map(float, norms)),
        "fit_rate": fit.rate,
        "fit_prefactor": fit.prefactor,
        "r_squared": fit.r_squared,
        "c1_empirical": c1,
        "fit": fit,
    }


def gri_experiment(
    op_inner: DiscreteOperator,
    op_outer: DiscreteOperator,
    energy: float,
    region_a: GraphRegion,
    region_b: GraphRegion,
    tol: float = 1e-6,
    allow_override: bool = True,
    assume_in_resolvent_set: bool = False,
) -> dict:
    """One nested-box resolvent comparison.

    A must sit inside the interior third of the inner box and B inside the
    outer box but away from the inner one; the collar of the inner box is the
    interface.  Returns the three block norms and the ratio
    lhs / (rhs_outer * rhs_inner), whose distribution over disorder samples
    estimates the geometric constant.
    """
    gin, gout = op_inner.graph, op_outer.graph
    if gin.box.dimension != gout.box.dimension or gin.box.side >= gout.box.side:
        raise ValueError("need strictly nested boxes of equal dimension")
    ok = gin.box.suitable or (allow_override and gin.box.override_suitable)
    ok &= gout.box.suitable or (allow_override and gout.box.override_suitable)
    if not ok:
        raise ValueError("both boxes must be suitable (or override-suitable)")

    collar = GraphRegion(gin.box, "out")
    mask_a = region_mask(gin, region_a, allow_override=True)
    mask_int = region_mask(gin, GraphRegion(gin.box, "int"), allow_override=True)
    if not mask_a.any() or np.any(mask_a & ~mask_int):
        raise ValueError("region A must lie inside the interior third of the inner box")
    # B must avoid the inner box entirely
    mask_b_outer = region_mask(gout, region_b, allow_override=True)
    in_inner = gout.edge_in_closed_box(gin.box)
    if not mask_b_outer.any() or np.any(mask_b_outer & in_inner):
        raise ValueError("region B must lie in the outer box minus the inner box")

    probe_out = ResolventProbe(op_outer, energy, assume_in_resolvent_set)
    probe_in = ResolventProbe(op_inner, energy, assume_in_resolvent_set)

    dofs_a_out = op_outer.region_dofs(region_a, allow_override=True)
    dofs_b_out = op_outer.region_dofs(region_b, allow_override=True)
    collar_out = op_outer.region_dofs(collar, allow_override=True)
    dofs_a_in = op_inner.region_dofs(region_a, allow_override=True)
    collar_in = op_inner.region_dofs(collar, allow_override=True)

    lhs = probe_out.block_norm(dofs_b_out, dofs_a_out, tol=tol)
    rhs_outer = probe_out.block_norm(dofs_b_out, collar_out, tol=tol)
    rhs_inner = probe_in.block_norm(collar_in, dofs_a_in, tol=tol)
    product = rhs_outer * rhs_inner
    return {
        "lhs": lhs,
        "rhs_outer": rhs_outer,
        "rhs_inner": rhs_inner,
        "product": product,
        "ratio": lhs / product if product > 0 else np.inf,
    }


# ---------------------------------------------------------------------------
# geometric resolvent identity (discrete verification)
# ---------------------------------------------------------------------------


def _embed_dofs(op_inner: DiscreteOperator, op_outer: DiscreteOperator) -> np.ndarray:
    """Index map J with J[i] = outer DOF carrying inner DOF i (same position)."""
    from .lattice import edge_injection

    gin, gout = op_inner.graph, op_outer.graph
    if op_inner.m != op_outer.m or op_inner.mode != op_outer.mode:
        raise ValueError("operators must share subdivision and coupling mode")
    emap = edge_injection(gin, gout)
    J = np.empty(op_inner.n_dofs, dtype=np.int64)
    J[op_inner.chains] = op_outer.chains[emap]
    if op_inner.mode == "kirchhoff":
        vmap = np.array([gout.vertex_id(v) for v in gin.vertices], dtype=np.int64)
        J[: gin.n_vertices] = vmap
    return J


def _cutoff_values(op: DiscreteOperator, box: LatticeBox) -> np.ndarray:
    """Piecewise-linear cutoff: 1 inside the box shrunk by 8, 0 outside the box
    shrunk by 4, linear ramp along edges in between.  Linear on every edge, so
    it is exactly representable in the P1 space for any subdivision."""
    L = box.side
    center = np.asarray(box.center, dtype=float)
    sup = np.abs(op.dof_pos - center).max(axis=1)
    return np.clip(((L - 4) / 2.0 - sup) / 2.0, 0.0, 1.0)


def _commutator_load_matrix(op_inner, op_outer, J, psi_outer):
    """Sparse load operator for the first-order commutator term.

    For the cutoff slope c_e on edge e (constant per edge) and a cell with
    endpoint DOFs (l, r), the exact weak pairing
    (psi' v', phi_i) - (psi' v, phi_i') contributes  +c_e v_r to the load at l
    and -c_e v_l to the load at r.  Returns a matrix acting on outer
    coefficient vectors and producing inner-space loads.
    """
    from scipy.sparse import coo_matrix

    gin = op_inner.graph
    m = op_inner.m
    psi_tail = psi_outer[J[op_inner.chains[:, 0]]]
    psi_head = psi_outer[J[op_inner.chains[:, -1]]]
    slope = psi_head - psi_tail  # per-edge constant derivative of the cutoff

    left_in = op_inner.chains[:, :-1]
    right_in = op_inner.chains[:, 1:]
    left_out = J[left_in]
    right_out = J[right_in]
    c = np.repeat(slope[:, None], m, axis=1)

    rows = np.concatenate([left_in, right_in], axis=None)
    cols = np.concatenate([right_out, left_out], axis=None)
    data = np.concatenate([c, -c], axis=None)
    return coo_matrix(
        (data, (rows, cols)), shape=(op_inner.n_dofs, op_outer.n_dofs)
    ).tocsr()


def resolvent_identity_residuals(
    op_inner: DiscreteOperator,
    op_outer: DiscreteOperator,
    z: float,
    n_vectors: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """Residuals of the nested-box resolvent identity on random data.

    With R = resolvent of the inner box, R' of the outer box, and psi the
    standard interior cutoff, both sides of

        R psi g  =  psi R' g  +  R [psi' D + D psi'] R' g

    are applied to unit-M-norm random vectors g on the outer graph and the
    M-norm of the difference is returned per vector.  All multiplications by
    psi act on nodal values (psi is exactly P1 here); the commutator load is
    assembled with exact cell quadrature.
    """
    J = _embed_dofs(op_inner, op_outer)
    psi = _cutoff_values(op_outer, op_inner.graph.box)
    if np.any(psi[np.setdiff1d(np.arange(op_outer.n_dofs), J)] != 0.0):
        raise AssertionError("cutoff must vanish outside the inner box")

    probe_in = ResolventProbe(op_inner, z)
    probe_out = ResolventProbe(op_outer, z)
    B = _commutator_load_matrix(op_inner, op_outer, J, psi)

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 17], dtype=np.uint64)))
    Mo = op_outer.M
    residuals = np.empty(n_vectors)
    for i in range(n_vectors):
        g = rng.standard_normal(op_outer.n_dofs)
        g /= np.sqrt(g @ (Mo @ g))
        v = probe_out.apply(g)

        lhs_inner = probe_in.apply((psi * g)[J])
        lhs = np.zeros(op_outer.n_dofs)
        lhs[J] = lhs_inner

        term1 = psi * v
        term2 = np.zeros(op_outer.n_dofs)
        term2[J] = probe_in.solve_load(B @ v)

        diff = lhs - term1 - term2
        residuals[i] = np.sqrt(diff @ (Mo @ diff))
    return residuals


def caccioppoli_check(
    op: DiscreteOperator,
    energy: float,
    source_region: GraphRegion,
    domain: GraphRegion,
    subdomain: GraphRegion,
    n_vectors: int = 10,
    seed: int = 0,
) -> dict:
    """Interior gradient bound for solutions of (H - E) u = g with g supported
    away from the domain.

    For u = R(E)(chi_source f) the derivative energy on the inner subdomain is
    compared against ||u|| + ||g|| on the domain; the empirical constants are
    returned (the inequality itself carries a geometry constant, so this
    reports rather than asserts).
    """
    probe = ResolventProbe(op, energy)
    src = op.region_dofs(source_region, allow_override=True)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 23], dtype=np.uint64)))
    ratios = []
    for _ in range(n_vectors):
        f = rng.standard_normal(op.n_dofs)
        g = np.where(src, f, 0.0)
        u = probe.apply(g)
        du = op.region_deriv_l2(u, subdomain)
        uu = op.region_l2(u, domain)
        gg = op.region_l2(g, domain)
        ratios.append(du / (uu + gg) if uu + gg > 0 else np.inf)
    ratios = np.asarray(ratios)
    return {
        "ratios": ratios,
        "c_empirical": float(ratios.max()),
        "median": float(np.median(ratios)),
    }

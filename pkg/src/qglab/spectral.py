"""Low-lying spectrum solvers, the exact secular oracle, and semigroup norms.

Two independent routes to the spectrum are kept deliberately separate:

* ``eigen_low`` solves the assembled generalised eigenproblem
  (K + P) v = lambda M v, densely below a size threshold and by shift-invert
  Lanczos above it.

* ``secular_eigenvalues`` never discretises.  On each edge the equation
  -f'' + omega_e f = E f is solved in closed form, and an eigenvalue of the
  graph operator is an energy where the vertex conditions (continuity plus
  vanishing sum of outgoing derivatives, Neumann at the boundary) admit a
  nontrivial solution.  With x = E - omega_e and the entire functions
  C(x) = cos(sqrt x), S(x) = sin(sqrt x)/sqrt x the condition reads
  M(E) phi = 0 for the vertex-values matrix

      M(E)_vv = -sum_{e at v} C(x_e)/S(x_e),    M(E)_vu = sum_{e=vu} 1/S(x_e),

  which covers the oscillatory and the evanescent branch in one formula.
  The vertex matrix has poles where S(x_e) = 0 (edge-interior resonances);
  those energies are known in closed form and are examined with a pole-free
  edge-coefficient matrix that detects eigenfunctions vanishing at vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, svd
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import eigsh
from scipy.special import erfc

from .assembly import DiscreteOperator

__all__ = [
    "SpectralResult",
    "SecularSample",
    "SecularScan",
    "eigen_low",
    "eigen_all",
    "secular_sample",
    "secular_eigenvalues",
    "semigroup_sup_norm",
    "SemigroupNorm",
]

DENSE_THRESHOLD = 2000


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to converge (with diagnostics)."""


@dataclass
class SpectralResult:
    """Ascending generalised eigenpairs with M-orthonormal vectors."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray      # columns, M-orthonormal
    residuals: np.ndarray         # ||(K+P)v - lam Mv|| / ||Mv||
    method: str
    tol: float

    def __post_init__(self):
        order = np.argsort(self.eigenvalues)
        self.eigenvalues = np.asarray(self.eigenvalues)[order]
        self.eigenvectors = np.asarray(self.eigenvectors)[:, order]
        self.residuals = np.asarray(self.residuals)[order]

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def in_window(self, lo: float, hi: float) -> np.ndarray:
        return np.nonzero((self.eigenvalues >= lo) & (self.eigenvalues <= hi))[0]

    def to_csv(self) -> str:
        lines = ["index,eigenvalue,residual"]
        lines += [
            f"{i},{v!r},{r!r}"
            for i, (v, r) in enumerate(zip(self.eigenvalues, self.residuals))
        ]
        return "\n".join(lines) + "\n"


def _residuals(op: DiscreteOperator, vals, vecs) -> np.ndarray:
    A = op.hamiltonian()
    out = np.empty(len(vals))
    for i, lam in enumerate(vals):
        v = vecs[:, i]
        mv = op.M @ v
        out[i] = np.linalg.norm(A @ v - lam * mv) / np.linalg.norm(mv)
    return out


def _deterministic_start(n: int) -> np.ndarray:
    # fixed, seed-free start vector keeps Lanczos runs bit-reproducible
    v = 1.0 + 0.1 * np.sin(np.arange(n, dtype=float))
    return v / np.linalg.norm(v)


def eigen_low(
    op: DiscreteOperator,
    count: int,
    tol: float = 1e-9,
    dense_threshold: int = DENSE_THRESHOLD,
) -> SpectralResult:
    """Lowest ``count`` generalised eigenpairs of (K+P, M).

    Dense LAPACK below ``dense_threshold`` unknowns, shift-invert Lanczos with
    a deterministic start vector above.  The shift sits strictly below the
    spectrum (which is bounded below by min omega), so the factorised matrix
    is definite and the lowest cluster is found reliably.
    """
    n = op.n_dofs
    if not (1 <= count <= n):
        raise ValueError(f"count must be in 1..{n}")
    A = op.hamiltonian()
    # dense costs O(n^3) regardless of count; prefer shift-invert for a few
    # pairs on mid-sized problems
    use_dense = count > n - 2 or n <= 400 or (n <= dense_threshold and count >= n // 50)
    if use_dense:
        vals, vecs = eigh(
            A.toarray(), op.M.toarray(), subset_by_index=(0, count - 1)
        )
        method = "dense"
    else:
        sigma = float(op.omega.min()) - 1.0
        try:
            vals, vecs = eigsh(
                A,
                k=count,
                M=op.M,
                sigma=sigma,
                which="LM",
                v0=_deterministic_start(n),
                maxiter=max(1000, 40 * count),
                tol=0.0,
            )
        except Exception as exc:  # ArpackNoConvergence and friends
            raise SolverError(f"shift-invert Lanczos failed: {exc!r}") from exc
        method = "shift-invert"
    res = _residuals(op, vals, vecs)
    result = SpectralResult(vals, vecs, res, method, tol)
    bad = result.residuals > tol * max(1.0, abs(result.eigenvalues[-1]))
    if bad.any():
        raise SolverError(
            f"eigenpair residuals exceed tolerance: max {result.residuals.max():.3e}"
        )
    return result


def eigen_all(op: DiscreteOperator, tol: float = 1e-7) -> SpectralResult:
    """Full dense decomposition (for semigroup sums on desk-scale boxes)."""
    vals, vecs = eigh(op.hamiltonian().toarray(), op.M.toarray())
    res = _residuals(op, vals, vecs)
    return SpectralResult(vals, vecs, res, "dense-full", tol)


def eigen_below(
    op: DiscreteOperator,
    threshold: float,
    tol: float = 1e-9,
    dense_threshold: int = DENSE_THRESHOLD,
    k0: int = 8,
) -> SpectralResult:
    """All generalised eigenpairs with eigenvalue <= threshold.

    Dense problems use LAPACK's value-window driver; large ones grow a
    shift-invert batch until the window is exhausted.  May return an empty
    result when the spectrum starts above the threshold.
    """
    n = op.n_dofs
    if n <= dense_threshold:
        vals, vecs = eigh(
            op.hamiltonian().toarray(),
            op.M.toarray(),
            subset_by_value=(-np.inf, threshold),
        )
        res = _residuals(op, vals, vecs) if len(vals) else np.empty(0)
        return SpectralResult(vals, vecs.reshape(n, -1), res, "dense-window", tol)
    k = k0
    while True:
        result = eigen_low(op, count=min(k, n), tol=tol)
        if result.eigenvalues[-1] > threshold or result.count == n:
            break
        k *= 2
    keep = result.eigenvalues <= threshold
    return SpectralResult(
        result.eigenvalues[keep],
        result.eigenvectors[:, keep],
        result.residuals[keep],
        result.method,
        tol,
    )


# ---------------------------------------------------------------------------
# secular oracle
# ---------------------------------------------------------------------------


def _cs(x):
    """Entire pair C(x) = cos(sqrt x), S(x) = sin(sqrt x)/sqrt x.

    For x < 0 these continue to cosh/sinh of sqrt(-x); near zero a series
    keeps full accuracy.
    """
    x = np.asarray(x, dtype=float)
    C = np.empty_like(x)
    S = np.empty_like(x)
    small = np.abs(x) < 1e-8
    xs = x[small]
    C[small] = 1.0 - xs / 2.0 + xs * xs / 24.0
    S[small] = 1.0 - xs / 6.0 + xs * xs / 120.0
    pos = (~small) & (x > 0)
    k = np.sqrt(x[pos])
    C[pos] = np.cos(k)
    S[pos] = np.sin(k) / k
    neg = (~small) & (x < 0)
    ka = np.sqrt(-x[neg])
    C[neg] = np.cosh(ka)
    S[neg] = np.sinh(ka) / ka
    return C, S


@dataclass
class SecularSample:
    """Vertex secular matrix at one energy, with its singular extremes."""

    energy: float
    wavenumbers_sq: np.ndarray    # x_e = E - omega_e per edge
    matrix: np.ndarray            # (n_vertices, n_vertices), symmetric real
    sigma_min: float
    sigma_max: float

    @property
    def det_sign(self) -> float:
        sign, _ = np.linalg.slogdet(self.matrix)
        return sign


def secular_sample(graph, omega, energy: float) -> SecularSample:
    x = energy - np.asarray(omega, dtype=float)
    C, S = _cs(x)
    if np.any(np.abs(S) < 1e-300):
        raise FloatingPointError("energy sits on an edge resonance")
    nv = graph.n_vertices
    mat = np.zeros((nv, nv))
    diag = -C / S
    off = 1.0 / S
    np.add.at(mat, (graph.edge_tail, graph.edge_tail), diag)
    np.add.at(mat, (graph.edge_head, graph.edge_head), diag)
    np.add.at(mat, (graph.edge_tail, graph.edge_head), off)
    np.add.at(mat, (graph.edge_head, graph.edge_tail), off)
    sv = svd(mat, compute_uv=False)
    return SecularSample(energy, x, mat, float(sv[-1]), float(sv[0]))


def _edge_matrix(graph, omega, energy: float) -> np.ndarray:
    """Pole-free matching matrix in per-edge coefficients (value, slope).

    Edge e carries f_e(t) = a_e C(x, t) + b_e S(x, t) with f_e(0) = a_e,
    f_e'(0) = b_e.  Rows: continuity chains at every vertex plus one
    current-conservation row per vertex.  Entries are entire in the energy,
    so eigenvalues at edge resonances (including eigenfunctions vanishing at
    all vertices) show up as ordinary rank drops.
    """
    x = energy - np.asarray(omega, dtype=float)
    C, S = _cs(x)
    ne = graph.n_edges
    nv = graph.n_vertices
    n = 2 * ne
    rows = []

    def value_coeffs(e, end):
        c = np.zeros(n)
        if end == 0:
            c[2 * e] = 1.0
        else:
            c[2 * e] = C[e]
            c[2 * e + 1] = S[e]
        return c

    def outgoing_slope_coeffs(e, end):
        c = np.zeros(n)
        if end == 0:
            c[2 * e + 1] = 1.0
        else:
            # f'(1) = -x a S + b C; outgoing derivative at the head is -f'(1)
            c[2 * e] = x[e] * S[e]
            c[2 * e + 1] = -C[e]
        return c

    for v in range(nv):
        inc = graph.incident_edges(v)
        for (e1, f1), (e2, f2) in zip(inc[:-1], inc[1:]):
            rows.append(value_coeffs(e1, f1) - value_coeffs(e2, f2))
        kirch = np.zeros(n)
        for e, f in inc:
            kirch += outgoing_slope_coeffs(e, f)
        rows.append(kirch)
    return np.asarray(rows)


def _edge_matrix_multiplicity(graph, omega, energy: float, rel_tol: float = 1e-9) -> int:
    mat = _edge_matrix(graph, omega, energy)
    sv = svd(mat, compute_uv=False)
    scale = max(sv[0], 1.0)
    return int(np.sum(sv < rel_tol * scale))


@dataclass
class SecularScan:
    """Eigenvalues found in a window, with multiplicities and any intervals the
    scan could not resolve (pole collisions)."""

    eigenvalues: np.ndarray
    multiplicities: np.ndarray
    flagged: list = field(default_factory=list)
    poles: np.ndarray = None

    def with_multiplicity(self) -> np.ndarray:
        return np.repeat(self.eigenvalues, self.multiplicities)


def _det_sign(graph, omega, energy: float) -> float:
    return secular_sample(graph, omega, energy).det_sign


def _bisect_sign_change(graph, omega, lo, hi, s_lo, tol):
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        s_mid = _det_sign(graph, omega, mid)
        if s_mid == 0.0:
            return mid
        if s_mid == s_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def secular_eigenvalues(
    graph,
    omega,
    window,
    scan_step: float = 0.01,
    tol: float = 1e-10,
    pole_guard: float = 1e-7,
) -> SecularScan:
    """All eigenvalues of the graph operator in a window, via the secular
    determinant.

    The window is split at the (analytically known) resonance energies
    omega_e + (n pi)^2 of individual edges; inside each pole-free piece the
    determinant sign is scanned on a grid and zeros are refined by bisection
    to ``tol``.  Minima of the smallest singular value that reach zero without
    a sign change (even multiplicity) are refined separately, and the pole
    energies themselves are tested with the edge-coefficient matrix.
    """
    if graph.n_vertices > 400:
        raise ValueError("secular oracle is meant for small graphs (<= ~200 vertices)")
    omega = np.asarray(omega, dtype=float)
    lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        raise ValueError("empty window")

    poles = []
    for w in np.unique(omega):
        nmax = int(np.floor(np.sqrt(max(hi - w, 0.0)) / np.pi)) + 1
        for nn in range(1, nmax + 1):
            p = w + (nn * np.pi) ** 2
            if lo - pole_guard <= p <= hi + pole_guard:
                poles.append(p)
    poles = np.unique(np.asarray(poles))

    roots, mults, flagged = [], [], []

    def record(value, mult):
        for i, r in enumerate(roots):
            if abs(r - value) < 10 * max(tol, 1e-12):
                mults[i] = max(mults[i], mult)
                return
        roots.append(value)
        mults.append(mult)

    # pole energies: rank of the entire edge matrix decides
    for p in poles:
        mult = _edge_matrix_multiplicity(graph, omega, p)
        if mult > 0:
            record(p, mult)

    # pole-free segments
    cuts = [lo] + [p for p in poles if lo < p < hi] + [hi]
    for a, b in zip(cuts[:-1], cuts[1:]):
        a_in = a + pole_guard if a != lo else a
        b_in = b - pole_guard if b != hi else b
        if b_in <= a_in:
            flagged.append((a, b))
            continue
        npts = max(int(np.ceil((b_in - a_in) / scan_step)) + 1, 3)
        grid = np.linspace(a_in, b_in, npts)
        samples = [secular_sample(graph, omega, e) for e in grid]
        signs = np.array([s.det_sign for s in samples])
        smin = np.array([s.sigma_min for s in samples])
        smax = np.array([s.sigma_max for s in samples])

        for i in range(npts - 1):
            if signs[i] == 0.0:
                record(grid[i], 1)
            elif signs[i] * signs[i + 1] < 0:
                root = _bisect_sign_change(
                    graph, omega, grid[i], grid[i + 1], signs[i], tol
                )
                sv = svd(secular_sample(graph, omega, root).matrix, compute_uv=False)
                mult = int(np.sum(sv < 1e-6 * max(sv[0], 1.0)))
                record(root, max(mult, 1))
        if signs[-1] == 0.0:
            record(grid[-1], 1)

        # even-multiplicity dips: local minima of sigma_min without sign change
        for i in range(1, npts - 1):
            if smin[i] <= smin[i - 1] and smin[i] <= smin[i + 1]:
                if signs[i - 1] * signs[i + 1] < 0:
                    continue  # already handled by the sign-change path
                scale = max(smax[i], 1.0)
                slope = max(
                    abs(smin[i + 1] - smin[i - 1]) / (grid[i + 1] - grid[i - 1]), 1e-3
                )
                if smin[i] > 4.0 * slope * scan_step and smin[i] > 1e-6 * scale:
                    continue
                res = minimize_scalar(
                    lambda e: secular_sample(graph, omega, e).sigma_min,
                    bounds=(grid[i - 1], grid[i + 1]),
                    method="bounded",
                    options={"xatol": tol},
                )
                if res.fun < 1e-7 * scale:
                    sv = svd(
                        secular_sample(graph, omega, res.x).matrix, compute_uv=False
                    )
                    mult = int(np.sum(sv < 1e-6 * max(sv[0], 1.0)))
                    record(float(res.x), max(mult, 1))

    order = np.argsort(roots) if roots else []
    return SecularScan(
        eigenvalues=np.asarray([roots[i] for i in order]),
        multiplicities=np.asarray([mults[i] for i in order], dtype=int),
        flagged=flagged,
        poles=poles,
    )


# ---------------------------------------------------------------------------
# heat semigroup
# ---------------------------------------------------------------------------


@dataclass
class SemigroupNorm:
    value: float
    certified: bool
    tail_bound: float
    t: float


def semigroup_sup_norm(
    op: DiscreteOperator, t: float, result: SpectralResult, require_certified: bool = True
) -> SemigroupNorm:
    """L2 -> Linf norm of exp(-t H) on the box, from an eigenpair truncation.

    The kernel row norm at position x is sqrt(sum_n exp(-2 t lambda_n)
    phi_n(x)^2); the operator norm is its sup over positions.  When the
    decomposition is not complete, the missing tail is bounded through the
    eigenvalue counting function of the graph (N(lambda) grows like
    total length * sqrt(lambda)/pi) together with an empirical sup bound on
    the high modes, and the result is flagged unless the bound stays below 1%.
    """
    if not (0 < t):
        raise ValueError("t must be positive")
    lam = result.eigenvalues
    phi = result.eigenvectors
    weights = np.exp(-2.0 * t * (lam - lam[0]))
    kernel_sq = (phi * phi) @ weights * np.exp(-2.0 * t * lam[0])
    value = float(np.sqrt(kernel_sq.max()))

    if result.count >= op.n_dofs:
        return SemigroupNorm(value, True, 0.0, t)

    lam_top = lam[-1]
    top = max(1, result.count // 10)
    sup_phi_sq = float((phi[:, -top:] ** 2).max())
    total_len = op.graph.total_length
    # tail of integral exp(-2 t lambda) dN with dN <= total_len/(2 pi sqrt(lambda)) dlambda
    tail = (
        sup_phi_sq
        * total_len
        / (2.0 * np.pi)
        * np.sqrt(np.pi / (2.0 * t))
        * float(erfc(np.sqrt(2.0 * t * lam_top)))
    )
    certified = tail <= 0.01 * kernel_sq.max()
    if require_certified and not certified:
        raise SolverError(
            f"semigroup truncation not certified: tail bound {tail:.3e} "
            f"vs kernel {kernel_sq.max():.3e}; provide more eigenpairs"
        )
    return SemigroupNorm(value, certified, float(tail), t)

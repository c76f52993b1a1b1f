"""Optimal transport over discrete feature distributions.

Node matching is solved as entropically regularized transport (Sinkhorn
scaling, with a log-domain path for small regularization) or by IPOT
proximal iterations, which approach the unregularized optimum. Structure
matching compares intra-set cosine-similarity matrices through a
4-index coupling contraction, solved by alternating transport steps
against a pseudo-cost. The combined objective mixes both distances with
a weight gamma; gradients w.r.t. features treat the solved couplings as
constants (plans are never differentiated through).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .numerics import (
    DegenerateInputError,
    DimensionError,
    Matrix,
    PreconditionError,
    Var,
    child_rng,
)

_MARGINAL_ATOL = 1e-12


@dataclass(frozen=True)
class OtSolverConfig:
    wd_solver: str = "entropic_sinkhorn"  # or "ipot"
    epsilon: float = 0.05  # entropy weight (proximal weight for ipot)
    max_iter: int = 500
    tol: float = 1e-6  # max allowed marginal violation (inf-norm)
    gw_outer_iter: int = 10
    gw_init: str = "jittered"  # or "uniform"
    gw_init_seed: int = 0
    gw_structural_cost: str = "absolute"  # or "squared"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise PreconditionError("epsilon must be > 0")
        if self.tol <= 0:
            raise PreconditionError("tol must be > 0")
        if self.wd_solver not in ("entropic_sinkhorn", "ipot"):
            raise PreconditionError(f"unknown wd_solver {self.wd_solver!r}")
        if self.gw_init not in ("uniform", "jittered"):
            raise PreconditionError(f"unknown gw_init {self.gw_init!r}")
        if self.gw_structural_cost not in ("absolute", "squared"):
            raise PreconditionError(
                f"unknown gw_structural_cost {self.gw_structural_cost!r}"
            )


@dataclass
class TransportPlan:
    coupling: Matrix  # n x m, nonnegative
    row_marginal: np.ndarray  # u, length n
    col_marginal: np.ndarray  # v, length m
    converged: bool
    iterations_used: int

    def marginal_violation(self) -> float:
        r = np.abs(self.coupling.sum(axis=1) - self.row_marginal).max()
        c = np.abs(self.coupling.sum(axis=0) - self.col_marginal).max()
        return float(max(r, c))


@dataclass
class DiscreteDistribution:
    """Support points (feature rows) with a weight vector summing to 1."""

    support: Matrix
    weights: np.ndarray

    def __post_init__(self):
        self.support = nm.as_matrix(self.support)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.shape[0] != self.support.shape[0]:
            raise DimensionError(
                f"{self.support.shape[0]} support rows but "
                f"{self.weights.shape[0]} weights"
            )
        validate_marginal(self.weights, "weights")
        _check_no_zero_rows(self.support, "support")

    @classmethod
    def uniform(cls, support) -> "DiscreteDistribution":
        support = nm.as_matrix(support)
        return cls(support, uniform_marginals(support.shape[0]))


def uniform_marginals(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def validate_marginal(w: np.ndarray, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).ravel()
    if np.any(w < 0):
        raise PreconditionError(f"{name} has negative entries")
    if abs(w.sum() - 1.0) > _MARGINAL_ATOL:
        raise PreconditionError(f"{name} sums to {w.sum()!r}, expected 1")
    return w


def _check_no_zero_rows(x: Matrix, name: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    bad = np.where(norms == 0.0)[0]
    if bad.size:
        raise DegenerateInputError(f"zero-norm row {bad[0]} in {name}")
    return norms


def normalized_rows(x: Matrix, name: str = "input") -> Matrix:
    norms = _check_no_zero_rows(x, name)
    return x / norms[:, None]


def cosine_cost_matrix(x: Matrix, y: Matrix) -> Matrix:
    """Pairwise cosine distances 1 - cos(x_i, y_j), clipped to [0, 2]."""
    x, y = nm.as_matrix(x), nm.as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"feature widths differ: {x.shape} vs {y.shape}")
    c = 1.0 - normalized_rows(x, "x") @ normalized_rows(y, "y").T
    return np.clip(c, 0.0, 2.0)


def intra_similarity(x: Matrix) -> Matrix:
    """Pairwise cosine similarities; exactly symmetric with unit diagonal."""
    xh = normalized_rows(nm.as_matrix(x), "x")
    s = xh @ xh.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Node-matching transport solvers.
# ---------------------------------------------------------------------------

_LOG_DOMAIN_EPS = 0.01  # below this, plain scaling risks underflow


def _plan_violation(t: Matrix, u: np.ndarray, v: np.ndarray) -> float:
    r = np.abs(t.sum(axis=1) - u).max()
    c = np.abs(t.sum(axis=0) - v).max()
    return float(max(r, c))


def _sinkhorn_plain(cost, u, v, epsilon, max_iter, tol, f0=None, g0=None):
    k = np.exp(-cost / epsilon)
    a = np.ones_like(u) if f0 is None else np.exp(f0 / epsilon)
    b = np.ones_like(v) if g0 is None else np.exp(g0 / epsilon)
    it = 0
    violation = np.inf
    for it in range(1, max_iter + 1):
        a = u / (k @ b)
        b = v / (k.T @ a)
        t = a[:, None] * k * b[None, :]
        violation = _plan_violation(t, u, v)
        if violation <= tol:
            break
    t = a[:, None] * k * b[None, :]
    with np.errstate(divide="ignore"):
        warm = (epsilon * np.log(a), epsilon * np.log(b))
    return t, violation <= tol, it, warm


def _logsumexp(m: Matrix, axis: int) -> np.ndarray:
    hi = m.max(axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    return np.log(np.exp(m - hi).sum(axis=axis)) + hi.squeeze(axis)


def _sinkhorn_log(cost, u, v, epsilon, max_iter, tol, f0=None, g0=None):
    with np.errstate(divide="ignore"):
        log_u, log_v = np.log(u), np.log(v)
    f = np.zeros_like(u) if f0 is None else f0
    g = np.zeros_like(v) if g0 is None else g0
    it = 0
    violation = np.inf
    for it in range(1, max_iter + 1):
        f = epsilon * (log_u - _logsumexp((g[None, :] - cost) / epsilon, axis=1))
        g = epsilon * (log_v - _logsumexp((f[:, None] - cost) / epsilon, axis=0))
        t = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
        violation = _plan_violation(t, u, v)
        if violation <= tol:
            break
    t = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
    return t, violation <= tol, it, (f, g)


def _ipot(cost, u, v, beta, max_iter, tol):
    g = np.exp(-cost / beta)
    t = np.outer(u, v)
    b = np.ones_like(v)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        q = g * t
        a = u / (q @ b)
        b = v / (q.T @ a)
        t_next = a[:, None] * q * b[None, :]
        delta = np.abs(t_next - t).max()
        t = t_next
        if delta <= tol and _plan_violation(t, u, v) <= tol:
            converged = True
            break
    return t, converged, it, None


def solve_wd(cost: Matrix, u, v, cfg: OtSolverConfig) -> tuple[TransportPlan, float]:
    """Minimize sum(T * cost) over couplings with marginals (u, v).

    The entropic path returns an epsilon-smoothed plan; IPOT approaches
    the unregularized optimum. Non-convergence within max_iter yields
    converged=False and the best iterate.
    """
    cost = nm.as_matrix(cost)
    nm.assert_finite(cost, "cost matrix")
    u = validate_marginal(u, "row marginal u")
    v = validate_marginal(v, "col marginal v")
    if cost.shape != (u.shape[0], v.shape[0]):
        raise DimensionError(
            f"cost is {cost.shape}, marginals imply {(u.shape[0], v.shape[0])}"
        )
    if cfg.wd_solver == "ipot":
        t, ok, it, _ = _ipot(cost, u, v, cfg.epsilon, cfg.max_iter, cfg.tol)
    elif cfg.epsilon < _LOG_DOMAIN_EPS:
        t, ok, it, _ = _sinkhorn_log(cost, u, v, cfg.epsilon, cfg.max_iter, cfg.tol)
    else:
        t, ok, it, _ = _sinkhorn_plain(cost, u, v, cfg.epsilon, cfg.max_iter, cfg.tol)
    plan = TransportPlan(t, u, v, ok, it)
    return plan, float((t * cost).sum())


# ---------------------------------------------------------------------------
# Structure matching.
# ---------------------------------------------------------------------------

_DENSE_4INDEX_LIMIT = 4096  # materialize (n*m)^2 tensor only below this n*m
_GW_EPS_DECAY = 0.1  # annealing target for the inner entropy, as a fraction


def _check_similarity_matrix(s: Matrix, name: str) -> Matrix:
    s = nm.as_matrix(s)
    if s.shape[0] != s.shape[1]:
        raise PreconditionError(f"{name} must be square, got {s.shape}")
    if not np.allclose(s, s.T, atol=1e-8):
        raise PreconditionError(f"{name} must be symmetric")
    if not np.allclose(np.diag(s), 1.0, atol=1e-8):
        raise PreconditionError(f"{name} must have unit diagonal")
    return s


def gw_pseudo_cost(sx: Matrix, sy: Matrix, t: Matrix, kind: str) -> Matrix:
    """Partial contraction C[i,j] = sum_{i',j'} L(sx[i,i'], sy[j,j']) t[i',j']."""
    n, m = t.shape
    if kind == "squared":
        # (a-b)^2 expands; marginal terms use the coupling's actual sums.
        return (
            np.outer((sx * sx) @ t.sum(axis=1), np.ones(m))
            + np.outer(np.ones(n), (sy * sy) @ t.sum(axis=0))
            - 2.0 * sx @ t @ sy.T
        )
    if n * m <= _DENSE_4INDEX_LIMIT:
        d = np.abs(sx[:, None, :, None] - sy[None, :, None, :])
        return np.tensordot(d, t, axes=([2, 3], [0, 1]))
    out = np.empty((n, m))
    for i in range(n):
        d_i = np.abs(sx[i][None, :, None] - sy[:, None, :])  # (m, n, m)
        out[i] = (d_i * t[None, :, :]).sum(axis=(1, 2))
    return out


def gw_objective(sx: Matrix, sy: Matrix, t: Matrix, kind: str) -> float:
    """Full 4-index contraction sum T_ij T_i'j' L(i,j,i',j')."""
    return float((gw_pseudo_cost(sx, sy, t, kind) * t).sum())


def _project_to_marginals(t: Matrix, u, v, tol: float, max_iter: int = 200) -> Matrix:
    """Iterative proportional fitting of a positive matrix onto (u, v)."""
    for _ in range(max_iter):
        t = t * (u / t.sum(axis=1))[:, None]
        t = t * (v / t.sum(axis=0))[None, :]
        if _plan_violation(t, u, v) <= tol:
            break
    return t


def solve_gwd(sx: Matrix, sy: Matrix, u, v, cfg: OtSolverConfig) -> tuple[TransportPlan, float]:
    """Alternating minimization of the structural transport objective.

    Each outer round contracts the structural cost against the current
    coupling and takes one entropic transport step against that
    pseudo-cost, warm-starting the scalings across rounds.
    """
    sx = _check_similarity_matrix(sx, "sx")
    sy = _check_similarity_matrix(sy, "sy")
    u = validate_marginal(u, "row marginal u")
    v = validate_marginal(v, "col marginal v")
    if sx.shape[0] != u.shape[0] or sy.shape[0] != v.shape[0]:
        raise DimensionError("similarity matrices do not match marginal lengths")

    t = np.outer(u, v)
    if cfg.gw_init == "jittered":
        noise = child_rng(cfg.gw_init_seed, "gw_init").standard_normal(t.shape)
        t = t * (1.0 + 1e-3 * noise)
        t = np.maximum(t, 1e-300)
        t = _project_to_marginals(t, u, v, min(cfg.tol, 1e-9))

    # The inner entropy anneals geometrically to a tenth of its starting
    # value so the final coupling is sharp enough to expose structural
    # optima; a flat epsilon leaves too much diffuse mass.
    rounds = max(cfg.gw_outer_iter, 1)
    eps_end = cfg.epsilon * _GW_EPS_DECAY
    warm = (None, None)
    ok = False
    total_it = 0
    for k in range(rounds):
        frac = k / (rounds - 1) if rounds > 1 else 1.0
        eps_k = cfg.epsilon * (eps_end / cfg.epsilon) ** frac
        c_hat = gw_pseudo_cost(sx, sy, t, cfg.gw_structural_cost)
        step = _sinkhorn_log if eps_k < _LOG_DOMAIN_EPS else _sinkhorn_plain
        t, ok, it, warm = step(c_hat, u, v, eps_k, cfg.max_iter, cfg.tol, *warm)
        total_it += it
    plan = TransportPlan(t, u, v, ok, total_it)
    return plan, gw_objective(sx, sy, t, cfg.gw_structural_cost)


# ---------------------------------------------------------------------------
# Combined objective and detached-plan gradients.
# ---------------------------------------------------------------------------

CONVENTIONS = ("eq6", "algorithm1")


def got_loss(wd: float, gwd: float, gamma: float, convention: str = "eq6") -> float:
    """Convex mix of the two distances.

    "eq6" puts gamma on the node-matching term; "algorithm1" swaps the
    weights (both placements appear in the source material for this
    objective, so the choice is explicit).
    """
    if not 0.0 <= gamma <= 1.0:
        raise PreconditionError(f"gamma must be in [0, 1], got {gamma}")
    if convention not in CONVENTIONS:
        raise PreconditionError(f"unknown convention {convention!r}")
    if convention == "eq6":
        return gamma * wd + (1.0 - gamma) * gwd
    return gamma * gwd + (1.0 - gamma) * wd


def _structural_slope(sx_vals: Matrix, sy_vals: Matrix, kind: str) -> Matrix:
    diff = sx_vals - sy_vals
    if kind == "squared":
        return 2.0 * diff
    return np.sign(diff)


def fixed_plan_got_value(
    x: Matrix,
    y: Matrix,
    plan_wd: TransportPlan,
    plan_gw: TransportPlan,
    gamma: float,
    convention: str = "eq6",
    structural_cost: str = "absolute",
) -> float:
    """Combined objective evaluated with both couplings held fixed."""
    cost = 1.0 - normalized_rows(x, "x") @ normalized_rows(y, "y").T
    wd = float((plan_wd.coupling * cost).sum())
    gwd = gw_objective(intra_similarity(x), intra_similarity(y), plan_gw.coupling,
                       structural_cost)
    return got_loss(wd, gwd, gamma, convention)


def got_grad_features(
    x: Matrix,
    y: Matrix,
    plan_wd: TransportPlan,
    plan_gw: TransportPlan,
    gamma: float,
    convention: str = "eq6",
    structural_cost: str = "absolute",
) -> tuple[Matrix, Matrix]:
    """Gradients of the fixed-plan objective w.r.t. both feature sets.

    The node term differentiates cosine distances weighted by the
    coupling; the structure term differentiates both similarity matrices
    through the 4-index contraction, then chains through cosine
    similarity. Couplings are constants here.
    """
    x, y = nm.as_matrix(x), nm.as_matrix(y)
    t_wd = plan_wd.coupling
    t_gw = plan_gw.coupling
    n, m = x.shape[0], y.shape[0]
    if t_wd.shape != (n, m) or t_gw.shape != (n, m):
        raise DimensionError(
            f"plans {t_wd.shape}/{t_gw.shape} do not match features ({n}, {m})"
        )
    xn = _check_no_zero_rows(x, "x")[:, None]
    yn = _check_no_zero_rows(y, "y")[:, None]
    xh, yh = x / xn, y / yn

    # Node term: d/dx sum_ij T_ij (1 - xh_i . yh_j).
    wx = t_wd @ yh
    gx_wd = -(wx - (xh * wx).sum(axis=1, keepdims=True) * xh) / xn
    wy = t_wd.T @ xh
    gy_wd = -(wy - (yh * wy).sum(axis=1, keepdims=True) * yh) / yn

    # Structure term: weight of each similarity entry in the contraction.
    sx = xh @ xh.T
    sy = yh @ yh.T
    if n * m <= _DENSE_4INDEX_LIMIT:
        slope = _structural_slope(sx[:, None, :, None], sy[None, :, None, :],
                                  structural_cost)
        g_sx = np.einsum("ij,kl,ijkl->ik", t_gw, t_gw, slope)
        g_sy = -np.einsum("ij,kl,ijkl->jl", t_gw, t_gw, slope)
    else:
        g_sx = np.zeros((n, n))
        g_sy = np.zeros((m, m))
        for i in range(n):
            s_i = _structural_slope(sx[i][None, :, None], sy[:, None, :],
                                    structural_cost)  # (m, n, m)
            g_sx[i] = np.einsum("j,kl,jkl->k", t_gw[i], t_gw, s_i)
            g_sy -= np.einsum("j,kl,jkl->jl", t_gw[i], t_gw, s_i)

    def chain_cosine(g_s, feats_hat, norms, sims):
        gs = g_s + g_s.T
        msum = gs @ feats_hat - (gs * sims).sum(axis=1, keepdims=True) * feats_hat
        return msum / norms

    gx_gw = chain_cosine(g_sx, xh, xn, sx)
    gy_gw = chain_cosine(g_sy, yh, yn, sy)

    got_loss(0.0, 0.0, gamma, convention)  # validates gamma and convention
    if convention == "eq6":
        a, b = gamma, 1.0 - gamma
    else:
        a, b = 1.0 - gamma, gamma
    return a * gx_wd + b * gx_gw, a * gy_wd + b * gy_gw


# ---------------------------------------------------------------------------
# Taped fixed-plan objective (used for end-to-end training).
# ---------------------------------------------------------------------------


def taped_normalized_rows(x: Var) -> Var:
    """Row-normalize on the tape: x_i / ||x_i||."""
    tape = x.tape
    d = x.value.shape[1]
    norms = nm.sqrt(nm.reduce_sum(nm.mul(x, x), "cols"))  # n x 1
    inv = nm.recip(norms)
    return nm.mul(x, nm.matmul(inv, tape.constant(np.ones((1, d)))))


def taped_fixed_plan_got(
    x: Var,
    y: Var,
    plan_wd: TransportPlan,
    plan_gw: TransportPlan,
    gamma: float,
    convention: str = "eq6",
    structural_cost: str = "absolute",
    sx_mask: Matrix | None = None,
    sy_mask: Matrix | None = None,
) -> Var:
    """Build the fixed-plan combined objective on the tape.

    Optional 0/1 masks zero out sub-threshold similarity entries; the
    mask pattern itself carries no gradient.
    """
    if not 0.0 <= gamma <= 1.0:
        raise PreconditionError(f"gamma must be in [0, 1], got {gamma}")
    if convention not in CONVENTIONS:
        raise PreconditionError(f"unknown convention {convention!r}")
    tape = x.tape
    n, m = x.value.shape[0], y.value.shape[0]
    xh = taped_normalized_rows(x)
    yh = taped_normalized_rows(y)

    ones_cost = tape.constant(np.ones((n, m)))
    cost = nm.sub(ones_cost, nm.matmul(xh, nm.transpose(yh)))
    wd_term = nm.reduce_sum(nm.mul(cost, tape.constant(plan_wd.coupling)), "all")

    sx = nm.matmul(xh, nm.transpose(xh))
    sy = nm.matmul(yh, nm.transpose(yh))
    if sx_mask is not None:
        sx = nm.mul(sx, tape.constant(sx_mask))
    if sy_mask is not None:
        sy = nm.mul(sy, tape.constant(sy_mask))
    # sum_{iji'j'} T_ij T_i'j' L(sx_ii', sy_jj') laid out as an
    # (n^2 x m^2) difference grid against kron(T, T).
    sx_col = nm.reshape(sx, n * n, 1)
    sy_row = nm.reshape(sy, 1, m * m)
    grid = nm.sub(
        nm.matmul(sx_col, tape.constant(np.ones((1, m * m)))),
        nm.matmul(tape.constant(np.ones((n * n, 1))), sy_row),
    )
    if structural_cost == "squared":
        grid_cost = nm.mul(grid, grid)
    else:
        grid_cost = nm.absolute(grid)
    kron = np.kron(plan_gw.coupling, plan_gw.coupling)
    gw_term = nm.reduce_sum(nm.mul(grid_cost, tape.constant(kron)), "all")

    if convention == "eq6":
        return nm.add(nm.scale(wd_term, gamma), nm.scale(gw_term, 1.0 - gamma))
    return nm.add(nm.scale(gw_term, gamma), nm.scale(wd_term, 1.0 - gamma))


def combined_plan(
    plan_wd: TransportPlan, plan_gw: TransportPlan, gamma: float, convention: str = "eq6"
) -> Matrix:
    """Gamma-weighted mix of both couplings (feasible: the set is convex)."""
    got_loss(0.0, 0.0, gamma, convention)
    if convention == "eq6":
        return gamma * plan_wd.coupling + (1.0 - gamma) * plan_gw.coupling
    return gamma * plan_gw.coupling + (1.0 - gamma) * plan_wd.coupling


def solve_pair(
    x: Matrix,
    y: Matrix,
    cfg: OtSolverConfig,
    sx: Matrix | None = None,
    sy: Matrix | None = None,
) -> tuple[TransportPlan, float, TransportPlan, float]:
    """Solve both transport problems for one feature pair with uniform mass.

    Similarity matrices default to plain intra-set cosine similarities;
    callers may pass thresholded versions.
    """
    x, y = nm.as_matrix(x), nm.as_matrix(y)
    u = uniform_marginals(x.shape[0])
    v = uniform_marginals(y.shape[0])
    plan_wd, wd = solve_wd(cosine_cost_matrix(x, y), u, v, cfg)
    if sx is None:
        sx = intra_similarity(x)
    if sy is None:
        sy = intra_similarity(y)
    plan_gw, gwd = solve_gwd(sx, sy, u, v, cfg)
    return plan_wd, wd, plan_gw, gwd


def with_seed(cfg: OtSolverConfig, seed: int) -> OtSolverConfig:
    """Config copy whose jittered initialization uses the given seed."""
    return replace(cfg, gw_init_seed=int(seed))

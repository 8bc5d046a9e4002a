"""Constrained maximum likelihood: spectral initialisation, projected ascent and
canonicalisation to the identifiability constraints.

The constrained estimator is computed in two steps: maximise the likelihood
over the norm ball, then transform the maximiser (centre Z, rotate so that
Z^T Z / n is diagonal). The likelihood depends on the parameters only through
the off-diagonal entries of Pi, which the transformation leaves unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh
from scipy.special import logit

from .model import (
    DimensionError,
    Family,
    LatentState,
    ModelSpec,
    Network,
    edge_derivatives,
    score,
    total_loglik,
)

log = logging.getLogger(__name__)

METHODS = ("newton", "block", "gradient")


class FitError(RuntimeError):
    """Optimisation failed (non-finite objective, usually from a divergent step)."""


@dataclass
class FitConfig:
    """Optimiser settings.

    ``method="gradient"`` is plain projected gradient ascent with steps
    ``step_z`` / ``step_alpha`` (default ``eta / (n * curvature bound)``).
    ``method="block"`` premultiplies each node block of the gradient by the
    inverse of that node's own curvature block and takes a damped step.
    ``method="newton"`` (default) solves the full Gauss-Newton system by
    conjugate gradients preconditioned with those blocks, which also handles
    the slow coupled modes that appear when some blocks sit on the ball
    boundary. All methods project every block onto the ball of radius ``M``
    after each step and reach the same maximiser; the Newton variants need
    tens rather than thousands of iterations.
    """

    step_z: Optional[float] = None
    step_alpha: Optional[float] = None
    max_iters: int = 2000
    rel_tol: float = 1e-12
    M: Optional[float] = None
    backtracking: bool = True
    method: str = "newton"
    eta: float = 0.2
    damping: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        for name in ("step_z", "step_alpha", "M"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be non-negative")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class FitResult:
    state: LatentState
    objective_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    score_norm: float = float("nan")
    stop_reason: str = ""
    # largest off-diagonal change of the linear predictor caused by canonicalisation
    canonical_shift: float = 0.0

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def project_ball(phi_i, M: float) -> np.ndarray:
    """Radial projection of one parameter block onto ``{x : |x| <= M}``."""
    if not M > 0:
        raise ValueError("M must be positive")
    phi_i = np.asarray(phi_i, dtype=float)
    norm = np.linalg.norm(phi_i)
    if norm <= M:
        return phi_i.copy()
    return phi_i * (M / norm)


def _project_rows(phi: np.ndarray, M: float) -> np.ndarray:
    norms = np.linalg.norm(phi, axis=1)
    scale = np.minimum(1.0, M / np.maximum(norms, np.finfo(float).tiny))
    return phi * scale[:, None]


def _curvature_bound(spec: ModelSpec) -> float:
    if spec.family is Family.BERNOULLI:
        return 0.25
    return 1.0 / spec.delta**2


def _top_eigs(A: np.ndarray, k: int):
    n = A.shape[0]
    if k == 0:
        return np.zeros(0), np.zeros((n, 0))
    if k < n // 4:
        # a fixed start vector keeps ARPACK (and so the whole fit) reproducible
        vals, vecs = eigsh(A, k=k, which="LM", v0=np.random.default_rng(0).uniform(-1, 1, n))
    else:
        vals, vecs = eigh(A)
        idx = np.argsort(-np.abs(vals), kind="stable")[:k]
        vals, vecs = vals[idx], vecs[:, idx]
    return vals, vecs


def svt_init(net: Network, spec: ModelSpec, c_tau: float = 2.01, eps: float = 1e-3,
             rank: Optional[int] = None, diag_iters: int = 5,
             diag_tol: float = 1e-10) -> LatentState:
    """Spectral warm start by singular value thresholding of the adjacency matrix.

    Eigen-components of A with ``|lambda| >= c_tau * sqrt(n * mean edge)`` are
    kept (or the ``rank`` largest in magnitude, if given). The missing diagonal
    is then re-imputed from the low-rank fit for up to ``diag_iters`` rounds.
    For Bernoulli edges the estimate is clipped to ``[eps, 1 - eps]`` and mapped
    through the logit; Z comes from the top-r eigenpairs of the doubly centred
    predictor matrix and alpha from its row means.
    """
    n, r = net.n, spec.r
    if n < r + 2:
        raise DimensionError(f"need at least r + 2 = {r + 2} nodes, got {n}")
    A = net.edges
    off = ~np.eye(n, dtype=bool)
    pbar = float(np.abs(A[off]).mean()) if spec.family is Family.GAUSSIAN else float(A[off].mean())

    vals, vecs = eigh(A)
    if rank is None:
        tau = c_tau * np.sqrt(n * pbar)
        k = int(np.count_nonzero(np.abs(vals) >= tau))
    else:
        k = int(min(rank, n))
    idx = np.argsort(-np.abs(vals), kind="stable")[:k]
    vals, vecs = vals[idx], vecs[:, idx]
    P = (vecs * vals) @ vecs.T
    work = np.array(A, dtype=float)
    for _ in range(diag_iters if k else 0):
        d_old = np.diag(P).copy()
        np.fill_diagonal(work, d_old)
        vals, vecs = _top_eigs(work, k)
        P = (vecs * vals) @ vecs.T
        if np.max(np.abs(np.diag(P) - d_old)) < diag_tol:
            break

    if spec.family is Family.BERNOULLI:
        Pi = logit(np.clip(P, eps, 1.0 - eps))
    else:
        Pi = P
    Pi = (Pi + Pi.T) / 2.0

    row = Pi.mean(axis=1)
    alpha = row - Pi.mean() / 2.0
    Pc = Pi - row[:, None] - row[None, :] + Pi.mean()
    cv, cu = eigh(Pc, subset_by_index=[n - r, n - 1])
    order = np.argsort(-cv, kind="stable")
    # A small floor keeps Z off the saddle at Z = 0 when nothing survives the
    # threshold (tiny or featureless networks).
    Z = cu[:, order] * np.sqrt(np.maximum(cv[order], 1e-4 * n))
    phi = _project_rows(np.column_stack([Z, alpha]), spec.M)
    return LatentState.from_phi(phi)


def apply_identifiability(state: LatentState, sparse_mode: bool = False) -> LatentState:
    """Centre Z, rotate so Z^T Z / n is diagonal, fix column signs.

    alpha absorbs the centring shift so that every off-diagonal pi_ij is
    unchanged. Columns are ordered by decreasing eigenvalue of Z^T Z / n and
    signed so each column's largest-magnitude entry is positive (first such
    row on ties). In sparse mode the mean of alpha moves into rho.
    """
    Z = np.array(state.Z, dtype=float)
    alpha = np.array(state.alpha, dtype=float)
    rho = float(state.rho)
    n = Z.shape[0]

    mu = Z.mean(axis=0)
    alpha = alpha + Z @ mu - mu @ mu / 2.0
    Z = Z - mu

    vals, vecs = np.linalg.eigh(Z.T @ Z / n)
    Z = Z @ vecs[:, np.argsort(-vals, kind="stable")]
    Z -= Z.mean(axis=0)  # rounding left over from the rotation

    pivots = np.argmax(np.abs(Z), axis=0)
    signs = np.where(Z[pivots, np.arange(Z.shape[1])] < 0, -1.0, 1.0)
    Z = Z * signs

    out = LatentState(Z, alpha, rho)
    if sparse_mode:
        out = estimate_rho(out)[1]
    return out


def estimate_rho(state: LatentState):
    """Split the common level of alpha into the offset rho.

    With alpha shifted by its mean m, every pi_ij loses 2 m, so rho gains 2 m
    and the edge predictors are unchanged.
    """
    m = float(state.alpha.mean())
    rho_hat = state.rho + 2.0 * m
    return rho_hat, LatentState(state.Z.copy(), state.alpha - m, rho_hat)


def _objective(net, phi, spec):
    # overflow shows up as a non-finite value, which the caller handles
    with np.errstate(over="ignore", invalid="ignore"):
        return total_loglik(net, LatentState.from_phi(phi), spec)


def _curvature_blocks(net, phi, spec, S, M):
    """Per-node curvature blocks B_i = sum_j -l''_ij h_j h_j^T and the boundary set.

    Blocks on the ball boundary with the score pointing outwards are replaced
    by their restriction to the tangent plane of the sphere (plus a multiple of
    u u^T to keep them invertible), so steps slide along the boundary rather
    than being cut back by the projection. Returns ``(W, H, B, u, active)``.
    """
    n, p = phi.shape
    state = LatentState.from_phi(phi)
    _, l2 = edge_derivatives(net, state, spec, order=2)
    W = -l2
    H = state.H
    outer = (H[:, :, None] * H[:, None, :]).reshape(n, p * p)
    B = (W @ outer).reshape(n, p, p)
    tr = np.maximum(np.trace(B, axis1=1, axis2=2), 1e-300)
    B = B + (1e-10 * tr)[:, None, None] * np.eye(p)
    norms = np.linalg.norm(phi, axis=1)
    active = (norms >= M * (1.0 - 1e-8)) & (np.einsum("ij,ij->i", phi, S) > 0)
    u = np.zeros_like(phi)
    if active.any():
        u[active] = phi[active] / norms[active, None]
        ua = u[active]
        P = np.eye(p) - ua[:, :, None] * ua[:, None, :]
        B[active] = P @ B[active] @ P + tr[active, None, None] * (ua[:, :, None] * ua[:, None, :])
    return W, H, B, u, active


def _tangent(V, u, active):
    if not active.any():
        return V
    V = V.copy()
    V[active] -= np.einsum("ij,ij->i", V[active], u[active])[:, None] * u[active]
    return V


def _block_direction(net, phi, spec, S, M):
    """Per-node solve of B_i d_i = S_i (block-diagonal Newton)."""
    _, _, B, u, active = _curvature_blocks(net, phi, spec, S, M)
    return np.linalg.solve(B, _tangent(S, u, active)[:, :, None])[:, :, 0]


def _newton_direction(net, phi, spec, S, M, tol=1e-3, max_cg=50):
    """Gauss-Newton direction from preconditioned conjugate gradients.

    The Gauss-Newton matrix (the Fisher information in phi) has product
    G V = [W * (V H^T + H V^T)] H; it couples all node blocks, which the
    block-diagonal step ignores. The block inverses serve as preconditioner,
    so the first CG iterate is the block step. The matrix is singular along
    the translation and rotation directions that leave every pi_ij fixed; the
    right-hand side is orthogonal to them, so CG stays in the range.
    """
    W, H, B, u, active = _curvature_blocks(net, phi, spec, S, M)
    Binv = np.linalg.inv(B)

    def G(V):
        D = W * (V @ H.T + H @ V.T)
        return _tangent(D @ H, u, active)

    def prec(R):
        return (Binv @ R[:, :, None])[:, :, 0]

    b = _tangent(S, u, active)
    x = np.zeros_like(b)
    r = b.copy()
    z = prec(r)
    d = z.copy()
    rz = np.sum(r * z)
    bnorm = np.linalg.norm(b)
    for _ in range(max_cg):
        Gd = G(d)
        curv = np.sum(d * Gd)
        if curv <= 0:
            break
        step = rz / curv
        x += step * d
        r -= step * Gd
        if np.linalg.norm(r) <= tol * bnorm:
            break
        z = prec(r)
        rz_new = np.sum(r * z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x if np.any(x) else prec(b)


def _line_search(net, spec, phi, direction, steps, f, M, scale, backtracking):
    """Halve ``scale`` until the projected step does not decrease the objective."""
    steps = np.asarray(steps, dtype=float)
    while True:
        cand = _project_rows(phi + scale * steps * direction, M)
        f_new = _objective(net, cand, spec)
        if not backtracking or (np.isfinite(f_new) and f_new >= f):
            return cand, f_new, scale
        if scale * steps.max() < 1e-12:
            return cand, f_new, scale
        scale /= 2.0


def fit_pgd(net: Network, spec: ModelSpec, cfg: Optional[FitConfig] = None,
            init: Optional[LatentState] = None) -> FitResult:
    """Maximise the log-likelihood over ``max_i |phi_i| <= M``, then canonicalise.

    Any offset carried by ``init`` is folded into alpha during optimisation;
    in sparse mode it is split out again at the end.
    """
    cfg = cfg or FitConfig()
    if init is None:
        init = svt_init(net, spec)
    if init.n != net.n:
        raise DimensionError(f"init has {init.n} nodes, network has {net.n}")
    if init.r != spec.r:
        raise DimensionError(f"init has r={init.r}, spec has r={spec.r}")
    M = spec.M if cfg.M is None else cfg.M
    n, r = net.n, spec.r

    phi = init.phi
    phi[:, -1] += init.rho / 2.0
    if cfg.max_iters > 0:
        phi = _project_rows(phi, M)

    if cfg.method == "gradient":
        base = cfg.eta / (n * _curvature_bound(spec))
        steps = np.full(r + 1, cfg.step_z if cfg.step_z is not None else base)
        steps[-1] = cfg.step_alpha if cfg.step_alpha is not None else base
    elif cfg.method == "block":
        steps = np.full(r + 1, cfg.damping)
    else:
        steps = np.ones(r + 1)

    f = _objective(net, phi, spec)
    if not np.isfinite(f):
        raise FitError("objective is not finite at the initial point")
    trace = [f]
    scale = 1.0
    converged = False
    reason = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        S = score(net, LatentState.from_phi(phi), spec)
        if cfg.method == "gradient":
            cand, f_new, scale = _line_search(net, spec, phi, S, steps, f, M, scale, cfg.backtracking)
        else:
            if cfg.method == "block":
                d = _block_direction(net, phi, spec, S, M)
            else:
                d = _newton_direction(net, phi, spec, S, M)
            cand, f_new, _ = _line_search(net, spec, phi, d, steps, f, M, 1.0, True)
        if not np.isfinite(f_new):
            raise FitError(f"objective became non-finite at iteration {it}; reduce the step size")
        if cfg.backtracking and f_new < f:
            reason = "line_search"
            converged = True
            it -= 1
            break
        rel = abs(f_new - f) / max(abs(f), 1.0)
        phi, f = cand, f_new
        trace.append(f)
        if rel < cfg.rel_tol:
            converged = True
            reason = "tolerance"
            break
        if cfg.method == "gradient":
            scale = min(2.0 * scale, 1.0)
    if cfg.max_iters == 0:
        reason = "max_iters"

    raw = LatentState.from_phi(phi)
    state = apply_identifiability(raw, spec.sparse_mode)
    shift = np.abs(state.linear_predictor() - raw.linear_predictor())
    np.fill_diagonal(shift, 0.0)
    s = score(net, state, spec)
    log.debug("fit finished after %d iterations (%s), loglik %.6f", it, reason, f)
    return FitResult(state=state, objective_trace=trace, iterations=it, converged=converged,
                     score_norm=float(np.linalg.norm(s)), stop_reason=reason,
                     canonical_shift=float(shift.max()) if n > 1 else 0.0)


def fit(net: Network, spec: ModelSpec, cfg: Optional[FitConfig] = None, **svt_kwargs) -> FitResult:
    """SVT initialisation followed by :func:`fit_pgd`."""
    return fit_pgd(net, spec, cfg, svt_init(net, spec, **svt_kwargs))

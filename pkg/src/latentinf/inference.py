"""Plug-in sandwich covariances, confidence regions and link-probability intervals.

For a node set I the estimated asymptotic variance of the stacked blocks
phi_I is Sigma_I^{-1} Omega_I Sigma_I^{-1}, where Sigma_I is block diagonal
with curvature blocks and Omega_I holds the second moments of the score
blocks. Both are scaled by 1 / (w_n n); intervals use sqrt(w_n n) as the
normaliser, so the choice of w_n cancels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .model import Family, LatentState, ModelSpec, Network, edge_derivatives

COND_LIMIT = 1e12


class InferenceUnavailable(RuntimeError):
    """Variance cannot be estimated for a node (curvature block singular)."""

    def __init__(self, message: str, node: Optional[int] = None):
        super().__init__(message)
        self.node = node


def default_wn(state: LatentState, spec: ModelSpec) -> float:
    return float(np.exp(state.rho)) if spec.sparse_mode else 1.0


def sigma_hat(net: Network, state: LatentState, spec: ModelSpec, i: int,
              w_n: float = 1.0) -> np.ndarray:
    """(1 / (w_n n)) sum_{j != i} l''(pi_ij) h_j h_j^T; negative semi-definite."""
    _, l2 = edge_derivatives(net, state, spec, order=2)
    H = state.H
    return (H.T * l2[i]) @ H / (w_n * net.n)


def omega_individual(net: Network, state: LatentState, spec: ModelSpec, i: int,
                     w_n: float = 1.0) -> np.ndarray:
    """(1 / (w_n n)) sum_{j != i} l'(pi_ij)^2 h_j h_j^T."""
    (l1,) = edge_derivatives(net, state, spec, order=1)
    H = state.H
    return (H.T * l1[i] ** 2) @ H / (w_n * net.n)


def omega_hat(net: Network, state: LatentState, spec: ModelSpec, nodes: Sequence[int],
              w_n: float = 1.0, form: str = "edge") -> np.ndarray:
    """Score second-moment matrix over a node set, as m x m blocks of size r + 1.

    ``form="edge"`` keeps the products l'(pi_{i k1}) l'(pi_{j k2}) where both
    factors belong to the same edge, the terms with non-zero expectation when
    edges are independent: block (i, i) is the individual estimator and block
    (i, j) is l'(pi_ij)^2 h_j h_i^T / (w_n n).

    ``form="outer"`` is the full double sum, S_i S_j^T / (w_n n). It vanishes
    at an exact interior maximiser and is provided for diagnostics only.
    """
    nodes = [int(i) for i in nodes]
    (l1,) = edge_derivatives(net, state, spec, order=1)
    H = state.H
    p = H.shape[1]
    m = len(nodes)
    scale = 1.0 / (w_n * net.n)
    out = np.zeros((m * p, m * p))
    if form == "outer":
        S = (l1 @ H)[nodes]
        out = np.einsum("ak,bl->akbl", S, S).reshape(m * p, m * p) * scale
        return out
    if form != "edge":
        raise ValueError("form must be 'edge' or 'outer'")
    for a, i in enumerate(nodes):
        for b, j in enumerate(nodes):
            if i == j:
                blk = (H.T * l1[i] ** 2) @ H
            else:
                blk = l1[i, j] ** 2 * np.outer(H[j], H[i])
            out[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk * scale
    return out


def _inverse_block(sigma: np.ndarray, node=None) -> np.ndarray:
    """Inverse of a curvature block through the eigendecomposition of -sigma."""
    sym = -(sigma + sigma.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] <= 0 or vals[-1] / vals[0] > COND_LIMIT:
        raise InferenceUnavailable(
            f"curvature block is singular or ill-conditioned (eigenvalues {vals[0]:.3g}..{vals[-1]:.3g})",
            node)
    return -(vecs / vals) @ vecs.T


def var_sandwich(sigma_blocks: Sequence[np.ndarray], omega: np.ndarray,
                 nodes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Sigma_I^{-1} Omega_I Sigma_I^{-1} with Sigma_I = blockdiag(sigma_blocks)."""
    blocks = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sigma_blocks]
    labels = list(nodes) if nodes is not None else list(range(len(blocks)))
    inv = [_inverse_block(s, node) for s, node in zip(blocks, labels)]
    sizes = [b.shape[0] for b in inv]
    total = sum(sizes)
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if omega.shape != (total, total):
        raise ValueError(f"omega has shape {omega.shape}, expected {(total, total)}")
    Sinv = np.zeros((total, total))
    k = 0
    for b, s in zip(inv, sizes):
        Sinv[k:k + s, k:k + s] = b
        k += s
    V = Sinv @ omega @ Sinv
    return (V + V.T) / 2.0


@dataclass
class CovarianceBundle:
    nodes: tuple
    centers: np.ndarray          # (m, r + 1) point estimates phi_i
    sigma_blocks: list
    omega: np.ndarray
    var_sandwich: np.ndarray
    w_n: float
    n: int

    @property
    def p(self) -> int:
        return self.centers.shape[1]

    def position(self, i: int) -> int:
        try:
            return self.nodes.index(int(i))
        except ValueError:
            raise KeyError(f"node {i} not in bundle {self.nodes}") from None

    def block(self, i: int) -> np.ndarray:
        """Sandwich variance of node i (not yet divided by w_n n)."""
        a = self.position(i) * self.p
        return self.var_sandwich[a:a + self.p, a:a + self.p]

    def scaled_covariance(self, i: int) -> np.ndarray:
        return self.block(i) / (self.w_n * self.n)


def covariance_bundle(net: Network, state: LatentState, spec: ModelSpec,
                      nodes: Sequence[int], w_n: Optional[float] = None) -> CovarianceBundle:
    """Sigma, Omega and the sandwich over ``nodes``; raises InferenceUnavailable."""
    nodes = tuple(int(i) for i in nodes)
    if len(set(nodes)) != len(nodes):
        raise ValueError("node set contains duplicates")
    w_n = default_wn(state, spec) if w_n is None else float(w_n)
    if not w_n > 0:
        raise ValueError("w_n must be positive")
    l1, l2 = edge_derivatives(net, state, spec, order=2)
    H = state.H
    scale = 1.0 / (w_n * net.n)
    sig = [(H.T * l2[i]) @ H * scale for i in nodes]
    omega = omega_hat(net, state, spec, nodes, w_n)
    V = var_sandwich(sig, omega, nodes)
    return CovarianceBundle(nodes, state.phi[list(nodes)], sig, omega, V, w_n, net.n)


@dataclass
class ConfidenceRegion:
    center: np.ndarray
    covariance: np.ndarray
    level: float
    chi2_quantile: float

    def mahalanobis2(self, point) -> float:
        d = np.asarray(point, dtype=float) - self.center
        return float(d @ np.linalg.solve(self.covariance, d))

    def contains(self, point) -> bool:
        return self.mahalanobis2(point) <= self.chi2_quantile


def _check_level(level: float):
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")


def normal_quantile(level: float) -> float:
    return float(stats.norm.ppf(1.0 - (1.0 - level) / 2.0))


def ci_individual(bundle: CovarianceBundle, i: int, level: float = 0.95):
    """Per-coordinate intervals (rows ``[lower, upper]``) and the joint region for phi_i."""
    _check_level(level)
    center = bundle.centers[bundle.position(i)]
    cov = bundle.scaled_covariance(i)
    half = normal_quantile(level) * np.sqrt(np.diag(cov))
    intervals = np.column_stack([center - half, center + half])
    region = ConfidenceRegion(center.copy(), cov.copy(), level,
                              float(stats.chi2.ppf(level, df=bundle.p)))
    return intervals, region


@dataclass
class Ellipse:
    center: np.ndarray
    semi_axes: np.ndarray   # major first
    angle: float            # radians, direction of the major axis
    covariance: np.ndarray

    @property
    def area(self) -> float:
        return float(np.pi * self.semi_axes[0] * self.semi_axes[1])


def ellipse_from_covariance(center, cov, level: float = 0.95) -> Ellipse:
    _check_level(level)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise ValueError("ellipse needs a 2 x 2 covariance")
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    q = stats.chi2.ppf(level, df=2)
    axes = np.sqrt(q * np.maximum(vals, 0.0))
    v = vecs[:, 0]
    angle = float(np.arctan2(v[1], v[0]))
    # major-axis direction is defined up to sign; report it in (-pi/2, pi/2]
    if angle <= -np.pi / 2:
        angle += np.pi
    elif angle > np.pi / 2:
        angle -= np.pi
    return Ellipse(np.asarray(center, dtype=float).copy(), axes, angle, cov.copy())


def confidence_ellipse(bundle: CovarianceBundle, i: int, level: float = 0.95) -> Ellipse:
    """Confidence ellipse of z_i from the latent-position sub-block (r = 2 only)."""
    if bundle.p - 1 != 2:
        raise ValueError(f"confidence ellipses need r = 2, got r = {bundle.p - 1}")
    cov = bundle.scaled_covariance(i)[:2, :2]
    return ellipse_from_covariance(bundle.centers[bundle.position(i), :2], cov, level)


@dataclass
class LinkInterval:
    i: int
    j: int
    theta_hat: float
    lower: float
    upper: float
    variance: float     # sandwich variance before division by w_n n
    level: float

    def contains(self, theta: float) -> bool:
        return self.lower <= theta <= self.upper


def ci_link_probability(net: Network, state: LatentState, spec: ModelSpec, i: int, j: int,
                        level: float = 0.95, w_n: Optional[float] = None) -> LinkInterval:
    """Interval for theta_ij = logistic(pi_ij + rho), by the delta method on (phi_i, phi_j)."""
    _check_level(level)
    if spec.family is not Family.BERNOULLI:
        raise ValueError("link-probability intervals are defined for Bernoulli edges")
    i, j = int(i), int(j)
    if i == j:
        raise ValueError("link probability needs two distinct nodes")
    bundle = covariance_bundle(net, state, spec, (i, j), w_n)
    H = state.H
    theta = float(expit(state.Z[i] @ state.Z[j] + state.alpha[i] + state.alpha[j] + state.rho))
    g = np.concatenate([H[j], H[i]])
    var = (theta * (1.0 - theta)) ** 2 * float(g @ bundle.var_sandwich @ g)
    half = normal_quantile(level) * np.sqrt(max(var, 0.0) / (bundle.w_n * net.n))
    return LinkInterval(i, j, theta, max(0.0, theta - half), min(1.0, theta + half), var, level)

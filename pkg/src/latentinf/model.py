"""Inner-product latent space model: data containers, log-likelihood and score.

An edge between nodes i and j has linear predictor

    pi_ij = z_i^T z_j + alpha_i + alpha_j + rho

and is Bernoulli with logistic link or Gaussian with identity link.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit


class Family(str, Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


class Link(str, Enum):
    LOGISTIC = "logistic"
    IDENTITY = "identity"


_DEFAULT_LINK = {Family.BERNOULLI: Link.LOGISTIC, Family.GAUSSIAN: Link.IDENTITY}


class InvalidEdgeError(ValueError):
    """Edge value not admissible for the edge family."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Network:
    """Undirected network without self-loops, stored as a dense matrix."""

    edges: np.ndarray
    family: Family = Family.BERNOULLI
    labels: Optional[tuple] = None

    def __post_init__(self):
        A = np.array(self.edges, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"edges must be square, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise InvalidEdgeError("edges contain non-finite values")
        if not np.array_equal(A, A.T):
            raise InvalidEdgeError("edges must be symmetric")
        if np.any(np.diag(A) != 0):
            raise InvalidEdgeError("self-loops are not allowed (non-zero diagonal)")
        family = Family(self.family)
        if family is Family.BERNOULLI and not np.all((A == 0) | (A == 1)):
            raise InvalidEdgeError("Bernoulli edges must be 0 or 1")
        if self.labels is not None and len(self.labels) != A.shape[0]:
            raise DimensionError("labels length does not match node count")
        A.setflags(write=False)
        object.__setattr__(self, "edges", A)
        object.__setattr__(self, "family", family)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.edges.shape[0]

    @property
    def n_edges(self) -> int:
        """Number of unordered pairs with a non-zero edge value."""
        return int(np.count_nonzero(np.triu(self.edges, 1)))

    def degrees(self) -> np.ndarray:
        return np.count_nonzero(self.edges, axis=1)

    def density(self) -> float:
        n = self.n
        return float(np.triu(self.edges, 1).sum() / (n * (n - 1) / 2))

    def label_index(self, label) -> int:
        if self.labels is None:
            idx = int(label)
            if not 0 <= idx < self.n:
                raise KeyError(f"node index {label} out of range")
            return idx
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown node label {label!r}") from None


@dataclass
class LatentState:
    """Latent positions ``Z`` (n x r), degree effects ``alpha`` and offset ``rho``."""

    Z: np.ndarray
    alpha: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        self.Z = np.array(self.Z, dtype=float)
        if self.Z.ndim == 1:
            self.Z = self.Z[:, None]
        self.alpha = np.array(self.alpha, dtype=float).reshape(-1)
        self.rho = float(self.rho)
        if self.Z.shape[0] != self.alpha.shape[0]:
            raise DimensionError(
                f"Z has {self.Z.shape[0]} rows but alpha has {self.alpha.shape[0]} entries"
            )

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def r(self) -> int:
        return self.Z.shape[1]

    @property
    def H(self) -> np.ndarray:
        """Rows h_i = (z_i, 1)."""
        return np.column_stack([self.Z, np.ones(self.n)])

    @property
    def phi(self) -> np.ndarray:
        """Per-node parameter blocks (z_i, alpha_i), shape (n, r + 1)."""
        return np.column_stack([self.Z, self.alpha])

    @classmethod
    def from_phi(cls, phi: np.ndarray, rho: float = 0.0) -> "LatentState":
        phi = np.asarray(phi, dtype=float)
        return cls(phi[:, :-1].copy(), phi[:, -1].copy(), rho)

    def linear_predictor(self) -> np.ndarray:
        """Full n x n matrix of pi_ij + rho (the diagonal is not an edge)."""
        a = self.alpha
        return self.Z @ self.Z.T + a[:, None] + a[None, :] + self.rho

    def copy(self) -> "LatentState":
        return LatentState(self.Z.copy(), self.alpha.copy(), self.rho)


@dataclass(frozen=True)
class ModelSpec:
    family: Family = Family.BERNOULLI
    link: Optional[Link] = None
    delta: float = 1.0
    M: float = 10.0
    sparse_mode: bool = False
    r: int = 2

    def __post_init__(self):
        family = Family(self.family)
        link = _DEFAULT_LINK[family] if self.link is None else Link(self.link)
        if link is not _DEFAULT_LINK[family]:
            raise ValueError(f"{family.value} edges require the {_DEFAULT_LINK[family].value} link")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.M > 0:
            raise ValueError("M must be positive")
        if int(self.r) != self.r or self.r < 1:
            raise ValueError("latent dimension r must be a positive integer")
        if self.sparse_mode and family is not Family.BERNOULLI:
            raise ValueError("sparse mode is only defined for Bernoulli edges")
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "link", link)
        object.__setattr__(self, "r", int(self.r))

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)


def link_eval(link: Link, x):
    link = Link(link)
    if link is Link.LOGISTIC:
        return expit(x)
    return x


def _check_edges(spec: ModelSpec, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidEdgeError("edge value must be finite")
    if spec.family is Family.BERNOULLI and not np.all((a == 0) | (a == 1)):
        raise InvalidEdgeError("Bernoulli edge value must be 0 or 1")
    return a


def _loglik(spec: ModelSpec, a, x):
    if spec.family is Family.BERNOULLI:
        # logaddexp(0, x) = log(1 + e^x) without overflow
        return a * x - np.logaddexp(0.0, x)
    return -((a - x) ** 2) / (2.0 * spec.delta**2)


def _derivs(spec: ModelSpec, a, x):
    if spec.family is Family.BERNOULLI:
        t = expit(x)
        w = t * (1.0 - t)
        return a - t, -w, w * (2.0 * t - 1.0)
    d2 = spec.delta**2
    x = np.asarray(x, dtype=float)
    return (a - x) / d2, np.full_like(x, -1.0 / d2), np.zeros_like(x)


def _scalar_or_array(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v


def loglik_edge(spec: ModelSpec, a, pi_total):
    """Log-likelihood of one edge value given its linear predictor.

    The Gaussian normalising constant -log(2 pi delta^2)/2 is dropped.
    Accepts scalars or broadcastable arrays.
    """
    a = _check_edges(spec, a)
    return _scalar_or_array(_loglik(spec, a, np.asarray(pi_total, dtype=float)))


def loglik_derivs(spec: ModelSpec, a, pi_total):
    """First three derivatives of :func:`loglik_edge` in the linear predictor."""
    a = _check_edges(spec, a)
    l1, l2, l3 = _derivs(spec, a, np.asarray(pi_total, dtype=float))
    return _scalar_or_array(l1), _scalar_or_array(l2), _scalar_or_array(l3)


def _check_dims(net: Network, state: LatentState):
    if net.n != state.n:
        raise DimensionError(f"network has {net.n} nodes, state has {state.n}")


def edge_derivatives(net: Network, state: LatentState, spec: ModelSpec, order: int = 2):
    """Matrices of l', l'' (and l''' if ``order == 3``) over all pairs.

    Diagonal entries are set to zero so row sums run over j != i.
    """
    _check_dims(net, state)
    out = _derivs(spec, net.edges, state.linear_predictor())[:order]
    mats = []
    for m in out:
        m = np.array(m, dtype=float)
        np.fill_diagonal(m, 0.0)
        mats.append(m)
    return tuple(mats)


def total_loglik(net: Network, state: LatentState, spec: ModelSpec) -> float:
    """Sum of edge log-likelihoods over unordered pairs i < j."""
    _check_dims(net, state)
    L = _loglik(spec, net.edges, state.linear_predictor())
    return float((L.sum() - np.trace(L)) / 2.0)


def score(net: Network, state: LatentState, spec: ModelSpec) -> np.ndarray:
    """Gradient of :func:`total_loglik` in phi; row i is block i, sum_j l'(pi_ij) h_j."""
    (l1,) = edge_derivatives(net, state, spec, order=1)
    return l1 @ state.H


def network_from_pairs(n: int, pairs: Sequence[tuple], values=None, family=Family.BERNOULLI,
                       labels=None) -> Network:
    """Build a :class:`Network` from (i, j) index pairs."""
    A = np.zeros((n, n))
    vals = np.ones(len(pairs)) if values is None else np.asarray(values, dtype=float)
    for (i, j), v in zip(pairs, vals):
        if i == j:
            raise InvalidEdgeError("self-loop in pair list")
        A[i, j] = A[j, i] = v
    return Network(A, family, labels)

"""Synthetic networks for the simulation designs.

Randomness is derived from ``numpy.random.SeedSequence``: the ground truth
of a setting uses spawn key ``(0,)`` and replication ``k`` uses ``(1, k)``,
so every network is a pure function of ``(setting, rep_index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import expit

from .estimation import apply_identifiability
from .model import Family, LatentState, ModelSpec, Network


class SimKind(str, Enum):
    BOUNDED_INDEP = "bounded"
    DEPENDENT1 = "dependent1"
    DEPENDENT2 = "dependent2"
    SPARSE = "sparse"
    GAUSSIAN_INDEP = "gaussian"


class RhoRule(str, Enum):
    FIXED = "fixed"          # rho = -3
    HALF_LOG_N = "halflogn"  # rho = -log(n) / 2
    ZERO = "zero"


FIXED_RHO = -3.0


@dataclass(frozen=True)
class SimSetting:
    kind: SimKind = SimKind.BOUNDED_INDEP
    n: int = 500
    r: int = 2
    rho_rule: Optional[RhoRule] = None
    dep_kappa: float = 0.5
    hidden_prop: float = 0.5
    seed: int = 0
    delta: float = 1.0

    def __post_init__(self):
        kind = SimKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.rho_rule is None:
            rule = {SimKind.SPARSE: RhoRule.HALF_LOG_N,
                    SimKind.GAUSSIAN_INDEP: RhoRule.ZERO}.get(kind, RhoRule.FIXED)
        else:
            rule = RhoRule(self.rho_rule)
        object.__setattr__(self, "rho_rule", rule)
        if self.n < 10:
            raise ValueError("simulation settings need n >= 10")
        if self.r < 1:
            raise ValueError("r must be positive")
        if not 0 <= self.dep_kappa < 1:
            raise ValueError("dep_kappa must lie in [0, 1)")
        if not 0 <= self.hidden_prop <= 1:
            raise ValueError("hidden_prop must lie in [0, 1]")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def family(self) -> Family:
        return Family.GAUSSIAN if self.kind is SimKind.GAUSSIAN_INDEP else Family.BERNOULLI

    @property
    def rho(self) -> float:
        if self.rho_rule is RhoRule.HALF_LOG_N:
            return -0.5 * math.log(self.n)
        if self.rho_rule is RhoRule.ZERO:
            return 0.0
        return FIXED_RHO

    def model_spec(self, **overrides) -> ModelSpec:
        kw = dict(family=self.family, r=self.r, delta=self.delta,
                  sparse_mode=self.kind is SimKind.SPARSE)
        kw.update(overrides)
        return ModelSpec(**kw)

    def with_(self, **changes) -> "SimSetting":
        return replace(self, **changes)


@dataclass
class GroundTruth:
    state: LatentState
    theta: np.ndarray
    hidden_z: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.state.n


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def truncated_normal(rng: np.random.Generator, size, bound: float = 2.0) -> np.ndarray:
    """Standard normal restricted to [-bound, bound], by rejection."""
    out = rng.standard_normal(size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def edge_parameters(state: LatentState, family: Family, hidden_z=None) -> np.ndarray:
    P = state.linear_predictor()
    if hidden_z is not None:
        P = P + np.outer(hidden_z, hidden_z)
    theta = expit(P) if family is Family.BERNOULLI else P
    np.fill_diagonal(theta, 0.0)
    return theta


def gen_latent(setting: SimSetting) -> GroundTruth:
    """Truncated-normal Z, uniform alpha on [1, 3], both centred, canonical form."""
    rng = _rng(setting.seed, 0)
    n, r = setting.n, setting.r
    Z = truncated_normal(rng, (n, r))
    alpha = rng.uniform(1.0, 3.0, n)
    Z -= Z.mean(axis=0)
    alpha -= alpha.mean()
    state = apply_identifiability(LatentState(Z, alpha, setting.rho))
    hidden = None
    if setting.kind is SimKind.DEPENDENT2 and setting.hidden_prop > 0:
        z_dep = truncated_normal(rng, n)
        mask = np.zeros(n)
        mask[rng.choice(n, size=int(round(setting.hidden_prop * n)), replace=False)] = 1.0
        hidden = z_dep * mask
    return GroundTruth(state, edge_parameters(state, setting.family, hidden), hidden)


def gen_network_independent(truth: GroundTruth, family: Family = Family.BERNOULLI,
                            seed=0, delta: float = 1.0) -> Network:
    """Independent edges given the truth; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed, 2)
    family = Family(family)
    n = truth.n
    iu = np.triu_indices(n, 1)
    theta = truth.theta[iu]
    if family is Family.BERNOULLI:
        vals = (rng.random(theta.size) < theta).astype(float)
    else:
        vals = theta + delta * rng.standard_normal(theta.size)
    A = np.zeros((n, n))
    A[iu] = vals
    return Network(A + A.T, family)


def chain_coefficients(p: np.ndarray, kappa: float) -> np.ndarray:
    """Correlation between consecutive chain members: kappa times the feasibility bound.

    Entry k links members k and k + 1; links touching a degenerate marginal
    (0 or 1) get zero correlation.
    """
    p = np.asarray(p, dtype=float)
    p1, p2 = p[:-1], p[1:]
    ok = (p1 > 0) & (p1 < 1) & (p2 > 0) & (p2 < 1)
    rho = np.zeros(p1.shape)
    a, b = p1[ok], p2[ok]
    ratio = (a * (1 - b)) / (b * (1 - a))
    rho[ok] = kappa * np.sqrt(np.minimum(ratio, 1.0 / ratio))
    return rho


def binary_chain(p: np.ndarray, kappa: float, rng: np.random.Generator,
                 size: Optional[int] = None) -> np.ndarray:
    """First-order Markov chain of Bernoulli(p_k) variables with decaying-product correlation.

    P(X_{k+1} = 1 | X_k = x) = p_{k+1} + rho_k sqrt(p_{k+1} q_{k+1} / (p_k q_k)) (x - p_k),
    which keeps every marginal and gives corr(X_k, X_{k+1}) = rho_k. With
    ``size`` given, that many independent chains are drawn (shape ``(size, K)``).
    """
    p = np.asarray(p, dtype=float)
    K = p.size
    rho = chain_coefficients(p, kappa)
    sd = np.sqrt(p * (1 - p))
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(rho > 0, rho * sd[1:] / sd[:-1], 0.0)
    if size is None:
        u = rng.random(K).tolist()
        pl, sl = p.tolist(), slope.tolist()
        out = [0.0] * K
        x = 1.0 if u[0] < pl[0] else 0.0
        out[0] = x
        for k in range(1, K):
            q = pl[k] + sl[k - 1] * (x - pl[k - 1])
            x = 1.0 if u[k] < min(1.0, max(0.0, q)) else 0.0
            out[k] = x
        return np.array(out)
    u = rng.random((size, K))
    out = np.empty((size, K))
    x = (u[:, 0] < p[0]).astype(float)
    out[:, 0] = x
    for k in range(1, K):
        q = np.clip(p[k] + slope[k - 1] * (x - p[k - 1]), 0.0, 1.0)
        x = (u[:, k] < q).astype(float)
        out[:, k] = x
    return out


def gen_network_dependent_chain(truth: GroundTruth, kappa: float = 0.5, seed=0) -> Network:
    """Bernoulli edges chained in lexicographic pair order (1,2), (1,3), ..., (n-1,n)."""
    if not 0 <= kappa < 1:
        raise ValueError("kappa must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed, 2)
    n = truth.n
    iu = np.triu_indices(n, 1)
    vals = binary_chain(truth.theta[iu], kappa, rng)
    A = np.zeros((n, n))
    A[iu] = vals
    return Network(A + A.T, Family.BERNOULLI)


@lru_cache(maxsize=16)
def cached_truth(setting: SimSetting) -> GroundTruth:
    return gen_latent(setting)


def gen_network(setting: SimSetting, truth: GroundTruth, rng: np.random.Generator) -> Network:
    if setting.kind is SimKind.DEPENDENT1:
        return gen_network_dependent_chain(truth, setting.dep_kappa, rng)
    return gen_network_independent(truth, setting.family, rng, setting.delta)


def gen_replication_stream(setting: SimSetting, rep_index: int):
    """``(network, truth)`` for one replication; the truth is shared across replications."""
    if rep_index < 0:
        raise ValueError("rep_index must be non-negative")
    truth = cached_truth(setting)
    return gen_network(setting, truth, _rng(setting.seed, 1, int(rep_index))), truth

"""Gaussian, Gaussian-mixture and categorical primitives.

Entropy, cross-entropy, KL and the entropy-weighted objective

    D_alpha(p || q) = -alpha * H(p) + H(p, q)

for a candidate Gaussian against a Gaussian mixture and for finite
categorical distributions.

Gaussian expectations use the trapezoid rule on a uniform grid over
z in [-12, 12] (x = mu + sigma * z).  For analytic integrands with Gaussian
decay it converges geometrically in the node spacing.  Gauss-Hermite loses
here: the log-mixture density has complex singularities close to the real
axis wherever two components cross, and its central nodes are too sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


class SupportError(ValueError):
    """p puts mass where q has none."""


class QuadratureError(ArithmeticError):
    """Halving the node spacing moved the integral by more than the tolerance."""


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError(f"non-finite Gaussian parameters: {self}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mu: float
    sigma: float


@dataclass(frozen=True)
class GaussianMixtureSpec:
    components: tuple[MixtureComponent, ...]

    def __post_init__(self):
        comps = tuple(
            c if isinstance(c, MixtureComponent) else MixtureComponent(*c)
            for c in self.components
        )
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        for c in comps:
            if not c.weight > 0:
                raise ValueError(f"component weight must be positive: {c}")
            if not c.sigma > 0:
                raise ValueError(f"component sigma must be positive: {c}")
        total = math.fsum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, expected 1")

    @classmethod
    def from_arrays(cls, weights, mus, sigmas) -> "GaussianMixtureSpec":
        return cls(
            tuple(
                MixtureComponent(float(w), float(m), float(s))
                for w, m, s in zip(weights, mus, sigmas, strict=True)
            )
        )

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def mus(self) -> np.ndarray:
        return np.array([c.mu for c in self.components])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.components])


@dataclass(frozen=True)
class CategoricalDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probs must be finite and non-negative")
        if abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"probs sum to {math.fsum(p)!r}, expected 1")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class QuadratureConfig:
    """Trapezoid rule over z in [-half_width, half_width].

    ``node_count`` is the minimum.  When ``max_spacing`` is set, a candidate
    much wider than the narrowest mixture component gets more nodes, so that
    the spacing in x stays below ``max_spacing`` times that component's
    sigma.  Counts are always 2^k + 1 so refinements are nested.
    """

    node_count: int = 2049
    half_width: float = 12.0
    max_spacing: float | None = 0.06

    def __post_init__(self):
        if self.node_count < 8:
            raise ValueError("node_count must be at least 8")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.max_spacing is not None and not self.max_spacing > 0:
            raise ValueError("max_spacing must be positive or None")

    def nodes_for(self, sigma, spec: "GaussianMixtureSpec") -> np.ndarray:
        """Node count to use for each candidate sigma (array in, int array out)."""
        sigma = np.asarray(sigma, dtype=float)
        n = np.full(sigma.shape, self.node_count, dtype=np.int64)
        if self.max_spacing is None:
            return n
        intervals = 2 * self.half_width * sigma / (self.max_spacing * float(spec.sigmas.min()))
        k = np.ceil(np.log2(np.maximum(intervals, 1.0)))
        return np.maximum(n, (2 ** k).astype(np.int64) + 1)


class CategoricalFunctionals(NamedTuple):
    entropy: float
    cross_entropy: float
    kl: float
    d_alpha: float


def gauss_entropy(g: GaussianParams) -> float:
    """Differential entropy 0.5 * ln(2 pi e sigma^2); negative for small sigma."""
    return 0.5 * (LOG_2PI + 1.0) + math.log(g.sigma)


def gauss_entropy_array(sigma) -> np.ndarray:
    return 0.5 * (LOG_2PI + 1.0) + np.log(sigma)


def gmm_log_pdf(spec: GaussianMixtureSpec, x):
    """Log mixture density via log-sum-exp; broadcasts over array ``x``."""
    x = np.asarray(x, dtype=float)
    const = [math.log(c.weight / c.sigma) - 0.5 * LOG_2PI for c in spec.components]
    # one array per component: avoids a trailing component axis on big grids
    logs = [k - 0.5 * ((x - c.mu) / c.sigma) ** 2 for k, c in zip(const, spec.components)]
    top = np.array(logs[0], dtype=float)
    for lg in logs[1:]:
        np.maximum(top, lg, out=top)
    acc = np.zeros_like(top)
    for lg in logs:
        acc += np.exp(lg - top)
    out = top + np.log(acc)
    return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=16)
def normal_rule(n: int, half_width: float = 12.0) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights with E_{z~N(0,1)}[f(z)] ~= sum w_i f(z_i)."""
    z = np.linspace(-half_width, half_width, n)
    w = np.exp(-0.5 * z * z)
    w /= math.fsum(w)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def _cross_entropy_fixed(mu, sigma, spec, n: int, half_width: float) -> np.ndarray:
    z, w = normal_rule(n, half_width)
    out = np.empty(mu.shape)
    # bound the (cells, nodes) temporaries to a few tens of MB
    step = max(1, 2**20 // (n * len(spec.components)))
    for i in range(0, mu.size, step):
        x = mu[i : i + step, None] + sigma[i : i + step, None] * z
        out[i : i + step] = -(gmm_log_pdf(spec, x) @ w)
    return out


def cross_entropy_grid(mu, sigma, spec: GaussianMixtureSpec, q: QuadratureConfig | None = None):
    """-E_{x~N(mu, sigma)}[log gmm(x)] for broadcastable arrays mu, sigma."""
    q = q or QuadratureConfig()
    mu, sigma = np.broadcast_arrays(np.asarray(mu, float), np.asarray(sigma, float))
    flat_mu, flat_sigma = mu.ravel(), sigma.ravel()
    nodes = q.nodes_for(flat_sigma, spec)
    out = np.empty(flat_mu.shape)
    for n in np.unique(nodes):
        sel = nodes == n
        out[sel] = _cross_entropy_fixed(flat_mu[sel], flat_sigma[sel], spec, int(n), q.half_width)
    return out.reshape(mu.shape) if mu.ndim else float(out[0])


def d_alpha_grid(
    mu, sigma, spec: GaussianMixtureSpec, alpha: float, q: QuadratureConfig | None = None
):
    """Vectorised D_alpha over a (mu, sigma) grid, no convergence check."""
    return -alpha * gauss_entropy_array(sigma) + cross_entropy_grid(mu, sigma, spec, q)


def cross_entropy_gauss_gmm(
    g: GaussianParams,
    spec: GaussianMixtureSpec,
    q: QuadratureConfig = QuadratureConfig(),
    tol: float = 1e-8,
) -> float:
    """H(g, spec), integrated on a grid centred on g and scaled by g.sigma.

    Raises QuadratureError if rerunning with the node spacing halved
    (2n - 1 nodes, nested) changes the value by more than ``tol``.
    """
    n = int(q.nodes_for(g.sigma, spec))
    fine = 2 * n - 1
    value = float(_cross_entropy_fixed(np.array([g.mu]), np.array([g.sigma]), spec, n, q.half_width)[0])
    check = float(_cross_entropy_fixed(np.array([g.mu]), np.array([g.sigma]), spec, fine, q.half_width)[0])
    if not abs(check - value) <= tol:
        raise QuadratureError(
            f"cross-entropy not converged at {g}: {value!r} vs {check!r} "
            f"with {n} and {fine} nodes"
        )
    return value


def d_alpha_continuous(
    g: GaussianParams,
    spec: GaussianMixtureSpec,
    alpha: float,
    q: QuadratureConfig = QuadratureConfig(),
) -> float:
    if not 0.0 <= alpha <= 2.0:
        raise ValueError(f"alpha must lie in [0, 2], got {alpha}")
    return -alpha * gauss_entropy(g) + cross_entropy_gauss_gmm(g, spec, q)


def gauss_kl(p: GaussianParams, q: GaussianParams) -> float:
    """Closed-form KL(p || q) between univariate Gaussians."""
    return (
        math.log(q.sigma / p.sigma)
        + (p.sigma**2 + (p.mu - q.mu) ** 2) / (2.0 * q.sigma**2)
        - 0.5
    )


def _as_probs(p) -> np.ndarray:
    if isinstance(p, CategoricalDist):
        return p.probs
    return CategoricalDist(np.asarray(p, dtype=float)).probs


def categorical_functionals(p, q, alpha: float) -> CategoricalFunctionals:
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"outcome sets differ: {p.shape} vs {q.shape}")
    support = p > 0
    bad = np.flatnonzero(support & (q <= 0))
    if bad.size:
        raise SupportError(f"p has mass where q is zero at outcomes {bad.tolist()}")
    ps, qs = p[support], q[support]
    entropy = -float(np.sum(ps * np.log(ps)))
    cross = -float(np.sum(ps * np.log(qs)))
    return CategoricalFunctionals(
        entropy=entropy,
        cross_entropy=cross,
        kl=cross - entropy,
        d_alpha=-alpha * entropy + cross,
    )


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    return z - logsumexp(z, axis=axis, keepdims=True)


def apply_temperature(logits: Sequence[float], T: float) -> CategoricalDist:
    """softmax(logits / T)."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    p = np.exp(log_softmax(np.asarray(logits, dtype=float) / T))
    # renormalise so the 1e-12 sum invariant holds after exp round-off
    return CategoricalDist(p / math.fsum(p))


def row_entropy(probs) -> np.ndarray:
    """Shannon entropy of each row (0 ln 0 := 0)."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)

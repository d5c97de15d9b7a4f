"""Fit a single Gaussian to a Gaussian mixture by minimising D_alpha.

Exhaustive (mu, sigma) grid first, then Nelder-Mead polishing from the best
grid cell.  The grid doubles as the source for the log-ratio heatmaps.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .distributions import (
    GaussianMixtureSpec,
    GaussianParams,
    QuadratureConfig,
    cross_entropy_grid,
    d_alpha_continuous,
    gauss_entropy_array,
)

SIGMA_FLOOR = 1e-3
HEATMAP_CAP = 3.0


@dataclass(frozen=True)
class Axis:
    min: float
    max: float
    count: int
    log_spaced: bool = False

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"axis needs at least 2 points, got {self.count}")
        if not self.max > self.min:
            raise ValueError(f"axis max {self.max} must exceed min {self.min}")
        if self.log_spaced and self.min <= 0:
            raise ValueError("log-spaced axis needs a positive minimum")

    def values(self) -> np.ndarray:
        if self.log_spaced:
            return np.geomspace(self.min, self.max, self.count)
        return np.linspace(self.min, self.max, self.count)


@dataclass(frozen=True)
class FitConfig:
    alpha: float
    mu_grid: Axis
    sigma_grid: Axis
    refine_iters: int = 500
    refine_tol: float = 1e-8
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in [0, 2], got {self.alpha}")
        if self.sigma_grid.min < SIGMA_FLOOR:
            raise ValueError(f"sigma grid must start at or above {SIGMA_FLOOR}")
        if not self.refine_tol > 0:
            raise ValueError("refine_tol must be positive")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be non-negative")

    @classmethod
    def default_for(
        cls, spec: GaussianMixtureSpec, alpha: float, mu_count: int = 200, sigma_count: int = 100, **kw
    ) -> "FitConfig":
        """Search box [lowest mean - 3 s, highest mean + 3 s] x [0.05, 3 s], s = widest std."""
        smax = float(spec.sigmas.max())
        mu_grid = Axis(float(spec.mus.min()) - 3 * smax, float(spec.mus.max()) + 3 * smax, mu_count)
        sigma_grid = Axis(0.05, 3 * smax, sigma_count, log_spaced=True)
        return cls(alpha=alpha, mu_grid=mu_grid, sigma_grid=sigma_grid, **kw)


@dataclass(frozen=True)
class FitResult:
    alpha: float
    g_hat: GaussianParams
    d_alpha_value: float
    grid_best: GaussianParams
    grid_value: float
    converged: bool
    iterations: int = 0


@dataclass(frozen=True)
class FitFailure:
    alpha: float
    error: str


@dataclass(frozen=True)
class HeatmapSpec:
    mu_range: Axis
    sigma_range: Axis

    @classmethod
    def covering(cls, cfg: FitConfig, mu_count: int = 200, sigma_count: int = 200) -> "HeatmapSpec":
        return cls(
            Axis(cfg.mu_grid.min, cfg.mu_grid.max, mu_count),
            Axis(cfg.sigma_grid.min, cfg.sigma_grid.max, sigma_count),
        )


def standard_configs() -> list[tuple[str, GaussianMixtureSpec]]:
    """Equal-weight mixtures with the first mean at 0 and evenly spaced means."""
    families = [
        ((1.0, 0.8), (4, 5, 6)),
        ((1.0, 0.8, 0.5), (3, 5, 7)),
        ((1.0, 0.8, 0.5, 0.3), (3, 5, 7)),
    ]
    out = []
    for stds, gaps in families:
        k = len(stds)
        for gap in gaps:
            spec = GaussianMixtureSpec.from_arrays(
                [1.0 / k] * k, [float(gap * i) for i in range(k)], stds
            )
            out.append((f"{k}comp-gap{gap}", spec))
    return out


def standard_config(name: str) -> GaussianMixtureSpec:
    for key, spec in standard_configs():
        if key == name:
            return spec
    raise KeyError(f"unknown mixture config {name!r}")


def _grid_cross_entropy(spec: GaussianMixtureSpec, cfg: FitConfig):
    mus = cfg.mu_grid.values()
    sigmas = cfg.sigma_grid.values()
    M, S = np.meshgrid(mus, sigmas, indexing="ij")
    q = cfg.quadrature
    return mus, sigmas, cross_entropy_grid(M, S, spec, q)


def _grid_argmin(values: np.ndarray, mus: np.ndarray, sigmas: np.ndarray) -> tuple[int, int]:
    # lowest value, then smaller sigma, then smaller mu
    best = values.min()
    ii, jj = np.nonzero(values == best)
    order = np.lexsort((mus[ii], sigmas[jj]))
    return int(ii[order[0]]), int(jj[order[0]])


def _objective(spec: GaussianMixtureSpec, alpha: float, q: QuadratureConfig):
    def f(theta):
        mu, log_sigma = theta
        sigma = max(math.exp(log_sigma), SIGMA_FLOOR)
        ce = cross_entropy_grid(mu, sigma, spec, q)
        return -alpha * float(gauss_entropy_array(sigma)) + ce

    return f


def _fit_from_grid(spec, cfg: FitConfig, mus, sigmas, ce) -> FitResult:
    alpha = cfg.alpha
    values = -alpha * gauss_entropy_array(sigmas)[None, :] + ce
    i, j = _grid_argmin(values, mus, sigmas)
    start = GaussianParams(float(mus[i]), float(sigmas[j]))
    f = _objective(spec, alpha, cfg.quadrature)
    x0 = np.array([start.mu, math.log(start.sigma)])
    start_value = f(x0)

    if cfg.refine_iters == 0:
        return FitResult(alpha, start, start_value, start, start_value, True, 0)

    dmu = (cfg.mu_grid.max - cfg.mu_grid.min) / (cfg.mu_grid.count - 1)
    dls = math.log(cfg.sigma_grid.max / cfg.sigma_grid.min) / (cfg.sigma_grid.count - 1)
    simplex = np.array([x0, x0 + [dmu, 0.0], x0 + [0.0, dls]])
    res = minimize(
        f,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "maxiter": cfg.refine_iters,
            "maxfev": 4 * cfg.refine_iters,
            "xatol": cfg.refine_tol,
            "fatol": 1e-15,
        },
    )
    g_hat = GaussianParams(float(res.x[0]), max(math.exp(float(res.x[1])), SIGMA_FLOOR))
    # final value carries the node-doubling convergence check
    value = d_alpha_continuous(g_hat, spec, alpha, cfg.quadrature)
    if value > start_value:
        g_hat, value = start, start_value
    at_floor = g_hat.sigma <= SIGMA_FLOOR * (1 + 1e-6)
    converged = bool(res.success) and not at_floor
    return FitResult(alpha, g_hat, value, start, start_value, converged, int(res.nit))


def fit_gaussian_dalpha(spec: GaussianMixtureSpec, cfg: FitConfig) -> FitResult:
    mus, sigmas, ce = _grid_cross_entropy(spec, cfg)
    return _fit_from_grid(spec, cfg, mus, sigmas, ce)


def alpha_sweep_fit(
    spec: GaussianMixtureSpec,
    alphas,
    cfg: FitConfig,
    workers: int = 1,
) -> list[FitResult | FitFailure]:
    """One fit per alpha on a shared grid; results in the order of ``alphas``.

    The cross-entropy grid does not depend on alpha and is computed once.
    A failing alpha yields a FitFailure entry instead of aborting the sweep.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alphas must be non-empty")
    mus, sigmas, ce = _grid_cross_entropy(spec, cfg)

    def one(alpha):
        try:
            sub = FitConfig(
                alpha=alpha,
                mu_grid=cfg.mu_grid,
                sigma_grid=cfg.sigma_grid,
                refine_iters=cfg.refine_iters,
                refine_tol=cfg.refine_tol,
                quadrature=cfg.quadrature,
            )
            return _fit_from_grid(spec, sub, mus, sigmas, ce)
        except (ValueError, ArithmeticError) as exc:
            return FitFailure(alpha, f"{type(exc).__name__}: {exc}")

    if workers == 1:
        return [one(a) for a in alphas]
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        return list(pool.map(one, alphas))


def dalpha_heatmap(
    spec: GaussianMixtureSpec,
    alpha: float,
    hs: HeatmapSpec,
    fit: FitResult,
    q: QuadratureConfig | None = None,
) -> np.ndarray:
    """min(3, ln D(cell) - ln D(fit)) on the heatmap grid.

    Rows follow ``hs.sigma_range`` and columns ``hs.mu_range``.
    """
    q = q or QuadratureConfig()
    if fit.alpha != alpha:
        raise ValueError(f"fit was computed for alpha={fit.alpha}, not {alpha}")
    if not fit.d_alpha_value > 0:
        raise ValueError(f"D_alpha at the fitted parameters is {fit.d_alpha_value!r}; log undefined")
    mus = hs.mu_range.values()
    sigmas = hs.sigma_range.values()
    S, M = np.meshgrid(sigmas, mus, indexing="ij")
    ce = cross_entropy_grid(M, S, spec, q)
    d = -alpha * gauss_entropy_array(S) + ce
    bad = np.argwhere(~(d > 0))
    if bad.size:
        r, c = bad[0]
        raise ValueError(
            f"D_alpha={d[r, c]!r} is not positive at mu={mus[c]!r}, sigma={sigmas[r]!r}; "
            "shrink the heatmap range"
        )
    return np.minimum(HEATMAP_CAP, np.log(d) - math.log(fit.d_alpha_value))

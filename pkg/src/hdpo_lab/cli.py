"""Command-line runner: ``hdpo-lab run config.json``.

Every experiment writes CSV tables (plus SVG plots where useful) into the
output directory, then a ``manifest.json`` listing each file with its
SHA-256 digest.  Identical config and seed give byte-identical CSVs.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O failure.  On
failure a single JSON line ``{"error": ..., "message": ..., "exit_code": ...}``
goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .distributions import GaussianMixtureSpec, QuadratureConfig, gmm_log_pdf
from .gmm_fit import (
    Axis,
    FitConfig,
    FitFailure,
    HeatmapSpec,
    alpha_sweep_fit,
    dalpha_heatmap,
    fit_gaussian_dalpha,
    standard_config,
)
from .metrics import (
    coverage_report,
    distinct_n,
    normalized_entropy,
    random_toy_lm,
    sample_toy_lm,
    self_bleu,
)
from .preference import LossConfig, optimal_policy, total_variation
from .svg import heatmap_svg, line_plot_svg
from .trainer import (
    DEFAULT_TRAIN_BETA,
    TrainConfig,
    beta_equivalence_scan,
    beta_scan_task,
    default_task,
    entropy_vs_alpha,
    synthesize_dataset,
    train,
    uniform_reference_task,
)

log = logging.getLogger("hdpo_lab")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
BLEU_SETTINGS = "orders 1-4; uniform weights; closest-length brevity penalty; add-one smoothing"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    parameters: dict[str, Any]
    output_dir: Path
    seed: int


@dataclass
class RunManifest:
    config: dict[str, Any]
    tool_version: str
    wall_clock_seconds: float
    files: list[dict[str, str]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "tool_version": self.tool_version,
                "wall_clock_seconds": self.wall_clock_seconds,
                "files": self.files,
            },
            indent=2,
            sort_keys=True,
        )


# -- seeds --------------------------------------------------------------------


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for sub-run ``keys`` of ``root``."""
    # the key count is mixed in because SeedSequence treats trailing zeros as padding
    ss = np.random.SeedSequence([root, len(keys), *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# -- output -------------------------------------------------------------------


def render(v) -> str:
    """Shortest round-trip text for floats; ints and strings as-is."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if v is None:
        return ""
    return str(v)


def emit_csv(header: list[str], rows, path) -> Path:
    path = Path(path)
    rows = [list(r) for r in rows]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise ValueError(f"row {i} has {len(r)} fields, header has {len(header)}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([render(v) for v in r])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def emit_heatmap_svg(matrix, axes: tuple, star, path, **kw) -> Path:
    """``axes`` is (mu_values, sigma_values); ``star`` is GaussianParams or None."""
    mus, sigmas = axes
    loc = None if star is None else (star.mu, star.sigma)
    return heatmap_svg(matrix, mus, sigmas, loc, path, **kw)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- parameter parsing ----------------------------------------------------------


class Params:
    """Typed access to an experiment's parameter map; unknown keys are rejected."""

    def __init__(self, raw: dict[str, Any], experiment: str):
        if not isinstance(raw, dict):
            raise ConfigError("'parameters' must be an object")
        self.raw = raw
        self.used: set[str] = set()
        self.experiment = experiment

    def get(self, key, default, kind: Callable = float):
        self.used.add(key)
        v = self.raw.get(key, default)
        try:
            if kind is list:
                if not isinstance(v, list) or not v:
                    raise TypeError
                return [float(x) for x in v]
            if kind is int:
                if isinstance(v, bool) or not float(v).is_integer():
                    raise TypeError
                return int(v)
            if kind is str:
                if not isinstance(v, str):
                    raise TypeError
                return v
            if kind is bool:
                if not isinstance(v, bool):
                    raise TypeError
                return v
            return float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"parameter {key!r} of {self.experiment}: bad value {v!r}") from None

    def mixture(self) -> tuple[str, GaussianMixtureSpec]:
        self.used.add("mixture")
        m = self.raw.get("mixture", "2comp-gap4")
        if isinstance(m, str):
            try:
                return m, standard_config(m)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None
        if isinstance(m, dict) and set(m) == {"weights", "means", "stds"}:
            return "custom", GaussianMixtureSpec.from_arrays(m["weights"], m["means"], m["stds"])
        raise ConfigError("'mixture' must be a standard name or {weights, means, stds}")

    def finish(self):
        extra = set(self.raw) - self.used
        if extra:
            raise ConfigError(f"unknown parameter(s) for {self.experiment}: {sorted(extra)}")


def _fit_config(p: Params, spec, alpha) -> FitConfig:
    q = QuadratureConfig(node_count=p.get("node_count", 2049, int))
    cfg = FitConfig.default_for(
        spec,
        alpha,
        mu_count=p.get("mu_count", 200, int),
        sigma_count=p.get("sigma_count", 100, int),
        refine_iters=p.get("refine_iters", 500, int),
        refine_tol=p.get("refine_tol", 1e-8),
        quadrature=q,
    )
    return cfg


def _task(p: Params, cfg: ExperimentConfig):
    seed = p.get("task_seed", derive_seed(cfg.seed, 1), int)
    return default_task(seed, p.get("n_prompts", 3, int), p.get("n_completions", 6, int)), seed


def _train_config(p: Params, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=p.get("learning_rate", 0.5),
        max_steps=p.get("max_steps", 20_000, int),
        grad_norm_tol=p.get("grad_norm_tol", 1e-8),
        seed=seed,
    )


# -- experiments ----------------------------------------------------------------
# Each builder validates parameters and returns a zero-argument job; jobs
# return the list of files they wrote.


def exp_gmm_fit(p: Params, cfg: ExperimentConfig, workers: int):
    name, spec = p.mixture()
    alphas = p.get("alphas", [0.6, 1.0], list)
    fit_cfg = _fit_config(p, spec, alphas[0])
    for a in alphas:
        FitConfig(a, fit_cfg.mu_grid, fit_cfg.sigma_grid)
    out = cfg.output_dir

    def job():
        results = alpha_sweep_fit(spec, alphas, fit_cfg, workers=workers)
        rows, series = [], {}
        x = np.linspace(fit_cfg.mu_grid.min, fit_cfg.mu_grid.max, 400)
        series["reference mixture"] = (x, np.exp(gmm_log_pdf(spec, x)))
        for r in results:
            if isinstance(r, FitFailure):
                rows.append([r.alpha, math.nan, math.nan, math.nan, math.nan, math.nan, False, r.error])
                continue
            rows.append(
                [r.alpha, r.g_hat.mu, r.g_hat.sigma, r.d_alpha_value, r.grid_best.mu, r.grid_best.sigma, r.converged, ""]
            )
            g = r.g_hat
            series[f"alpha={r.alpha:g}"] = (x, np.exp(-0.5 * ((x - g.mu) / g.sigma) ** 2) / (g.sigma * math.sqrt(2 * math.pi)))
        files = [
            emit_csv(
                ["alpha", "mu_hat", "sigma_hat", "d_alpha", "grid_mu", "grid_sigma", "converged", "error"],
                rows,
                out / "gmm_fit.csv",
            ),
            line_plot_svg(series, out / "gmm_fit.svg", "x", "density", f"D_alpha fits to {name}"),
        ]
        return files

    return job


def exp_gmm_heatmap(p: Params, cfg: ExperimentConfig, workers: int):
    name, spec = p.mixture()
    alpha = p.get("alpha", 0.6)
    fit_cfg = _fit_config(p, spec, alpha)
    hs = HeatmapSpec.covering(fit_cfg, p.get("heat_mu_count", 200, int), p.get("heat_sigma_count", 200, int))
    out = cfg.output_dir

    def job():
        fit = fit_gaussian_dalpha(spec, fit_cfg)
        mat = dalpha_heatmap(spec, alpha, hs, fit, fit_cfg.quadrature)
        mus, sigmas = hs.mu_range.values(), hs.sigma_range.values()
        rows = [[mus[j], sigmas[i], mat[i, j]] for i in range(len(sigmas)) for j in range(len(mus))]
        return [
            emit_csv(
                ["alpha", "mu_hat", "sigma_hat", "d_alpha", "converged"],
                [[alpha, fit.g_hat.mu, fit.g_hat.sigma, fit.d_alpha_value, fit.converged]],
                out / "heatmap_fit.csv",
            ),
            emit_csv(["mu", "sigma", "value"], rows, out / "heatmap.csv"),
            emit_heatmap_svg(mat, (mus, sigmas), fit.g_hat, out / "heatmap.svg", title=f"{name}, alpha={alpha:g}"),
        ]

    return job


def exp_train(p: Params, cfg: ExperimentConfig, workers: int):
    task, task_seed = _task(p, cfg)
    loss_cfg = LossConfig(p.get("alpha", 1.0), p.get("beta", DEFAULT_TRAIN_BETA))
    mode = p.get("mode", "population", str)
    n_pairs = p.get("n_pairs", 10_000, int) if mode == "sampled" else None
    data_seed = derive_seed(cfg.seed, 2)
    train_cfg = _train_config(p, data_seed)
    if mode not in ("population", "sampled"):
        raise ConfigError(f"mode must be 'population' or 'sampled', got {mode!r}")
    out = cfg.output_dir

    def job():
        data = synthesize_dataset(task, mode, n_pairs, data_seed)
        rep = train(task, data, loss_cfg, train_cfg)
        oracle = optimal_policy(task.ref, task.reward, loss_cfg).policy
        pol = rep.final_policy
        rows = [
            [x, y, task.reward[x, y], task.ref.probs[x, y], pol.probs[x, y], oracle.probs[x, y]]
            for x in range(task.n_prompts)
            for y in range(task.n_completions)
        ]
        steps = np.arange(len(rep.loss_curve))
        return [
            emit_csv(["step", "loss"], zip(steps, rep.loss_curve), out / "loss_curve.csv"),
            emit_csv(["prompt", "completion", "reward", "ref_prob", "policy_prob", "oracle_prob"], rows, out / "policy.csv"),
            emit_csv(
                ["alpha", "beta", "task_seed", "mode", "steps", "final_grad_norm", "converged", "tv_to_oracle", "prompt_weighting"],
                [[loss_cfg.alpha, loss_cfg.beta, task_seed, mode, rep.steps_used, rep.final_grad_norm, rep.converged,
                  total_variation(pol.probs, oracle.probs), "uniform"]],
                out / "train_summary.csv",
            ),
            line_plot_svg({"loss": (steps, rep.loss_curve)}, out / "loss_curve.svg", "step", "H-DPO loss"),
        ]

    return job


def exp_entropy_sweep(p: Params, cfg: ExperimentConfig, workers: int):
    task, task_seed = _task(p, cfg)
    alphas = p.get("alphas", [0.8, 0.9, 0.95, 1.0, 1.1, 1.2], list)
    beta = p.get("beta", DEFAULT_TRAIN_BETA)
    train_cfg = _train_config(p, 0)
    if alphas != sorted(alphas):
        raise ConfigError("alphas must be sorted ascending")
    for a in alphas:
        LossConfig(a, beta)
    out = cfg.output_dir

    def job():
        rows = entropy_vs_alpha(task, alphas, beta, train_cfg, workers=workers)
        table = [
            [r.alpha, beta, task_seed, "uniform", r.mean_entropy, r.oracle_entropy, r.tv_to_oracle, r.steps, r.grad_norm, r.error or ""]
            for r in rows
        ]
        ok = [r for r in rows if r.error is None]
        files = [
            emit_csv(
                ["alpha", "beta", "task_seed", "prompt_weighting", "mean_entropy", "oracle_entropy", "tv_to_oracle", "steps", "grad_norm", "error"],
                table,
                out / "entropy_sweep.csv",
            )
        ]
        if ok:
            files.append(
                line_plot_svg(
                    {"trained": ([r.alpha for r in ok], [r.mean_entropy for r in ok]),
                     "closed form": ([r.alpha for r in ok], [r.oracle_entropy for r in ok])},
                    out / "entropy_sweep.svg", "alpha", "mean policy entropy",
                )
            )
        return files

    return job


def exp_beta_scan(p: Params, cfg: ExperimentConfig, workers: int):
    instance = p.get("instance", "designated", str)
    alpha = p.get("alpha", 0.9)
    beta = p.get("beta", 0.01)
    grid = np.linspace(p.get("beta_min", 0.001), p.get("beta_max", 0.1), p.get("beta_count", 200, int)).tolist()
    if p.get("include_matched", True, bool):
        grid = sorted(set(grid) | {alpha * beta})
    if instance == "designated":
        task = beta_scan_task()
    elif instance == "uniform":
        task = uniform_reference_task(derive_seed(cfg.seed, 3))
    elif instance == "default":
        task = default_task(derive_seed(cfg.seed, 1))
    else:
        raise ConfigError(f"instance must be designated, uniform or default, got {instance!r}")
    LossConfig(alpha, beta)
    if alpha == 1:
        raise ConfigError("beta-scan needs alpha != 1")
    out = cfg.output_dir

    def job():
        res = beta_equivalence_scan(task, alpha, beta, grid)
        return [
            emit_csv(["beta_prime", "tv"], res.per_beta, out / "beta_scan.csv"),
            emit_csv(
                ["instance", "alpha", "beta", "min_tv", "argmin_beta"],
                [[instance, alpha, beta, res.min_tv, res.argmin_beta]],
                out / "beta_scan_summary.csv",
            ),
            line_plot_svg({"TV to H-DPO optimum": tuple(zip(*res.per_beta))}, out / "beta_scan.svg", "beta'", "max row TV"),
        ]

    return job


def exp_metrics_demo(p: Params, cfg: ExperimentConfig, workers: int):
    temps = p.get("temperatures", [0.25, 0.5, 0.75, 1.0], list)
    n_samples = p.get("n_samples", 200, int)
    max_len = p.get("max_len", 20, int)
    vocab = p.get("vocab_size", 8, int)
    n_problems = p.get("n_problems", 20, int)
    ks = [int(k) for k in p.get("ks", [1, 5, 10, 50], list)]
    lm_seed = p.get("lm_seed", derive_seed(cfg.seed, 4), int)
    if any(t <= 0 for t in temps):
        raise ConfigError("temperatures must be positive")
    if n_samples < 2 or max_len < 1 or n_problems < 1:
        raise ConfigError("need n_samples >= 2, max_len >= 1, n_problems >= 1")
    if any(k < 1 or k > n_samples for k in ks):
        raise ConfigError(f"every k must lie in [1, n_samples={n_samples}]")
    lm = random_toy_lm(vocab, lm_seed)
    out = cfg.output_dir

    def per_temperature(i):
        T = temps[i]
        gs = sample_toy_lm(lm, T, n_samples, max_len, derive_seed(cfg.seed, 5, i))
        div = [T, normalized_entropy(gs), self_bleu(gs), distinct_n(gs, 1), distinct_n(gs, 2), BLEU_SETTINGS]
        # problem j is "solved" by a sample whose last token equals answer j
        answers = np.random.default_rng(derive_seed(cfg.seed, 6)).integers(vocab, size=n_problems)
        counts = []
        for j in range(n_problems):
            sub = sample_toy_lm(lm, T, n_samples, max_len, derive_seed(cfg.seed, 7, i, j))
            c = sum(1 for g in sub.responses() if g.tokens[-1] == answers[j])
            counts.append((n_samples, c))
        cov = [[T, k, v] for k, v in coverage_report(counts, ks)]
        return div, cov

    def job():
        idx = range(len(temps))
        if workers == 1:
            results = [per_temperature(i) for i in idx]
        else:
            with ThreadPoolExecutor(max_workers=workers or None) as pool:
                results = list(pool.map(per_temperature, idx))
        div_rows = [d for d, _ in results]
        cov_rows = [row for _, c in results for row in c]
        return [
            emit_csv(["temperature", "normalized_entropy", "self_bleu", "distinct_1", "distinct_2", "bleu_settings"], div_rows, out / "diversity.csv"),
            emit_csv(["temperature", "k", "pass_at_k"], cov_rows, out / "coverage.csv"),
            line_plot_svg(
                {"normalized entropy": (temps, [d[1] for d in div_rows]), "self-BLEU": (temps, [d[2] for d in div_rows])},
                out / "diversity.svg", "temperature", "value",
            ),
        ]

    return job


EXPERIMENTS = {
    "gmm-fit": exp_gmm_fit,
    "gmm-heatmap": exp_gmm_heatmap,
    "train": exp_train,
    "entropy-sweep": exp_entropy_sweep,
    "beta-scan": exp_beta_scan,
    "metrics-demo": exp_metrics_demo,
}


# -- driver -----------------------------------------------------------------------


def load_config(config_path, output_dir=None, seed=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - {"experiment", "parameters", "output_dir", "seed"}
    if extra:
        raise ConfigError(f"unknown top-level key(s): {sorted(extra)}")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; expected one of {sorted(EXPERIMENTS)}")
    s = raw.get("seed", 0) if seed is None else seed
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError(f"seed must be an integer in [0, 2^64), got {s!r}")
    od = output_dir if output_dir is not None else raw.get("output_dir")
    if not od:
        raise ConfigError("no output_dir in config or on the command line")
    return ExperimentConfig(exp, raw.get("parameters", {}) or {}, Path(od), s)


def run(config_path, output_dir=None, seed=None, threads: int = 1) -> RunManifest:
    t0 = time.perf_counter()
    cfg = load_config(config_path, output_dir, seed)
    params = Params(cfg.parameters, cfg.experiment)
    try:
        job = EXPERIMENTS[cfg.experiment](params, cfg, threads)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{cfg.experiment}: {exc}") from None
    params.finish()
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {cfg.output_dir}: {exc}") from exc
    files = job()
    echo = {
        "experiment": cfg.experiment,
        "parameters": cfg.parameters,
        "output_dir": str(cfg.output_dir),
        "seed": cfg.seed,
    }
    manifest = RunManifest(
        echo,
        __version__,
        round(time.perf_counter() - t0, 3),
        [{"path": f.name, "sha256": sha256(f)} for f in files],
    )
    (cfg.output_dir / "manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="hdpo-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run one experiment from a JSON config")
    rp.add_argument("config")
    rp.add_argument("--output-dir")
    rp.add_argument("--seed", type=int)
    rp.add_argument("--threads", type=int, default=1, help="worker threads for sweeps (0 = auto)")
    rp.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 0:
        return _fail("config", "--threads must be >= 0", EXIT_CONFIG)
    threads = args.threads or (os.cpu_count() or 1)
    try:
        manifest = run(args.config, args.output_dir, args.seed, threads)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except ArithmeticError as exc:
        return _fail("numeric", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("numeric", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    for f in manifest.files:
        print(f"{f['sha256']}  {f['path']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

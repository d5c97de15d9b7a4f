"""Synthetic Bradley-Terry tasks and full-batch gradient descent on the H-DPO loss.

Trained policies are checked against the closed-form optimum from
``preference.optimal_policy``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .distributions import row_entropy
from .preference import (
    LossConfig,
    PreferenceDataset,
    TabularPolicy,
    hdpo_loss,
    hdpo_loss_grad,
    optimal_policy,
    total_variation,
)

log = logging.getLogger(__name__)

# beta << 1 makes the optimum nearly one-hot, which plain gradient descent
# from zero logits cannot reach within max_steps.
DEFAULT_TRAIN_BETA = 1.0


class TrainingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    """Ground-truth rewards, reference policy and prompt distribution (uniform by default)."""

    reward: np.ndarray
    ref: TabularPolicy
    prompt_weights: np.ndarray = None

    def __post_init__(self):
        r = np.asarray(self.reward, dtype=float)
        if r.ndim != 2 or r.shape != self.ref.shape:
            raise ValueError(f"reward shape {r.shape} must match reference shape {self.ref.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not np.all(np.isfinite(self.ref.log_probs)):
            raise ValueError("reference policy must have full support")
        if r.shape[1] < 2:
            raise ValueError("need at least two completions per prompt")
        pw = self.prompt_weights
        pw = np.full(r.shape[0], 1.0 / r.shape[0]) if pw is None else np.asarray(pw, dtype=float)
        if pw.shape != (r.shape[0],) or np.any(pw < 0) or abs(math.fsum(pw) - 1.0) > 1e-12:
            raise ValueError("prompt_weights must be a distribution over prompts")
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "prompt_weights", pw)

    @property
    def n_prompts(self) -> int:
        return self.reward.shape[0]

    @property
    def n_completions(self) -> int:
        return self.reward.shape[1]


def default_task(seed: int = 0, n_prompts: int = 3, n_completions: int = 6) -> SyntheticTask:
    """Standard-normal rewards and a softmax-of-normal reference."""
    rng = np.random.default_rng(seed)
    reward = rng.standard_normal((n_prompts, n_completions))
    ref = TabularPolicy(rng.standard_normal((n_prompts, n_completions)))
    return SyntheticTask(reward, ref)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    max_steps: int = 20_000
    grad_norm_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not self.grad_norm_tol > 0:
            raise ValueError("grad_norm_tol must be positive")


@dataclass
class TrainReport:
    final_policy: TabularPolicy
    loss_curve: list[float] = field(default_factory=list)
    final_grad_norm: float = math.nan
    steps_used: int = 0
    converged: bool = False


def synthesize_dataset(
    task: SyntheticTask, mode: str = "population", n_pairs: int | None = None, seed: int = 0
) -> PreferenceDataset:
    """Preference data drawn from the task's Bradley-Terry model.

    ``population`` gives exact weights over every ordered pair; ``sampled``
    draws ``n_pairs`` rows: prompt from the prompt weights, an unordered pair
    of completions uniformly, then the winner by its BT probability.
    """
    r = task.reward
    if mode == "population":
        diff = r[:, :, None] - r[:, None, :]
        w = task.prompt_weights[:, None, None] * expit(diff)
        idx = np.arange(task.n_completions)
        w[:, idx, idx] = 0.0
        return PreferenceDataset.from_weights(w / w.sum())
    if mode != "sampled":
        raise ValueError(f"unknown dataset mode {mode!r}")
    if n_pairs is None or n_pairs < 1:
        raise ValueError("sampled mode needs n_pairs >= 1")
    rng = np.random.default_rng(seed)
    x = rng.choice(task.n_prompts, size=n_pairs, p=task.prompt_weights)
    a = rng.integers(task.n_completions, size=n_pairs)
    b = rng.integers(task.n_completions - 1, size=n_pairs)
    b = b + (b >= a)
    a_wins = rng.random(n_pairs) < expit(r[x, a] - r[x, b])
    pairs = np.column_stack([x, np.where(a_wins, a, b), np.where(a_wins, b, a)])
    return PreferenceDataset("sampled", pairs=pairs)


def train(
    task: SyntheticTask,
    data: PreferenceDataset,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig = TrainConfig(),
) -> TrainReport:
    """Full-batch gradient descent on the policy logits, starting from zeros."""
    logits = np.zeros(task.reward.shape)
    report = TrainReport(final_policy=TabularPolicy(logits))
    for step in range(train_cfg.max_steps + 1):
        policy = TabularPolicy(logits)
        loss = hdpo_loss(policy, task.ref, data, loss_cfg)
        grad = hdpo_loss_grad(policy, task.ref, data, loss_cfg)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            rows = np.flatnonzero(~np.all(np.isfinite(grad), axis=1))
            row = int(rows[0]) if rows.size else -1
            raise TrainingError(f"non-finite loss or gradient at step {step}, prompt row {row}")
        report.loss_curve.append(loss)
        gnorm = float(np.linalg.norm(grad))
        report.final_policy, report.final_grad_norm, report.steps_used = policy, gnorm, step
        if gnorm < train_cfg.grad_norm_tol:
            report.converged = True
            break
        if step == train_cfg.max_steps:
            break
        logits = logits - train_cfg.learning_rate * grad
    log.debug("train: alpha=%s steps=%d grad_norm=%.3g", loss_cfg.alpha, report.steps_used, report.final_grad_norm)
    return report


@dataclass(frozen=True)
class EntropyRow:
    alpha: float
    mean_entropy: float
    oracle_entropy: float
    tv_to_oracle: float
    steps: int
    grad_norm: float
    error: str | None = None


def mean_entropy(policy: TabularPolicy, prompt_weights) -> float:
    return float(np.asarray(prompt_weights) @ row_entropy(policy.probs))


def entropy_vs_alpha(
    task: SyntheticTask,
    alphas,
    beta: float = DEFAULT_TRAIN_BETA,
    train_cfg: TrainConfig = TrainConfig(),
    workers: int = 1,
) -> list[EntropyRow]:
    """Train on exact population data for each alpha; report mean policy entropy."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alphas must be non-empty")
    if alphas != sorted(alphas):
        raise ValueError("alphas must be sorted ascending")
    data = synthesize_dataset(task, "population")

    def one(alpha):
        try:
            cfg = LossConfig(alpha, beta)
            rep = train(task, data, cfg, train_cfg)
            oracle = optimal_policy(task.ref, task.reward, cfg).policy
            return EntropyRow(
                alpha,
                mean_entropy(rep.final_policy, task.prompt_weights),
                mean_entropy(oracle, task.prompt_weights),
                total_variation(rep.final_policy.probs, oracle.probs),
                rep.steps_used,
                rep.final_grad_norm,
            )
        except (ValueError, ArithmeticError) as exc:
            nan = math.nan
            return EntropyRow(alpha, nan, nan, nan, 0, nan, f"{type(exc).__name__}: {exc}")

    if workers == 1:
        return [one(a) for a in alphas]
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        return list(pool.map(one, alphas))


@dataclass(frozen=True)
class BetaScan:
    min_tv: float
    argmin_beta: float
    per_beta: list[tuple[float, float]]


def beta_equivalence_scan(task: SyntheticTask, alpha: float, beta: float, beta_grid) -> BetaScan:
    """How close can plain DPO (alpha = 1, any beta') get to the H-DPO optimum?

    Distances are the largest per-prompt total variation between closed-form
    optimal policies.
    """
    if alpha == 1:
        raise ValueError("alpha = 1 makes the scan vacuous")
    grid = [float(b) for b in beta_grid]
    if not grid or any(not b > 0 for b in grid):
        raise ValueError("beta_grid must be non-empty and positive")
    target = optimal_policy(task.ref, task.reward, LossConfig(alpha, beta)).policy.probs
    per_beta = []
    for b in grid:
        cand = optimal_policy(task.ref, task.reward, LossConfig(1.0, b)).policy.probs
        per_beta.append((b, total_variation(target, cand)))
    best = min(range(len(per_beta)), key=lambda i: (per_beta[i][1], i))
    return BetaScan(per_beta[best][1], per_beta[best][0], per_beta)


def beta_scan_task() -> SyntheticTask:
    """Single prompt, skewed reference, rewards ranked against the reference."""
    ref = TabularPolicy.from_probs([[0.9, 0.08, 0.02]])
    return SyntheticTask(np.array([[0.0, 0.03, 0.015]]), ref)


def uniform_reference_task(seed: int = 0, n_prompts: int = 3, n_completions: int = 6) -> SyntheticTask:
    rng = np.random.default_rng(seed)
    reward = rng.standard_normal((n_prompts, n_completions)) * 0.02
    return SyntheticTask(reward, TabularPolicy.uniform(n_prompts, n_completions))

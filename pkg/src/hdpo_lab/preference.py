"""Bradley-Terry preferences and the H-DPO loss over tabular softmax policies.

A policy is a (prompt x completion) logit table; completions are atomic.
The H-DPO margin of a pair (x, y_w, y_l) is

    alpha*beta*log(pi(y_w|x) / pi(y_l|x)) - beta*log(ref(y_w|x) / ref(y_l|x))

and the loss is the expected -log sigmoid(margin).  alpha = 1 recovers DPO.
All probability arithmetic happens on log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .distributions import SupportError, log_softmax, row_entropy


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta}")


class TabularPolicy:
    """Row-wise softmax over a logit table.

    A logit of -inf marks a completion the policy never emits.
    """

    def __init__(self, logits):
        z = np.array(logits, dtype=float)
        if z.ndim != 2 or z.size == 0:
            raise ValueError(f"logits must be a non-empty 2-D table, got shape {z.shape}")
        if np.isnan(z).any() or np.isposinf(z).any():
            raise ValueError("logits must not contain NaN or +inf")
        if np.isneginf(z).all(axis=1).any():
            raise ValueError("every row needs at least one finite logit")
        z.setflags(write=False)
        self.logits = z
        self.log_probs = log_softmax(z, axis=1)
        self.probs = np.exp(self.log_probs)

    @classmethod
    def from_probs(cls, probs) -> "TabularPolicy":
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(np.log(p))

    @classmethod
    def uniform(cls, n_prompts: int, n_completions: int) -> "TabularPolicy":
        return cls(np.zeros((n_prompts, n_completions)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def __repr__(self):
        return f"TabularPolicy(shape={self.shape})"


class PreferencePair(NamedTuple):
    x: int
    y_w: int
    y_l: int


@dataclass(frozen=True)
class PreferenceDataset:
    """Either sampled (x, y_w, y_l) rows or exact population weights.

    ``pairs`` is an (N, 3) int array in sampled mode.  ``weights[x, w, l]`` is
    the probability of observing (x, w preferred to l) in population mode.
    """

    mode: str
    pairs: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "sampled":
            p = np.asarray(self.pairs, dtype=np.int64)
            if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
                raise ValueError("sampled mode needs a non-empty (N, 3) array of pairs")
            if np.any(p < 0):
                raise ValueError("pair indices must be non-negative")
            if np.any(p[:, 1] == p[:, 2]):
                raise ValueError("a pair needs two distinct completions")
            object.__setattr__(self, "pairs", p)
        elif self.mode == "population":
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 3 or w.shape[1] != w.shape[2]:
                raise ValueError("population weights must have shape (prompts, C, C)")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("population weights must be finite and non-negative")
            if abs(math.fsum(w.ravel()) - 1.0) > 1e-12:
                raise ValueError("population weights must sum to 1")
            if np.any(np.diagonal(w, axis1=1, axis2=2) != 0):
                raise ValueError("w(x, y, y) must be zero")
            object.__setattr__(self, "weights", w)
        else:
            raise ValueError(f"unknown dataset mode {self.mode!r}")

    @classmethod
    def from_pairs(cls, pairs) -> "PreferenceDataset":
        return cls("sampled", pairs=np.asarray([tuple(p) for p in pairs], dtype=np.int64))

    @classmethod
    def from_weights(cls, weights) -> "PreferenceDataset":
        return cls("population", weights=weights)

    def empirical_weights(self, n_prompts: int, n_completions: int) -> np.ndarray:
        """Pair frequencies as a (prompts, C, C) table; the sampled loss is a sum against it."""
        self.check_shape(n_prompts, n_completions)
        if self.mode == "population":
            return self.weights
        key = (n_prompts, n_completions)
        cache = self.__dict__.setdefault("_empirical", {})
        if key not in cache:
            x, w, l = self.pairs.T
            flat = (x * n_completions + w) * n_completions + l
            counts = np.bincount(flat, minlength=n_prompts * n_completions**2)
            cache[key] = (counts / len(self.pairs)).reshape(n_prompts, n_completions, n_completions)
        return cache[key]

    def check_shape(self, n_prompts: int, n_completions: int):
        if self.mode == "population":
            if self.weights.shape != (n_prompts, n_completions, n_completions):
                raise ValueError(
                    f"weights shape {self.weights.shape} does not match policy "
                    f"({n_prompts}, {n_completions})"
                )
        else:
            p = self.pairs
            if p[:, 0].max() >= n_prompts or p[:, 1:].max() >= n_completions:
                raise ValueError("pair index out of range for the policy table")


@dataclass(frozen=True)
class OraclePolicy:
    policy: TabularPolicy
    log_z: np.ndarray


def _check_pair_tables(policy: TabularPolicy, ref: TabularPolicy):
    if policy.shape != ref.shape:
        raise ValueError(f"policy shape {policy.shape} != reference shape {ref.shape}")


def bt_prob(r, x: int, y1: int, y2: int) -> float:
    """P(y1 preferred to y2 | x) = sigmoid(r(x, y1) - r(x, y2))."""
    r = np.asarray(r, dtype=float)
    return float(expit(r[x, y1] - r[x, y2]))


def implicit_reward_margin(
    policy: TabularPolicy, ref: TabularPolicy, pair: PreferencePair, cfg: LossConfig
) -> float:
    _check_pair_tables(policy, ref)
    x, w, l = pair
    if w == l:
        raise ValueError("a pair needs two distinct completions")
    lr = ref.log_probs[x]
    if not (np.isfinite(lr[w]) and np.isfinite(lr[l])):
        raise SupportError(f"reference gives zero probability to a completion of pair {tuple(pair)}")
    lp = policy.log_probs[x]
    return cfg.alpha * cfg.beta * (lp[w] - lp[l]) - cfg.beta * (lr[w] - lr[l])


def _pair_margins(policy, ref, cfg):
    """Margin for every ordered (x, w, l); nan where a log-ratio is undefined."""
    lp, lr = policy.log_probs, ref.log_probs
    with np.errstate(invalid="ignore"):
        dp = lp[:, :, None] - lp[:, None, :]
        dr = lr[:, :, None] - lr[:, None, :]
    return cfg.alpha * cfg.beta * dp - cfg.beta * dr


def _margins_and_mass(policy, ref, data: PreferenceDataset, cfg: LossConfig):
    """Margins with the probability mass each one carries in the loss.

    Sampled pairs are first folded into their empirical frequency table, so
    both modes share one vectorised path.
    """
    _check_pair_tables(policy, ref)
    mass = data.empirical_weights(*policy.shape)
    active = mass > 0
    ok = np.isfinite(ref.log_probs)
    if np.any(active & ~(ok[:, :, None] & ok[:, None, :])):
        raise SupportError("reference gives zero probability to a completion with positive pair weight")
    return np.where(active, _pair_margins(policy, ref, cfg), 0.0), mass


def hdpo_loss(policy: TabularPolicy, ref: TabularPolicy, data: PreferenceDataset, cfg: LossConfig) -> float:
    m, mass = _margins_and_mass(policy, ref, data, cfg)
    # -log sigmoid(m) = log(1 + exp(-m))
    return float(np.sum(mass * np.logaddexp(0.0, -m)))


def dpo_loss(policy: TabularPolicy, ref: TabularPolicy, data: PreferenceDataset, beta: float) -> float:
    """Plain DPO: beta on both log-ratios."""
    _check_pair_tables(policy, ref)
    data.check_shape(*policy.shape)
    lp, lr = policy.log_probs, ref.log_probs
    if data.mode == "population":
        mass = data.weights
        ratio = (lp - lr)[:, :, None] - (lp - lr)[:, None, :]
        m = np.where(mass > 0, beta * ratio, 0.0)
    else:
        x, w, l = data.pairs.T
        m = beta * (lp[x, w] - lr[x, w]) - beta * (lp[x, l] - lr[x, l])
        mass = np.full(len(m), 1.0 / len(m))
    return float(np.sum(mass * np.logaddexp(0.0, -m)))


def hdpo_loss_grad(
    policy: TabularPolicy, ref: TabularPolicy, data: PreferenceDataset, cfg: LossConfig
) -> np.ndarray:
    """d loss / d logits, same shape as the logit table."""
    m, mass = _margins_and_mass(policy, ref, data, cfg)
    # d(-log sigmoid(m))/dm = -sigmoid(-m)
    coef = -mass * expit(-m) * (cfg.alpha * cfg.beta)
    # coef[x, w, l] pushes log pi(w|x) up and log pi(l|x) down
    g_logp = coef.sum(axis=2) - coef.sum(axis=1)
    # back through log-softmax: dlogp_j/dz_k = [j == k] - p_k
    return g_logp - policy.probs * g_logp.sum(axis=1, keepdims=True)


def optimal_policy(ref: TabularPolicy, r, cfg: LossConfig) -> OraclePolicy:
    """pi*(y|x) proportional to ref(y|x)^(1/alpha) * exp(r(x, y) / (alpha*beta))."""
    r = np.asarray(r, dtype=float)
    if r.shape != ref.shape:
        raise ValueError(f"reward shape {r.shape} != reference shape {ref.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    if not np.all(np.isfinite(ref.log_probs)):
        raise SupportError("optimal policy needs a full-support reference")
    z = (ref.log_probs + r / cfg.beta) / cfg.alpha
    log_z = logsumexp(z, axis=1)
    return OraclePolicy(TabularPolicy(z - log_z[:, None]), log_z)


def _prompt_weights(prompt_weights, n_prompts: int) -> np.ndarray:
    if prompt_weights is None:
        return np.full(n_prompts, 1.0 / n_prompts)
    pw = np.asarray(prompt_weights, dtype=float)
    if pw.shape != (n_prompts,) or np.any(pw < 0) or abs(math.fsum(pw) - 1.0) > 1e-12:
        raise ValueError("prompt_weights must be a distribution over prompts")
    return pw


def hdpo_objective(
    policy: TabularPolicy, ref: TabularPolicy, r, cfg: LossConfig, prompt_weights=None
) -> float:
    """E[r] + alpha*beta*H(pi) - beta*H(pi, ref), averaged over prompts."""
    _check_pair_tables(policy, ref)
    r = np.asarray(r, dtype=float)
    pw = _prompt_weights(prompt_weights, policy.shape[0])
    p = policy.probs
    lr = ref.log_probs
    if np.any((p > 0) & ~np.isfinite(lr)):
        raise SupportError("policy puts mass where the reference has none")
    safe_lr = np.where(p > 0, lr, 0.0)
    safe_r = np.where(p > 0, r, 0.0)
    expected_r = (p * safe_r).sum(axis=1)
    cross = -(p * safe_lr).sum(axis=1)
    per_prompt = expected_r + cfg.alpha * cfg.beta * row_entropy(p) - cfg.beta * cross
    return float(pw @ per_prompt)


def total_variation(p, q) -> float:
    """Largest per-row total-variation distance between two probability tables."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return float(0.5 * np.abs(p - q).sum(axis=1).max())

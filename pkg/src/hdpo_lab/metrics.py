"""Coverage and diversity metrics, plus a first-order toy LM to feed them.

BLEU settings used by ``self_bleu``: n-gram orders 1-4 with uniform weights,
clipped counts against the sibling responses, brevity penalty against the
closest reference length (shorter wins ties), and add-one smoothing
((m + 1) / (t + 1)) for an order >= 2 whose clipped match count is zero.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .distributions import log_softmax

BLEU_MAX_ORDER = 4


@dataclass(frozen=True)
class Generation:
    tokens: tuple[int, ...]
    log_prob: float

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("a generation must contain at least one token")
        if not self.log_prob <= 0:
            raise ValueError(f"log_prob must be <= 0, got {self.log_prob}")


@dataclass(frozen=True)
class GenerationSet:
    """Responses grouped by prompt."""

    prompts: tuple[tuple[Generation, ...], ...]

    def __post_init__(self):
        groups = tuple(
            tuple(g if isinstance(g, Generation) else Generation(*g) for g in group)
            for group in self.prompts
        )
        object.__setattr__(self, "prompts", groups)

    @classmethod
    def from_tokens(cls, groups: Iterable[Iterable[Sequence[int]]], log_prob: float = 0.0) -> "GenerationSet":
        """Wrap bare token lists (all with the same log-probability)."""
        return cls(tuple(tuple(Generation(tuple(t), log_prob) for t in g) for g in groups))

    def responses(self) -> list[Generation]:
        return [g for group in self.prompts for g in group]


@dataclass(frozen=True)
class PassKInput:
    n: int
    c: int
    k: int

    def __post_init__(self):
        if not 0 <= self.c <= self.n:
            raise ValueError(f"need 0 <= c <= n, got c={self.c}, n={self.n}")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")


EXACT_PASS_AT_K_MAX_N = 10_000


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n - c, k) / C(n, k).

    Up to ``EXACT_PASS_AT_K_MAX_N`` samples the ratio is formed from exact
    integer binomials, so the result is the correctly rounded value; beyond
    that a running product avoids huge integers.
    """
    PassKInput(n, c, k)
    if n - c < k:
        return 1.0
    if n <= EXACT_PASS_AT_K_MAX_N:
        total = math.comb(n, k)
        return (total - math.comb(n - c, k)) / total
    prod = 1.0
    for i in range(k):
        prod *= (n - c - i) / (n - i)
    return 1.0 - prod


def coverage_report(per_problem: Sequence[tuple[int, int]], ks: Sequence[int]) -> list[tuple[int, float]]:
    """Mean pass@k over problems for every k in ``ks``."""
    if not per_problem:
        raise ValueError("no problems given")
    out = []
    for k in ks:
        vals = []
        for i, (n, c) in enumerate(per_problem):
            if k > n:
                raise ValueError(f"k={k} exceeds n={n} for problem {i}")
            vals.append(pass_at_k(n, c, k))
        out.append((int(k), math.fsum(vals) / len(vals)))
    return out


def normalized_entropy(gs: GenerationSet) -> float:
    """Mean over all responses of -log p(response) / len(response)."""
    rs = gs.responses()
    if not rs:
        raise ValueError("generation set is empty")
    return math.fsum(-g.log_prob / len(g.tokens) for g in rs) / len(rs)


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(hypothesis: Sequence[int], references: Sequence[Sequence[int]]) -> float:
    if not references:
        raise ValueError("BLEU needs at least one reference")
    log_p = 0.0
    for n in range(1, BLEU_MAX_ORDER + 1):
        hyp = _ngrams(hypothesis, n)
        best_ref: Counter = Counter()
        for ref in references:
            best_ref |= _ngrams(ref, n)
        matched = sum(min(c, best_ref[g]) for g, c in hyp.items())
        total = max(len(hypothesis) - n + 1, 0)
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        elif matched == 0:
            p = 1.0 / (total + 1)
        else:
            p = matched / total
        log_p += math.log(p) / BLEU_MAX_ORDER
    c = len(hypothesis)
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def _leave_one_out_bleu(toks: list[tuple[int, ...]]) -> list[float]:
    """sentence_bleu(toks[i], all others) for every i in O(total n-grams).

    Clipping uses the largest count of an n-gram among the *other* responses,
    which is the overall maximum unless response i alone attains it.
    """
    m = len(toks)
    counts = [[_ngrams(t, n) for t in toks] for n in range(1, BLEU_MAX_ORDER + 1)]
    log_p = np.zeros(m)
    dead = np.zeros(m, dtype=bool)
    for n, per_resp in enumerate(counts, start=1):
        top: dict[tuple, list] = {}  # gram -> [best, owner, second]
        for i, cnt in enumerate(per_resp):
            for g, c in cnt.items():
                slot = top.get(g)
                if slot is None:
                    top[g] = [c, i, 0]
                elif c > slot[0]:
                    slot[2], slot[0], slot[1] = slot[0], c, i
                elif c > slot[2]:
                    slot[2] = c
        for i, cnt in enumerate(per_resp):
            matched = 0
            for g, c in cnt.items():
                best, owner, second = top[g]
                matched += min(c, second if owner == i else best)
            total = max(len(toks[i]) - n + 1, 0)
            if n == 1:
                if matched == 0:
                    dead[i] = True
                    continue
                p = matched / total
            elif matched == 0:
                p = 1.0 / (total + 1)
            else:
                p = matched / total
            log_p[i] += math.log(p) / BLEU_MAX_ORDER
    lengths = np.array([len(t) for t in toks])
    out = []
    for i in range(m):
        if dead[i]:
            out.append(0.0)
            continue
        c = lengths[i]
        others = np.delete(lengths, i)
        # closest reference length, shorter on ties
        r = int(others[np.lexsort((others, np.abs(others - c)))[0]])
        bp = 1.0 if c > r else math.exp(1.0 - r / c)
        out.append(bp * math.exp(log_p[i]))
    return out


def self_bleu(gs: GenerationSet) -> float:
    """Mean BLEU of each response against its same-prompt siblings; higher = less diverse."""
    scores = []
    skipped = 0
    for group in gs.prompts:
        if len(group) < 2:
            skipped += 1
            continue
        scores.extend(_leave_one_out_bleu([g.tokens for g in group]))
    if skipped:
        warnings.warn(f"self_bleu: skipped {skipped} prompt(s) with fewer than 2 responses", stacklevel=2)
    if not scores:
        raise ValueError("self_bleu needs a prompt with at least 2 responses")
    return math.fsum(scores) / len(scores)


def distinct_n(gs: GenerationSet, n: int) -> float:
    """Distinct n-grams over total n-gram occurrences, pooled over all responses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    total = 0
    for g in gs.responses():
        grams = _ngrams(g.tokens, n)
        seen.update(grams)
        total += sum(grams.values())
    if total == 0:
        raise ValueError(f"no response has {n} or more tokens")
    return len(seen) / total


@dataclass(frozen=True)
class ToyLM:
    """First-order Markov LM.

    ``transition_logits`` is (V + 1) x (V + 1): row V is the start state,
    column V is the stop symbol.  The start row never emits stop, so every
    sequence has at least one token.
    """

    vocab_size: int
    transition_logits: np.ndarray

    def __post_init__(self):
        V = self.vocab_size
        z = np.array(self.transition_logits, dtype=float)
        if V < 2:
            raise ValueError("vocab_size must be at least 2")
        if z.shape != (V + 1, V + 1):
            raise ValueError(f"transition_logits must be {(V + 1, V + 1)}, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("transition logits must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "transition_logits", z)

    @property
    def start(self) -> int:
        return self.vocab_size

    @property
    def stop(self) -> int:
        return self.vocab_size

    def log_probs(self, T: float) -> np.ndarray:
        """Per-state next-symbol log-probabilities at temperature T."""
        if not T > 0:
            raise ValueError(f"temperature must be positive, got {T}")
        z = self.transition_logits / T
        z = z.copy()
        z[self.start, self.stop] = -np.inf
        return log_softmax(z, axis=1)

    def sequence_log_prob(self, tokens: Sequence[int], T: float, stopped: bool = True) -> float:
        lp = self.log_probs(T)
        state, total = self.start, 0.0
        for t in tokens:
            total += lp[state, t]
            state = t
        if stopped:
            total += lp[state, self.stop]
        return float(total)


def random_toy_lm(vocab_size: int = 8, seed: int = 0, scale: float = 2.0, stop_bias: float = -1.0) -> ToyLM:
    rng = np.random.default_rng(seed)
    z = scale * rng.standard_normal((vocab_size + 1, vocab_size + 1))
    z[:, vocab_size] += stop_bias
    return ToyLM(vocab_size, z)


def sample_toy_lm(lm: ToyLM, T: float, n_samples: int, max_len: int, seed: int) -> GenerationSet:
    """Ancestral sampling at temperature T; one prompt group of ``n_samples``.

    Recorded log-probabilities are exact under the temperature-T model and
    include the stop transition when one was emitted.
    """
    if n_samples < 1 or max_len < 1:
        raise ValueError("n_samples and max_len must be >= 1")
    lp = lm.log_probs(T)
    cdf = np.cumsum(np.exp(lp), axis=1)
    cdf[:, -1] = 1.0
    rng = np.random.default_rng(seed)
    state = np.full(n_samples, lm.start)
    logp = np.zeros(n_samples)
    alive = np.ones(n_samples, dtype=bool)
    tokens = np.full((n_samples, max_len), -1)
    for t in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        u = rng.random(idx.size)
        rows = cdf[state[idx]]
        nxt = (rows < u[:, None]).sum(axis=1)
        logp[idx] += lp[state[idx], nxt]
        stopped = nxt == lm.stop
        alive[idx[stopped]] = False
        go = idx[~stopped]
        tokens[go, t] = nxt[~stopped]
        state[go] = nxt[~stopped]
    gens = tuple(
        Generation(tuple(int(v) for v in row[row >= 0]), min(float(lpv), 0.0))
        for row, lpv in zip(tokens, logp)
    )
    return GenerationSet((gens,))


def greedy_decode(lm: ToyLM, max_len: int) -> tuple[int, ...]:
    lp = lm.log_probs(1.0)
    state, out = lm.start, []
    for _ in range(max_len):
        nxt = int(np.argmax(lp[state]))
        if nxt == lm.stop:
            break
        out.append(nxt)
        state = nxt
    return tuple(out)

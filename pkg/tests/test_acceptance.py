"""Acceptance suite: one group of tests per criterion, each tagged with ``criterion``.

The end-of-run summary (see conftest.py) prints a PASS/FAIL line per criterion.
"""

import json
import math
import time

import numpy as np
import pytest

from hdpo_lab.cli import main
from hdpo_lab.distributions import (
    GaussianMixtureSpec,
    GaussianParams,
    categorical_functionals,
    d_alpha_continuous,
    gauss_kl,
)
from hdpo_lab.gmm_fit import FitConfig, fit_gaussian_dalpha, standard_config
from hdpo_lab.metrics import (
    GenerationSet,
    distinct_n,
    normalized_entropy,
    pass_at_k,
    random_toy_lm,
    sample_toy_lm,
    self_bleu,
)
from hdpo_lab.preference import (
    LossConfig,
    PreferenceDataset,
    TabularPolicy,
    dpo_loss,
    hdpo_loss,
    hdpo_loss_grad,
    optimal_policy,
    total_variation,
)
from hdpo_lab.trainer import (
    DEFAULT_TRAIN_BETA,
    beta_equivalence_scan,
    beta_scan_task,
    default_task,
    entropy_vs_alpha,
    synthesize_dataset,
    train,
    uniform_reference_task,
)

from oracles import brute_force_loss, central_difference, dense_fit_oracle, pass_at_k_enumerated

GAP4 = standard_config("2comp-gap4")


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# -- 1: mixture fitting -----------------------------------------------------------------


@pytest.fixture(scope="module")
def gap4_fits():
    out = {}
    for alpha in (0.6, 1.0):
        t0 = time.perf_counter()
        fit = fit_gaussian_dalpha(GAP4, FitConfig.default_for(GAP4, alpha))
        out[alpha] = (fit, time.perf_counter() - t0)
    return out


C1 = pytest.mark.criterion(1, "mixture fit: covering at alpha=1, seeking at alpha=0.6, dense-oracle agreement, < 10 s")


@C1
def test_c1_mode_covering(gap4_fits):
    fit, _ = gap4_fits[1.0]
    g = fit.g_hat
    report(1, 0 < g.mu < 4 and g.sigma > 1, f"alpha=1: mu={g.mu:.4f} sigma={g.sigma:.4f}")


@C1
def test_c1_mode_seeking(gap4_fits):
    fit, _ = gap4_fits[0.6]
    g = fit.g_hat
    gap = float(np.min(np.abs(GAP4.mus - g.mu)))
    report(1, gap < 0.5 and g.sigma < 1, f"alpha=0.6: mu={g.mu:.4f} sigma={g.sigma:.4f}")


@C1
@pytest.mark.parametrize("alpha", [0.6, 1.0])
def test_c1_matches_dense_oracle(gap4_fits, alpha):
    fit, _ = gap4_fits[alpha]
    value, _, _ = dense_fit_oracle([0.5, 0.5], [0.0, 4.0], [1.0, 0.8], alpha)
    err = abs(fit.d_alpha_value - value)
    report(1, err < 1e-6, f"alpha={alpha}: |D_fit - D_oracle| = {err:.2e}")


@C1
def test_c1_runtime(gap4_fits):
    worst = max(t for _, t in gap4_fits.values())
    report(1, worst < 10.0, f"slowest fit {worst:.2f} s")


# -- 2: D_alpha identities ------------------------------------------------------------------


@pytest.mark.criterion(2, "D_alpha identities: KL at alpha=1 within 1e-9, (1-alpha)H(p) within 1e-12")
def test_c2_continuous_kl():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(30):
        m1, m2 = rng.uniform(-3, 3, 2)
        s1, s2 = rng.uniform(0.2, 3, 2)
        g = GaussianParams(float(m1), float(s1))
        target = GaussianMixtureSpec.from_arrays([1.0], [m2], [s2])
        worst = max(worst, abs(d_alpha_continuous(g, target, 1.0) - gauss_kl(g, GaussianParams(float(m2), float(s2)))))
    report(2, worst < 1e-9, f"max |D_1 - KL| = {worst:.2e} over 30 pairs")


@pytest.mark.criterion(2, "D_alpha identities: KL at alpha=1 within 1e-9, (1-alpha)H(p) within 1e-12")
def test_c2_categorical_self():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        p = rng.dirichlet(np.full(int(rng.integers(2, 12)), 0.7))
        alpha = float(rng.uniform(0, 2))
        h = -math.fsum(v * math.log(v) for v in p if v > 0)
        worst = max(worst, abs(categorical_functionals(p, p, alpha).d_alpha - (1 - alpha) * h))
    report(2, worst < 1e-12, f"max |D_alpha(p,p) - (1-alpha)H(p)| = {worst:.2e}")


# -- 3: loss reduction ---------------------------------------------------------------------


def random_instance(rng):
    P, C = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    pol = TabularPolicy(rng.normal(size=(P, C)) * rng.uniform(0.1, 3))
    ref = TabularPolicy(rng.normal(size=(P, C)) * rng.uniform(0.1, 3))
    w = rng.random((P, C, C))
    w[:, np.arange(C), np.arange(C)] = 0
    w /= w.sum()
    return pol, ref, w


@pytest.mark.criterion(3, "loss at alpha=1 equals the DPO loss (100 instances, 1e-12); ln 2 at the reference")
def test_c3_alpha_one_is_dpo():
    rng = np.random.default_rng(30)
    worst = 0.0
    for _ in range(100):
        pol, ref, w = random_instance(rng)
        beta = float(rng.uniform(0.01, 2))
        data = PreferenceDataset.from_weights(w)
        h = hdpo_loss(pol, ref, data, LossConfig(1.0, beta))
        worst = max(
            worst,
            abs(h - dpo_loss(pol, ref, data, beta)),
            abs(h - brute_force_loss(pol.logits, ref.logits, w, 1.0, beta)),
        )
    report(3, worst < 1e-12, f"max |H-DPO - DPO| = {worst:.2e}")


@pytest.mark.criterion(3, "loss at alpha=1 equals the DPO loss (100 instances, 1e-12); ln 2 at the reference")
def test_c3_ln2_at_reference():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        _, ref, w = random_instance(rng)
        worst = max(worst, abs(hdpo_loss(ref, ref, PreferenceDataset.from_weights(w), LossConfig(1.0, 0.5)) - math.log(2)))
    report(3, worst < 1e-12, f"max |L(ref) - ln 2| = {worst:.2e}")


# -- 4: gradient oracle ------------------------------------------------------------------------


@pytest.mark.criterion(4, "analytic gradient vs central differences, 50 instances, rel err < 1e-5, < 5 s")
def test_c4_gradient_finite_differences():
    rng = np.random.default_rng(40)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        pol, ref, w = random_instance(rng)
        data = PreferenceDataset.from_weights(w)
        cfg = LossConfig(float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.05, 2)))
        g = hdpo_loss_grad(pol, ref, data, cfg)
        fd = central_difference(lambda z: hdpo_loss(TabularPolicy(z), ref, data, cfg), pol.logits.copy(), h=1e-5)
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-300)))
    elapsed = time.perf_counter() - t0
    report(4, worst < 1e-5 and elapsed < 5.0, f"max rel err {worst:.2e}, {elapsed:.2f} s")


# -- 5: closed-form recovery --------------------------------------------------------------------


@pytest.mark.criterion(5, "population training recovers the closed-form policy (TV 1e-3, grad at oracle < 1e-8, < 30 s)")
@pytest.mark.parametrize("alpha", [0.8, 0.9, 1.0, 1.1, 1.2])
def test_c5_recovery(alpha):
    task = default_task()
    cfg = LossConfig(alpha, DEFAULT_TRAIN_BETA)
    data = synthesize_dataset(task, "population")
    t0 = time.perf_counter()
    rep = train(task, data, cfg)
    elapsed = time.perf_counter() - t0
    oracle = optimal_policy(task.ref, task.reward, cfg).policy
    row_tv = 0.5 * np.abs(rep.final_policy.probs - oracle.probs).sum(axis=1)
    g_norm = float(np.linalg.norm(hdpo_loss_grad(oracle, task.ref, data, cfg)))
    ok = row_tv.max() < 1e-3 and g_norm < 1e-8 and elapsed < 30.0
    report(5, ok, f"alpha={alpha}: max row TV {row_tv.max():.2e}, |grad(oracle)| {g_norm:.2e}, {elapsed:.2f} s")


# -- 6: entropy control ---------------------------------------------------------------------------

ALPHAS = [0.8, 0.9, 0.95, 1.0, 1.1, 1.2]


@pytest.mark.criterion(6, "mean entropy strictly increases in alpha; oracle argmax is alpha-invariant")
def test_c6_entropy_increasing():
    rows = entropy_vs_alpha(default_task(), ALPHAS)
    e = [r.mean_entropy for r in rows]
    ok = all(r.error is None for r in rows) and all(b > a for a, b in zip(e, e[1:]))
    report(6, ok, "entropies " + ", ".join(f"{v:.4f}" for v in e))


@pytest.mark.criterion(6, "mean entropy strictly increases in alpha; oracle argmax is alpha-invariant")
def test_c6_argmax_invariant():
    task = default_task()
    argmaxes = {
        tuple(np.argmax(optimal_policy(task.ref, task.reward, LossConfig(a, DEFAULT_TRAIN_BETA)).policy.probs, axis=1))
        for a in ALPHAS
    }
    report(6, len(argmaxes) == 1, f"argmax rows {sorted(argmaxes)}")


# -- 7: beta equivalence ---------------------------------------------------------------------------

C7 = pytest.mark.criterion(7, "uniform reference: min TV < 1e-9 at alpha*beta; designated instance: min TV > 0.01")


@C7
def test_c7_uniform_reference():
    alpha, beta = 0.9, 0.01
    grid = sorted(set(np.linspace(0.001, 0.1, 200).tolist()) | {alpha * beta})
    res = beta_equivalence_scan(uniform_reference_task(), alpha, beta, grid)
    ok = res.min_tv < 1e-9 and math.isclose(res.argmin_beta, alpha * beta, rel_tol=1e-12)
    report(7, ok, f"min TV {res.min_tv:.2e} at beta'={res.argmin_beta:.6g}")


@C7
def test_c7_designated_instance():
    res = beta_equivalence_scan(beta_scan_task(), 0.9, 0.01, np.linspace(0.001, 0.1, 200))
    report(7, res.min_tv > 0.01 and len(res.per_beta) == 200, f"min TV {res.min_tv:.4f} at beta'={res.argmin_beta:.6g}")


# -- 8: pass@k ---------------------------------------------------------------------------------------


@pytest.mark.criterion(8, "pass@k equals subset enumeration for n <= 8; (5,2,2) -> 0.7; monotone in k and c")
def test_c8_pass_at_k():
    cases, worst = 0, 0.0
    table = {}
    for n in range(1, 9):
        for c in range(n + 1):
            for k in range(1, n + 1):
                table[n, c, k] = pass_at_k(n, c, k)
                worst = max(worst, abs(table[n, c, k] - pass_at_k_enumerated(n, c, k)))
                cases += 1
    mono_k = all(table[n, c, k] <= table[n, c, k + 1] for n, c, k in table if k < n)
    mono_c = all(table[n, c, k] <= table[n, c + 1, k] for n, c, k in table if c < n)
    ok = worst == 0.0 and mono_k and mono_c and pass_at_k(5, 2, 2) == pytest.approx(0.7, abs=1e-15)
    report(8, ok, f"{cases} cases, max deviation {worst:.1e}")


# -- 9: diversity metrics ------------------------------------------------------------------------------


@pytest.mark.criterion(9, "identical corpus: Self-BLEU 1, Distinct-1 unique/total; entropy nondecreasing in T; < 30 s")
def test_c9_diversity_sanity():
    t0 = time.perf_counter()
    resp = [5, 1, 5, 2, 3]
    gs = GenerationSet.from_tokens([[resp] * 6])
    sb, d1 = self_bleu(gs), distinct_n(gs, 1)
    ok_corpus = sb == pytest.approx(1.0, abs=1e-15) and d1 == pytest.approx(len(set(resp)) / (6 * len(resp)), abs=1e-15)
    curves = []
    for seed in range(3):
        lm = random_toy_lm(seed=seed)
        curves.append([normalized_entropy(sample_toy_lm(lm, T, 1000, 20, seed)) for T in (0.25, 0.5, 0.75, 1.0)])
    ok_curves = all(all(b >= a for a, b in zip(c, c[1:])) for c in curves)
    elapsed = time.perf_counter() - t0
    report(9, ok_corpus and ok_curves and elapsed < 30.0, f"self-BLEU {sb}, distinct-1 {d1:.4f}, {elapsed:.2f} s")


# -- 10: determinism ---------------------------------------------------------------------------------------

CONFIGS = {
    "gmm-fit": {"mu_count": 60, "sigma_count": 30},
    "gmm-heatmap": {"mu_count": 60, "sigma_count": 30, "heat_mu_count": 30, "heat_sigma_count": 20},
    "train": {"mode": "sampled", "n_pairs": 2000, "max_steps": 500},
    "entropy-sweep": {},
    "beta-scan": {},
    "metrics-demo": {"n_samples": 60, "n_problems": 5, "ks": [1, 5, 10]},
}


@pytest.mark.criterion(10, "CLI re-runs with identical config and seed give byte-identical CSVs")
@pytest.mark.parametrize("experiment", sorted(CONFIGS))
def test_c10_cli_determinism(tmp_path, experiment):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"experiment": experiment, "parameters": CONFIGS[experiment], "seed": 2024}))
    digests = []
    for name, threads in (("a", "1"), ("b", "4")):
        assert main(["run", str(cfg), "--output-dir", str(tmp_path / name), "--threads", threads]) == 0
        digests.append({f.name: f.read_bytes() for f in (tmp_path / name).glob("*.csv")})
    ok = bool(digests[0]) and digests[0] == digests[1]
    report(10, ok, f"{experiment}: {len(digests[0])} CSV files compared")

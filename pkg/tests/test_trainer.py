import math

import numpy as np
import pytest

from hdpo_lab.preference import (
    LossConfig,
    PreferenceDataset,
    TabularPolicy,
    implicit_reward_margin,
    optimal_policy,
    total_variation,
)
from hdpo_lab.trainer import (
    DEFAULT_TRAIN_BETA,
    SyntheticTask,
    TrainConfig,
    TrainingError,
    beta_equivalence_scan,
    beta_scan_task,
    default_task,
    entropy_vs_alpha,
    synthesize_dataset,
    train,
    uniform_reference_task,
)

ALPHAS = [0.8, 0.9, 0.95, 1.0, 1.1, 1.2]


def test_task_invariants():
    with pytest.raises(ValueError):
        SyntheticTask(np.zeros((2, 3)), TabularPolicy.uniform(2, 4))
    with pytest.raises(ValueError):
        SyntheticTask(np.zeros((1, 2)), TabularPolicy.from_probs([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        SyntheticTask(np.zeros((2, 3)), TabularPolicy.uniform(2, 3), prompt_weights=[0.7, 0.7])
    t = default_task()
    assert (t.n_prompts, t.n_completions) == (3, 6)
    np.testing.assert_array_equal(t.prompt_weights, np.full(3, 1 / 3))


def test_train_config_invariants():
    for kw in ({"learning_rate": 0}, {"max_steps": 0}, {"grad_norm_tol": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# -- dataset synthesis ----------------------------------------------------------------


def test_population_constant_reward_symmetric():
    t = SyntheticTask(np.full((2, 4), 0.3), TabularPolicy(np.random.default_rng(0).normal(size=(2, 4))))
    w = synthesize_dataset(t, "population").weights
    np.testing.assert_allclose(w, np.swapaxes(w, 1, 2), atol=0)
    assert math.fsum(w.ravel()) == pytest.approx(1.0, abs=1e-12)


def test_population_weights_follow_bt():
    t = default_task(seed=4)
    w = synthesize_dataset(t, "population").weights
    r = t.reward
    for x in range(3):
        for a in range(6):
            for b in range(6):
                if a != b:
                    odds = w[x, a, b] / w[x, b, a]
                    assert odds == pytest.approx(math.exp(r[x, a] - r[x, b]), rel=1e-12)


def test_sampled_winner_frequency():
    r = np.array([[0.0, math.log(3)]])
    t = SyntheticTask(r, TabularPolicy.uniform(1, 2))
    d = synthesize_dataset(t, "sampled", n_pairs=100_000, seed=1)
    freq = np.mean(d.pairs[:, 1] == 1)
    assert abs(freq - 0.75) < 0.01


def test_sampled_deterministic():
    t = default_task(seed=2)
    a = synthesize_dataset(t, "sampled", n_pairs=500, seed=9)
    b = synthesize_dataset(t, "sampled", n_pairs=500, seed=9)
    assert a.pairs.tobytes() == b.pairs.tobytes()
    assert np.all(a.pairs[:, 1] != a.pairs[:, 2])


def test_sampled_requires_pairs():
    with pytest.raises(ValueError):
        synthesize_dataset(default_task(), "sampled")
    with pytest.raises(ValueError):
        synthesize_dataset(default_task(), "streaming")


# -- training -------------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [1.0, 0.8])
def test_training_recovers_oracle(alpha):
    t = default_task(seed=0)
    cfg = LossConfig(alpha, DEFAULT_TRAIN_BETA)
    rep = train(t, synthesize_dataset(t, "population"), cfg)
    assert rep.converged and rep.final_grad_norm < 1e-8
    assert total_variation(rep.final_policy.probs, optimal_policy(t.ref, t.reward, cfg).policy.probs) < 1e-3


def test_loss_curve_nonincreasing():
    t = default_task(seed=1)
    rep = train(t, synthesize_dataset(t, "population"), LossConfig(0.9, 1.0))
    c = np.array(rep.loss_curve)
    assert len(c) == rep.steps_used + 1
    assert np.all(np.diff(c) <= 1e-15)


def test_one_directional_data_diverges():
    t = SyntheticTask(np.zeros((1, 3)), TabularPolicy.uniform(1, 3))
    data = PreferenceDataset.from_pairs([(0, 0, 1)])
    cfg = LossConfig(1.0, 1.0)
    margins = []
    for steps in (10, 50, 200):
        rep = train(t, data, cfg, TrainConfig(max_steps=steps))
        assert not rep.converged and rep.steps_used == steps
        margins.append(implicit_reward_margin(rep.final_policy, t.ref, (0, 0, 1), cfg))
    assert margins[0] < margins[1] < margins[2]


def test_non_finite_training_reports_step(monkeypatch):
    import hdpo_lab.trainer as trainer_mod

    real = trainer_mod.hdpo_loss_grad
    calls = []

    def poisoned(policy, *args):
        g = real(policy, *args)
        calls.append(1)
        if len(calls) == 4:
            g[1, 2] = np.nan
        return g

    monkeypatch.setattr(trainer_mod, "hdpo_loss_grad", poisoned)
    t = default_task()
    with pytest.raises(TrainingError, match="step 3, prompt row 1"):
        train(t, synthesize_dataset(t, "population"), LossConfig(1.0, 1.0))


def test_sampled_training_improves_with_data():
    wins = 0
    for seed in range(5):
        t = default_task(seed=seed)
        cfg = LossConfig(1.0, 1.0)
        oracle = optimal_policy(t.ref, t.reward, cfg).policy.probs
        tvs = []
        for n in (1_000, 100_000):
            d = synthesize_dataset(t, "sampled", n_pairs=n, seed=seed)
            rep = train(t, d, cfg, TrainConfig(max_steps=3000, grad_norm_tol=1e-6))
            tvs.append(total_variation(rep.final_policy.probs, oracle))
        wins += tvs[1] < tvs[0]
    assert wins >= 3


@pytest.mark.parametrize("seed", range(3))
def test_randomised_tasks_converge(seed):
    rng = np.random.default_rng(100 + seed)
    P, C = int(rng.integers(1, 6)), int(rng.integers(2, 9))
    t = default_task(seed=seed, n_prompts=P, n_completions=C)
    alpha = float(rng.choice([0.8, 0.9, 1.0, 1.1, 1.2]))
    cfg = LossConfig(alpha, 1.0)
    rep = train(t, synthesize_dataset(t, "population"), cfg)
    assert rep.final_grad_norm < 1e-8
    assert total_variation(rep.final_policy.probs, optimal_policy(t.ref, t.reward, cfg).policy.probs) < 1e-3


# -- entropy sweep -------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    return entropy_vs_alpha(default_task(), ALPHAS, workers=0)


def test_entropy_strictly_increasing(sweep):
    e = [r.mean_entropy for r in sweep]
    assert all(b > a for a, b in zip(e, e[1:]))
    assert [r.alpha for r in sweep] == ALPHAS


def test_entropy_matches_oracle(sweep):
    for r in sweep:
        assert r.error is None
        assert abs(r.mean_entropy - r.oracle_entropy) < 2e-3


def test_single_alpha_sweep():
    assert len(entropy_vs_alpha(default_task(), [1.0])) == 1


def test_sweep_requires_sorted():
    with pytest.raises(ValueError):
        entropy_vs_alpha(default_task(), [1.0, 0.9])


def test_sweep_records_failures():
    rows = entropy_vs_alpha(default_task(), [-1.0, 1.0])
    assert rows[0].error is not None and math.isnan(rows[0].mean_entropy)
    assert rows[1].error is None


# -- beta scan -------------------------------------------------------------------------


def test_uniform_reference_collapses():
    t = uniform_reference_task(seed=3)
    alpha, beta = 0.9, 0.01
    grid = sorted(set(np.linspace(0.001, 0.1, 200).tolist()) | {alpha * beta})
    res = beta_equivalence_scan(t, alpha, beta, grid)
    assert res.min_tv < 1e-9
    assert res.argmin_beta == pytest.approx(alpha * beta)


def test_designated_instance_not_equivalent():
    res = beta_equivalence_scan(beta_scan_task(), 0.9, 0.01, np.linspace(0.001, 0.1, 200))
    assert res.min_tv > 0.01
    assert len(res.per_beta) == 200


def test_beta_scan_preconditions():
    with pytest.raises(ValueError):
        beta_equivalence_scan(beta_scan_task(), 1.0, 0.01, [0.01])
    with pytest.raises(ValueError):
        beta_equivalence_scan(beta_scan_task(), 0.9, 0.01, [])
    with pytest.raises(ValueError):
        beta_equivalence_scan(beta_scan_task(), 0.9, 0.01, [0.0, 0.01])

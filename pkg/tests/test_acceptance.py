"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The desk-scale meta-learning
criterion dominates the runtime (several minutes on one core).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from ccgp.augmented import GibbsState, f_conditional, joint_log_density, mean_field, one_hot
from ccgp.checks import (
    bundle_from_gram,
    elbo_trace,
    gauss_hermite_log_evidence,
    gibbs_vs_mean_field,
    positive_logits,
    random_episode_bundle,
    separated_negative_logits,
    tiny_suite,
)
from ccgp.cli import main
from ccgp.elbo import LossConfig, elbo_terms, episode_grad
from ccgp.kernels import KERNEL_KINDS, HyperParams, KernelSpec, build_bundle
from ccgp.math_core import logistic_softmax, pg_log_density, pg_mean, pg_sample, pg_var, sigmoid, softmax_temp
from ccgp.meta import TaskGenerator, TaskGeneratorConfig, TrainConfig, train
from ccgp.predict import EvalConfig, calibration, evaluate


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, seconds):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s)")
    return emit


def test_criterion_01_vanishing_temperature_limits(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_neg = worst_pos = 0.0
    for _ in range(200):
        f = separated_negative_logits(rng, int(rng.integers(2, 8)))
        target = np.eye(f.size)[np.argmax(f)]
        worst_neg = max(worst_neg, np.max(np.abs(logistic_softmax(f, 0.001) - target)))
    for _ in range(200):
        f = positive_logits(rng, int(rng.integers(2, 8)))
        target = (f > 0) / np.sum(f > 0)
        worst_pos = max(worst_pos, np.max(np.abs(logistic_softmax(f, 0.001) - target)))
    dt = time.perf_counter() - t0
    ok = worst_neg < 1e-4 and worst_pos < 1e-4 and dt < 1.0
    report(1, ok, f"all-negative {worst_neg:.1e}, >=2 positive {worst_pos:.1e} (limit 1e-4)", dt)
    assert ok


def test_criterion_02_negative_shift_limit(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    err20 = err5 = 0.0
    for _ in range(200):
        f = rng.uniform(-1.0, 1.0, int(rng.integers(2, 8)))
        for tau in (0.2, 0.5, 1.0):
            s = softmax_temp(f, tau)
            err20 = max(err20, np.max(np.abs(logistic_softmax(f - 20.0, tau) - s)))
            err5 = max(err5, np.max(np.abs(logistic_softmax(f - 5.0, tau) - s)))
    dt = time.perf_counter() - t0
    ok = err20 < 1e-6 and dt < 1.0
    report(2, ok, f"shift 20: {err20:.1e} (limit 1e-6); shift 5: {err5:.1e} (logged)", dt)
    assert ok


def test_criterion_03_cavi_monotone(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    worst = 0.0
    for i in range(100):
        Y, bundle, tau = random_episode_bundle(rng, 25, 5, kind=KERNEL_KINDS[i % len(KERNEL_KINDS)])
        worst = min(worst, float(np.min(np.diff(elbo_trace(Y, bundle, tau, 20)))))
    dt = time.perf_counter() - t0
    ok = worst >= -1e-8 and dt < 60.0
    report(3, ok, f"largest ELBO decrease {max(0.0, -worst):.1e} (tolerance 1e-8)", dt)
    assert ok


def test_criterion_04_evidence_bound(report):
    t0 = time.perf_counter()
    tasks = [
        (np.array([[1.0]]), [0], 1.0, 0.0),
        (np.array([[2.0]]), [1], 0.5, -1.0),
        (np.array([[1.0, 0.5], [0.5, 1.0]]), [0, 1], 1.0, 0.0),
        (np.array([[1.5, 0.9], [0.9, 1.2]]), [0, 0], 0.3, -0.5),
    ]
    worst_violation, worst_growth = -np.inf, -np.inf
    for K, y, tau, a in tasks:
        bundle = bundle_from_gram(K, 2, a)
        Y = one_hot(y, 2)
        gap = gauss_hermite_log_evidence(Y, bundle, tau, nodes=40) - elbo_trace(Y, bundle, tau, 10)
        worst_violation = max(worst_violation, float(np.max(-gap)))
        worst_growth = max(worst_growth, float(np.max(np.diff(gap))))
    dt = time.perf_counter() - t0
    ok = worst_violation < 1e-9 and worst_growth <= 1e-12 and dt < 30.0
    report(4, ok, f"bound violation {worst_violation:.1e} (limit 1e-9), largest gap increase {worst_growth:.1e}", dt)
    assert ok


def test_criterion_05_gibbs_agrees_with_mean_field(report):
    t0 = time.perf_counter()
    rows = gibbs_vs_mean_field(tiny_suite(10, 6, 3, 1.0), burn_in=2000, samples=20000, seed=105)
    diff = max(float(np.max(np.abs(r["gibbs"] - r["mean_field"]))) for r in rows)
    se = max(float(np.max(r["stderr"])) for r in rows)
    dt = time.perf_counter() - t0
    ok = diff < 0.15 and dt < 300.0
    report(5, ok, f"max |Gibbs - mean-field| {diff:.3f} (limit 0.15), largest Gibbs s.e. {se:.3f}", dt)
    assert ok


def _random_state(rng, Y, bundle):
    # F is drawn from the prior: far off-prior values on a near-singular Gram
    # matrix give Gaussian terms so large that their rounding swamps 1e-8
    N, C = Y.shape
    M = rng.integers(0, 3, size=(N, C))
    Om = np.where(M + Y > 0, rng.uniform(0.05, 1.5, size=(N, C)), 0.0)
    F = bundle.mean + bundle.chol @ rng.normal(size=(N, C))
    return GibbsState(lam=rng.uniform(0.3, 3.0, N), M=M, Omega=Om, F=F)


def test_criterion_06_conditional_ratio_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(106)
    worst = {"F": 0.0, "lambda": 0.0, "Omega": 0.0, "M,Omega": 0.0}
    for _ in range(25):
        Y, bundle, tau = random_episode_bundle(rng, 6, 3)
        C = Y.shape[1]
        s1, s2 = _random_state(rng, Y, bundle), _random_state(rng, Y, bundle)
        joint = lambda s: joint_log_density(Y, s, bundle, tau)
        z = s1.F / tau

        mu, Sigma = f_conditional(Y, s1.M, s1.Omega, bundle, tau)
        lq = lambda F: sum(stats.multivariate_normal(mu[:, c], Sigma[c]).logpdf(F[:, c]) for c in range(C))
        alt = GibbsState(s1.lam, s1.M, s1.Omega, s2.F)
        worst["F"] = max(worst["F"], abs((lq(s1.F) - lq(s2.F)) - (joint(s1) - joint(alt))))

        g = stats.gamma(1.0 + s1.M.sum(axis=1), scale=1.0 / C)
        alt = GibbsState(s2.lam, s1.M, s1.Omega, s1.F)
        worst["lambda"] = max(worst["lambda"], abs(np.sum(g.logpdf(s1.lam) - g.logpdf(s2.lam))
                                                   - (joint(s1) - joint(alt))))

        b = s1.M + Y
        Om2 = np.where(b > 0, rng.uniform(0.05, 1.5, size=b.shape), 0.0)
        alt = GibbsState(s1.lam, s1.M, Om2, s1.F)
        lhs = np.sum(pg_log_density(s1.Omega, b, z) - pg_log_density(Om2, b, z))
        worst["Omega"] = max(worst["Omega"], abs(lhs - (joint(s1) - joint(alt))))

        rate = s1.lam[:, None] * sigmoid(-z)
        lq = lambda s: np.sum(stats.poisson.logpmf(s.M, rate) + pg_log_density(s.Omega, s.M + Y, z))
        alt = GibbsState(s1.lam, s2.M, s2.Omega, s1.F)
        worst["M,Omega"] = max(worst["M,Omega"], abs((lq(s1) - lq(alt)) - (joint(s1) - joint(alt))))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-8 and dt < 10.0
    report(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (limit 1e-8)", dt)
    assert ok


def test_criterion_07_polya_gamma_moments(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    n = 200_000
    zs = []
    for b, c in ((1, 0.0), (1, 2.0), (3, 1.0)):
        s = pg_sample(rng, np.full(n, b), np.full(n, c))
        zs.append(abs(s.mean() - pg_mean(b, c)) / math.sqrt(pg_var(b, c) / n))
        if (b, c) == (1, 0.0):
            v = s.var(ddof=1)
            m4 = np.mean((s - s.mean()) ** 4)
            se_v = math.sqrt((m4 - v * v) / n)
            zv = abs(v - 1 / 24) / se_v
    dt = time.perf_counter() - t0
    ok = max(zs) < 3.0 and zv < 5.0 and dt < 30.0
    report(7, ok, f"mean errors {', '.join(f'{z:.2f}' for z in zs)} s.e. (limit 3); PG(1,0) variance {zv:.2f} s.e. (limit 5)", dt)
    assert ok


def test_criterion_08_gradient_checks(report):
    t0 = time.perf_counter()
    gen = TaskGenerator(TaskGeneratorConfig())
    ep = gen.sample(np.random.default_rng(108))
    hyper = HyperParams.init(np.random.default_rng(108), kind="cosine")
    g1 = episode_grad(ep, hyper, LossConfig(fd_step=1e-4)).grad
    g2 = episode_grad(ep, hyper, LossConfig(fd_step=5e-5)).grad
    rich = float(np.max(np.abs(g1 - g2)) / np.max(np.abs(g1)))

    # frozen variational state on a two-point RBF task; P is exactly proportional
    # to the output scale s, so dKL/dlog s = 0.5 sum_c [N - tr(P^-1 S_c) - d_c' P^-1 d_c]
    rng = np.random.default_rng(208)
    h = HyperParams.init(rng, kind="rbf", in_dim=4, out_dim=3)
    h = HyperParams(h.feature_map, KernelSpec("rbf", output_scale=1.3, lengthscale=0.8))
    X = rng.normal(size=(2, 4))
    Y = one_hot([0, 1], 2)
    bundle = build_bundle(h, X, prior_mean=-0.5, n_classes=2)
    state, _ = mean_field(Y, bundle, h.tau, 5)
    Pinv = np.linalg.inv(bundle.prior_cov)
    d = state.mu_tilde - bundle.mean
    analytic = 0.5 * sum(2 - np.trace(Pinv @ state.sigma_tilde[c]) - d[:, c] @ Pinv @ d[:, c] for c in range(2))
    i = h.param_names().index("log_output_scale")
    theta = h.to_vector()

    def kl(step):
        t = theta.copy()
        t[i] += step
        b = build_bundle(h.from_vector(t), X, prior_mean=-0.5, n_classes=2)
        return elbo_terms(state, Y, b, h.tau)["kl_f"]

    fd = (kl(1e-4) - kl(-1e-4)) / 2e-4
    kl_rel = abs(fd - analytic) / abs(analytic)
    dt = time.perf_counter() - t0
    ok = rich < 1e-3 and kl_rel < 1e-5 and dt < 60.0
    report(8, ok, f"Richardson h vs h/2 {rich:.1e} (limit 1e-3); KL derivative {kl_rel:.1e} (limit 1e-5)", dt)
    assert ok


# The stock generator puts class signal in every input dimension with tiny
# within-class noise, which leaves nothing for the feature map to learn; four
# informative dimensions plus twelve nuisance dimensions give it a job.
DESK_GENERATOR = dict(informative_dims=4, nuisance_std=1.0)


def _desk_run(seed, tau, eval_cfg):
    hyper = HyperParams.init(np.random.default_rng(seed), kind="cosine", tau=tau)
    train_gen = TaskGeneratorConfig(queries_per_class=2, **DESK_GENERATOR)
    cfg = TrainConfig(epochs=30, episodes_per_epoch=20, loss=LossConfig("ML"), seed=seed)
    trained, _ = train(train_gen, cfg, hyper)
    test_gen = TaskGeneratorConfig(queries_per_class=15, **DESK_GENERATOR)
    return evaluate(hyper, test_gen, eval_cfg).mean, evaluate(trained, test_gen, eval_cfg).mean


def test_criterion_09_desk_scale_meta_learning(report):
    t0 = time.perf_counter()
    eval_cfg = EvalConfig(episodes=100, batches=5, seed=909)
    acc = {}
    for seed in range(5):
        for tau in (0.2, 0.5, 1.0):
            acc[seed, tau] = _desk_run(seed, tau, eval_cfg)
    gains = [acc[s, 0.2][1] - acc[s, 0.2][0] for s in range(5)]
    ordered = sum(acc[s, 0.2][1] >= acc[s, 1.0][1] and acc[s, 0.5][1] >= acc[s, 1.0][1] for s in range(5))
    dt = time.perf_counter() - t0
    ok = all(g >= 0.10 for g in gains) and ordered >= 4 and dt < 1200.0
    table = "; ".join(f"seed {s}: " + "/".join(f"{acc[s, t][1]:.3f}" for t in (0.2, 0.5, 1.0)) for s in range(5))
    report(9, ok, f"gains at tau 0.2 {', '.join(f'{g:+.3f}' for g in gains)}; "
                  f"tau 0.2 and 0.5 >= tau 1 on {ordered}/5 seeds [{table}]", dt)
    assert ok


def test_criterion_10_calibration_pipeline(report, tmp_path):
    t0 = time.perf_counter()
    a = calibration(np.ones(10), np.ones(10, bool))
    b = calibration(np.full(10, 0.8), np.arange(10) < 6)
    c = calibration(np.r_[np.full(10, 0.9), np.full(10, 0.6)], np.r_[np.arange(10) < 9, np.arange(10) < 4])
    hand = (a.ece == 0 and a.mce == 0 and abs(b.ece - 0.2) < 1e-12 and abs(b.mce - 0.2) < 1e-12
            and abs(c.ece - 0.1) < 1e-12 and abs(c.mce - 0.2) < 1e-12)

    config = tmp_path / "cal.json"
    config.write_text(json.dumps({"train": {"epochs": 1, "episodes_per_epoch": 5},
                                  "calibrate": {"validation_episodes": 20, "test_episodes": 300}}))
    runs = {}
    for name, seed in (("a", 0), ("b", 0), ("c", 1)):
        out = tmp_path / name
        codes = (main(["train", "--config", str(config), "--out", str(out)]),
                 main(["calibrate", "--config", str(config), "--out", str(out), "--seed", str(seed)]))
        runs[name] = (codes, (out / "reliability.csv").read_bytes(), json.loads((out / "calibration.json").read_text()))
    same = runs["a"][1] == runs["b"][1] and runs["a"][1] != runs["c"][1]
    rep = runs["a"][2]
    ok = hand and same and all(r[0] == (0, 0) for r in runs.values()) and rep["ece"] <= rep["mce"]
    dt = time.perf_counter() - t0
    ok = ok and dt < 300.0
    report(10, ok, f"hand-built cases {'exact' if hand else 'WRONG'}; reliability CSV "
                   f"{'identical' if same else 'differs'} across reruns; ECE {rep['ece']:.4f}, MCE {rep['mce']:.4f}", dt)
    assert ok


def test_criterion_11_determinism(report, tmp_path):
    t0 = time.perf_counter()
    config = tmp_path / "det.json"
    config.write_text(json.dumps({"train": {"epochs": 2, "episodes_per_epoch": 5},
                                  "eval": {"episodes": 50, "batches": 5}}))
    names = ("train_log.json", "checkpoint.json", "eval.json", "eval_episodes.csv")
    outputs = {}
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / name
        codes = (main(["train", "--config", str(config), "--out", str(out), "--workers", str(workers)]),
                 main(["eval", "--config", str(config), "--out", str(out), "--workers", str(workers)]))
        assert codes == (0, 0)
        outputs[name] = [(out / n).read_bytes() for n in names]
    rerun = outputs["a"] == outputs["b"]
    workers = outputs["a"] == outputs["c"]
    dt = time.perf_counter() - t0
    ok = rerun and workers
    report(11, ok, f"rerun {'identical' if rerun else 'differs'}; workers 1 vs 4 {'identical' if workers else 'differs'}", dt)
    assert ok


def test_criterion_12_inner_loop_convergence(report):
    t0 = time.perf_counter()
    gen = TaskGenerator(TaskGeneratorConfig())
    hyper = HyperParams.init(np.random.default_rng(112))
    sweeps = []
    for i in range(100):
        ep = gen.sample(np.random.default_rng([112, i]))
        bundle = build_bundle(hyper, ep.support_X, prior_mean=hyper.prior_mean_test, n_classes=ep.n_classes)
        _, k = mean_field(one_hot(ep.support_y, ep.n_classes), bundle, hyper.tau, 100, tol=1e-6)
        sweeps.append(k)
    dt = time.perf_counter() - t0
    ok = max(sweeps) <= 20
    report(12, ok, f"sweeps to max |delta mu| < 1e-6: median {int(np.median(sweeps))}, max {max(sweeps)} (limit 20)", dt)
    assert ok

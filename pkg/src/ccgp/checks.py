"""Numerical self-checks shared by the command line and the test-suite.

Each ``check_*`` function returns ``(passed, detail)``.
"""

import math
import time

import numpy as np

from .augmented import gibbs_posterior_mean, init_state, mean_field, mf_sweep, one_hot
from .elbo import elbo
from .kernels import FeatureMap, GramBundle, HyperParams, KERNEL_KINDS, KernelSpec, build_bundle, chol_jitter
from .math_core import digamma, lgamma, log_logistic_softmax, logistic_softmax, logsumexp, pg_mean, pg_sample, pg_var

EULER_GAMMA = 0.5772156649015329


def bundle_from_gram(K, n_classes, prior_mean=0.0):
    K = np.asarray(K, dtype=float)
    L, jit = chol_jitter(K)
    return GramBundle(K=K, chol=L, jitter=np.asarray(jit), mean=np.full((K.shape[0], n_classes), float(prior_mean)))


def gauss_hermite_log_evidence(Y, bundle, tau, nodes=40):
    """``log p(Y)`` by tensor-product Gauss-Hermite quadrature over the prior.

    Exponential in ``N * C``; meant for a handful of latent values.
    """
    N, C = Y.shape
    D = N * C
    x, w = np.polynomial.hermite.hermgauss(nodes)
    grids = np.meshgrid(*([x] * D), indexing="ij")
    Z = math.sqrt(2.0) * np.stack([g.ravel() for g in grids], axis=-1).reshape(-1, C, N)
    logw = sum(np.log(g.ravel()) for g in np.meshgrid(*([w] * D), indexing="ij")) - 0.5 * D * math.log(math.pi)
    F = bundle.mean.T[None] + np.einsum("ij,scj->sci", bundle.chol, Z)
    ll = np.sum(log_logistic_softmax(np.swapaxes(F, 1, 2), tau) * Y[None], axis=(1, 2))
    return float(logsumexp(ll + logw, axis=0))


def random_episode_bundle(rng, max_points=25, max_classes=5, kind=None):
    """Random labels and prior for property checks (any kernel, random tau and mean)."""
    C = int(rng.integers(2, max_classes + 1))
    N = int(rng.integers(C, max_points + 1))
    y = np.concatenate([np.arange(C), rng.integers(0, C, N - C)])
    X = rng.normal(size=(N, 6))
    kind = KERNEL_KINDS[int(rng.integers(len(KERNEL_KINDS)))] if kind is None else kind
    hyper = HyperParams(FeatureMap.random(rng, 6, 4), KernelSpec(kind=kind))
    a = float(rng.choice([0.0, -5.0]))
    tau = float(rng.choice([0.2, 0.5, 1.0]))
    return one_hot(y, C), build_bundle(hyper, X, prior_mean=a, n_classes=C), tau


def elbo_trace(Y, bundle, tau, sweeps):
    state = init_state(Y, bundle, tau)
    out = []
    for _ in range(sweeps):
        state = mf_sweep(state, Y, bundle, tau)
        out.append(elbo(state, Y, bundle, tau))
    return np.array(out)


# ---------------------------------------------------------------------------
# check groups
# ---------------------------------------------------------------------------

def check_special_functions():
    x = np.linspace(0.3, 40.0, 200)
    rec_psi = np.max(np.abs(digamma(x + 1.0) - digamma(x) - 1.0 / x))
    rec_lg = np.max(np.abs(lgamma(x + 1.0) - lgamma(x) - np.log(x)))
    known = max(abs(digamma(1.0) + EULER_GAMMA), abs(digamma(0.5) + EULER_GAMMA + 2 * math.log(2.0)),
                abs(lgamma(0.5) - 0.5 * math.log(math.pi)), abs(lgamma(10.0) - math.log(362880.0)))
    err = max(rec_psi, rec_lg, known)
    return err < 1e-10, f"max error {err:.2e}"


def separated_negative_logits(rng, C):
    """Negative logits, each at most -0.1 and at least 0.1 apart."""
    return rng.permutation(-np.cumsum(0.1 + rng.uniform(0.0, 1.0, C)))


def positive_logits(rng, C):
    """At least two entries in [0.1, 5]; the rest in [-5, -0.1]."""
    k = int(rng.integers(2, C + 1))
    f = -rng.uniform(0.1, 5.0, C)
    f[:k] = rng.uniform(0.1, 5.0, k)
    return rng.permutation(f)


def check_theorem_limits(n=200, seed=0):
    """Vanishing-temperature limits and the large-negative-shift limit."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        f = separated_negative_logits(rng, int(rng.integers(2, 8)))
        target = np.eye(f.size)[np.argmax(f)]
        worst = max(worst, np.max(np.abs(logistic_softmax(f, 0.001) - target)))
        f = positive_logits(rng, int(rng.integers(2, 8)))
        target = (f > 0) / np.sum(f > 0)
        worst = max(worst, np.max(np.abs(logistic_softmax(f, 0.001) - target)))
        f = rng.uniform(-1.0, 1.0, int(rng.integers(2, 8)))
        for tau in (0.2, 0.5, 1.0):
            e = np.exp(f / tau)
            worst = max(worst, np.max(np.abs(logistic_softmax(f - 20.0, tau) - e / e.sum())))
    return worst < 1e-4, f"max deviation {worst:.2e}"


def check_cavi_monotone(episodes=10, sweeps=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(episodes):
        trace = elbo_trace(*random_episode_bundle(rng), sweeps)
        worst = min(worst, float(np.min(np.diff(trace))))
    return worst >= -1e-8, f"largest decrease {max(0.0, -worst):.2e}"


def check_pg_moments(draws=20000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for b, c in ((1, 0.0), (1, 2.0), (3, 1.0)):
        s = pg_sample(rng, np.full(draws, b), np.full(draws, c))
        z = abs(s.mean() - pg_mean(b, c)) / math.sqrt(pg_var(b, c) / draws)
        worst = max(worst, z)
    return worst < 3.0, f"largest standardized mean error {worst:.2f}"


def check_evidence_bound():
    worst = -np.inf
    for N, tau, a in ((1, 1.0, 0.0), (1, 0.5, -1.0), (2, 1.0, 0.0)):
        K = np.eye(N) + 0.5
        bundle = bundle_from_gram(K, 2, a)
        Y = one_hot(np.arange(N) % 2, 2)
        logz = gauss_hermite_log_evidence(Y, bundle, tau)
        trace = elbo_trace(Y, bundle, tau, 10)
        worst = max(worst, float(np.max(trace - logz)))
    return worst < 1e-9, f"largest bound violation {worst:.2e}"


SELFTEST_GROUPS = (
    ("special_functions", check_special_functions),
    ("likelihood_limits", check_theorem_limits),
    ("cavi_monotonicity", check_cavi_monotone),
    ("polya_gamma_moments", check_pg_moments),
    ("evidence_bound", check_evidence_bound),
)


def run_selftest(out=print):
    ok_all = True
    for name, fn in SELFTEST_GROUPS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure of that group
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok_all


# ---------------------------------------------------------------------------
# Gibbs against mean-field
# ---------------------------------------------------------------------------

def tiny_suite(episodes=10, max_points=6, max_classes=3, tau=1.0, seed=0):
    """Small problems for comparing the Gibbs sampler with mean-field.

    The first problem uses ``K = I + 0.5`` on four points with two classes;
    the rest draw 3-d inputs under an RBF kernel. Returns a list of
    ``(Y, bundle, tau)``.
    """
    suite = [(one_hot(np.array([0, 1, 0, 1]), 2), bundle_from_gram(np.eye(4) + 0.5, 2), tau)]
    rng = np.random.default_rng(seed)
    hyper = HyperParams(FeatureMap(np.eye(3)), KernelSpec("rbf", lengthscale=math.sqrt(2.0)))
    while len(suite) < episodes:
        N = int(rng.integers(2, max_points + 1))
        C = int(rng.integers(2, min(max_classes, N) + 1))
        y = np.concatenate([np.arange(C), rng.integers(0, C, N - C)])
        X = rng.normal(size=(N, 3))
        suite.append((one_hot(y, C), build_bundle(hyper, X, n_classes=C), tau))
    return suite[:episodes]


def gibbs_vs_mean_field(suite, burn_in=2000, samples=20000, seed=0):
    """Posterior means of F from both methods on each problem.

    Returns a list of dicts with the two ``(N, C)`` means and the Gibbs
    batch-means standard error.
    """
    rows = []
    for i, (Y, bundle, tau) in enumerate(suite):
        mf, _ = mean_field(Y, bundle, tau, 1000, tol=1e-10)
        rng = np.random.default_rng([seed, i])
        g, se = gibbs_posterior_mean(rng, Y, bundle, tau, burn_in, samples)
        rows.append({"gibbs": g, "mean_field": mf.mu_tilde, "stderr": se})
    return rows

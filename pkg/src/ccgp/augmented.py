"""Augmented multi-class GP model: mean-field updates and a Gibbs sampler.

Given the Gamma (``lambda``), Poisson (``M``) and Polya-Gamma (``Omega``)
auxiliaries, every full conditional of the tempered logistic-softmax GP
classifier is available in closed form. The mean-field engine is the
production path; the Gibbs sampler exists to validate it.

Shapes: per-point/per-class quantities are ``(..., N, C)``; posterior
covariances are ``(..., C, N, N)``. Leading dimensions batch over
hyperparameter settings.
"""

import math
from dataclasses import dataclass

import numpy as np

from .kernels import build_bundle, tri_solve
from .math_core import LOG2, digamma, lgamma, log_cosh, log_sigmoid, pg_log_density_base, pg_mean, pg_sample

GAMMA_EXP_CLIP = 30.0


@dataclass(frozen=True)
class Episode:
    support_X: np.ndarray
    support_y: np.ndarray
    query_X: np.ndarray
    query_y: np.ndarray
    n_classes: int

    def __post_init__(self):
        for name in ("support_X", "query_X"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("support_y", "query_y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        C = self.n_classes
        if C < 2:
            raise ValueError("an episode needs at least two classes")
        if self.support_X.shape[0] != self.support_y.shape[0] or self.query_X.shape[0] != self.query_y.shape[0]:
            raise ValueError("inputs and labels have different lengths")
        for y in (self.support_y, self.query_y):
            if y.size and (y.min() < 0 or y.max() >= C):
                raise ValueError(f"labels must lie in [0, {C})")
        if set(np.unique(self.support_y)) != set(range(C)):
            raise ValueError("every class must appear in the support set")

    @property
    def all_X(self):
        return np.concatenate([self.support_X, self.query_X])

    @property
    def all_y(self):
        return np.concatenate([self.support_y, self.query_y])


def one_hot(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    Y = np.zeros((y.size, n_classes))
    Y[np.arange(y.size), y] = 1.0
    return Y


@dataclass(frozen=True)
class VariationalState:
    gamma: np.ndarray
    alpha: np.ndarray
    mu_tilde: np.ndarray
    sigma_tilde: np.ndarray
    omega_bar: np.ndarray
    f_tilde: np.ndarray

    @property
    def var_tilde(self):
        """Marginal posterior variances as an ``(..., N, C)`` array."""
        return np.swapaxes(np.diagonal(self.sigma_tilde, axis1=-2, axis2=-1), -1, -2)


@dataclass(frozen=True)
class GibbsState:
    lam: np.ndarray
    M: np.ndarray
    Omega: np.ndarray
    F: np.ndarray


# ---------------------------------------------------------------------------
# closed-form factor updates
# ---------------------------------------------------------------------------

def _f_tilde(mu, var, tau):
    return np.sqrt(mu * mu + var) / tau


def _gamma(alpha, mu, f_tilde, tau):
    C = mu.shape[-1]
    expo = np.clip(digamma(alpha)[..., None] - mu / (2.0 * tau), -GAMMA_EXP_CLIP, GAMMA_EXP_CLIP)
    return np.exp(expo - math.log(2.0 * C) - log_cosh(0.5 * f_tilde))


def _gaussian_factor(prec_diag, shift, bundle):
    """Posterior of F under diagonal Gaussian sites.

    Returns ``(Sigma, mu)`` with ``Sigma = (diag(w) + P^{-1})^{-1}`` and
    ``mu = Sigma (shift + P^{-1} a)``, where ``w = prec_diag`` and ``P`` is the
    jittered prior covariance. Computed through ``B = I + S P S``
    (``S = diag(sqrt(w))``), which is well conditioned, so no inverse of
    ``P`` is ever needed:

        Sigma = P - V^T V,   V = L_B^{-1} S P
        mu    = a + Sigma (shift - w * a)
    """
    P = bundle.prior_cov[..., None, :, :]
    w = np.swapaxes(prec_diag, -1, -2)                      # (..., C, N)
    s = np.sqrt(w)
    n = P.shape[-1]
    Bm = np.eye(n) + s[..., :, None] * P * s[..., None, :]
    LB = np.linalg.cholesky(Bm)
    V = tri_solve(LB, s[..., :, None] * P)
    Sigma = P - np.swapaxes(V, -1, -2) @ V
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
    a = np.swapaxes(bundle.mean, -1, -2)
    r = np.swapaxes(shift, -1, -2) - w * a
    mu = a + np.einsum("...ij,...j->...i", Sigma, r)
    return Sigma, np.swapaxes(mu, -1, -2)


def init_state(Y, bundle, tau):
    """Start from the prior: ``mu = a``, ``Sigma = K``, ``alpha = C``.

    ``f_tilde``, ``gamma`` and ``omega_bar`` are then filled in by one
    application of their updates.
    """
    P = bundle.prior_cov
    C = Y.shape[-1]
    batch = P.shape[:-2]
    n = P.shape[-1]
    mu = np.broadcast_to(bundle.mean, batch + (n, C)).copy()
    Sigma = np.broadcast_to(P[..., None, :, :], batch + (C, n, n)).copy()
    alpha = np.full(batch + (n,), float(C))
    var = np.swapaxes(np.diagonal(Sigma, axis1=-2, axis2=-1), -1, -2)
    ft = _f_tilde(mu, var, tau)
    gamma = _gamma(alpha, mu, ft, tau)
    omega = pg_mean(gamma + Y, ft)
    return VariationalState(gamma=gamma, alpha=alpha, mu_tilde=mu, sigma_tilde=Sigma,
                            omega_bar=omega, f_tilde=ft)


def mf_sweep(state, Y, bundle, tau):
    """One coordinate-ascent sweep: f_tilde, gamma, alpha, omega_bar, Sigma, mu."""
    ft = _f_tilde(state.mu_tilde, state.var_tilde, tau)
    gamma = _gamma(state.alpha, state.mu_tilde, ft, tau)
    alpha = 1.0 + gamma.sum(axis=-1)
    omega = pg_mean(gamma + Y, ft)
    assert np.all(omega >= 0), "omega_bar must be non-negative"
    Sigma, mu = _gaussian_factor(omega / tau ** 2, (Y - gamma) / (2.0 * tau), bundle)
    return VariationalState(gamma=gamma, alpha=alpha, mu_tilde=mu, sigma_tilde=Sigma,
                            omega_bar=omega, f_tilde=ft)


def mean_field(Y, bundle, tau, steps, tol=None):
    """Run ``steps`` sweeps from the prior, optionally stopping early.

    With ``tol`` set, iteration stops once the largest absolute change in
    ``mu_tilde`` over a sweep falls below it. Returns ``(state, sweeps_run)``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    state = init_state(Y, bundle, tau)
    for k in range(1, steps + 1):
        new = mf_sweep(state, Y, bundle, tau)
        delta = np.max(np.abs(new.mu_tilde - state.mu_tilde))
        state = new
        if tol is not None and delta < tol:
            return state, k
    return state, steps


def run_mean_field(episode, hyper, steps, split="train", tol=None):
    """Mean-field inference for one episode.

    ``split="train"`` conditions on support and query jointly with the
    training prior mean and runs exactly ``steps`` sweeps. ``split="test"``
    conditions on the support set only, uses the test prior mean and stops
    early at ``tol`` (default ``1e-6``). Returns ``(state, bundle)``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    C = episode.n_classes
    if split == "train":
        X, y, a = episode.all_X, episode.all_y, hyper.prior_mean_train
    elif split == "test":
        X, y, a = episode.support_X, episode.support_y, hyper.prior_mean_test
        tol = 1e-6 if tol is None else tol
    else:
        raise ValueError(f"unknown split {split!r}")
    bundle = build_bundle(hyper, X, prior_mean=a, n_classes=C)
    state, _ = mean_field(one_hot(y, C), bundle, hyper.tau, steps, tol)
    return state, bundle


# ---------------------------------------------------------------------------
# augmented joint density and Gibbs sampling
# ---------------------------------------------------------------------------

def gaussian_logpdf_cols(F, mean, chol):
    """Sum over columns of ``log N(F[:, c] | mean[:, c], L L^T)``."""
    n = chol.shape[-1]
    z = tri_solve(chol, F - mean)
    logdet = np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    C = F.shape[-1]
    return -0.5 * np.sum(z * z, axis=(-2, -1)) - C * logdet - 0.5 * C * n * math.log(2.0 * math.pi)


def joint_log_density(Y, state, bundle, tau):
    """Log of the augmented joint ``p(Y, lambda, M, Omega, F)``."""
    F, M, Om = state.F, state.M, state.Omega
    lam = state.lam[..., None]
    z = F / tau
    b = M + Y
    per = (-b * LOG2 + 0.5 * (Y - M) * z - 0.5 * Om * z * z
           + pg_log_density_base(Om, b)
           + M * np.log(lam) - lgamma(M + 1.0) - lam)
    total = np.sum(per, axis=(-2, -1)) + gaussian_logpdf_cols(F, bundle.mean, bundle.chol)
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("augmented joint density is not finite; check the state invariants")
    return total


def f_conditional(Y, M, Omega, bundle, tau):
    """Mean and covariance of ``F | Omega, M``; covariance is ``(C, N, N)``."""
    Sigma, mu = _gaussian_factor(Omega / tau ** 2, (Y - M) / (2.0 * tau), bundle)
    return mu, Sigma


def gibbs_step(rng, state, Y, bundle, tau):
    """One scan of the blocked Gibbs sampler.

    ``(M, Omega)`` are drawn as a block (``M`` from its Poisson conditional
    with ``Omega`` integrated out, then ``Omega | M``), followed by
    ``lambda | M`` and ``F | Omega, M``.
    """
    C = Y.shape[-1]
    z = state.F / tau
    rate = state.lam[:, None] * np.exp(log_sigmoid(-z))
    M = rng.poisson(rate)
    Om = pg_sample(rng, (M + Y).astype(np.int64), z)
    lam = rng.gamma(1.0 + M.sum(axis=1), 1.0 / C)
    mu, Sigma = f_conditional(Y, M, Om, bundle, tau)
    L = np.linalg.cholesky(Sigma)
    eps = rng.standard_normal(mu.T.shape)
    F = mu + np.einsum("cij,cj->ic", L, eps)
    return GibbsState(lam=lam, M=M, Omega=Om, F=F)


def gibbs_init(rng, Y, bundle, tau):
    F = np.array(bundle.mean, dtype=float)
    M = np.zeros(Y.shape, dtype=np.int64)
    Om = pg_sample(rng, (M + Y).astype(np.int64), F / tau)
    return GibbsState(lam=np.ones(Y.shape[0]), M=M, Omega=Om, F=F)


def gibbs_posterior_mean(rng, Y, bundle, tau, burn_in, samples, n_batches=20):
    """Chain average of ``F`` after burn-in.

    Returns ``(mean, stderr)``; the standard error comes from batch means.
    """
    if burn_in < 0 or samples < 1:
        raise ValueError("burn_in must be >= 0 and samples >= 1")
    state = gibbs_init(rng, Y, bundle, tau)
    for _ in range(burn_in):
        state = gibbs_step(rng, state, Y, bundle, tau)
    trace = np.empty((samples,) + Y.shape)
    for i in range(samples):
        state = gibbs_step(rng, state, Y, bundle, tau)
        trace[i] = state.F
    mean = trace.mean(axis=0)
    nb = min(n_batches, samples)
    if nb < 2:
        return mean, np.full(mean.shape, np.inf)
    usable = samples - samples % nb
    bm = trace[:usable].reshape((nb, -1) + Y.shape).mean(axis=1)
    stderr = bm.std(axis=0, ddof=1) / math.sqrt(nb)
    return mean, stderr


def gibbs_posterior_mean_f(rng, episode, hyper, burn_in, samples, split="train"):
    """Gibbs estimate of the posterior mean of ``F`` for an episode."""
    C = episode.n_classes
    if split == "train":
        X, y, a = episode.all_X, episode.all_y, hyper.prior_mean_train
    else:
        X, y, a = episode.support_X, episode.support_y, hyper.prior_mean_test
    bundle = build_bundle(hyper, X, prior_mean=a, n_classes=C)
    mean, _ = gibbs_posterior_mean(rng, one_hot(y, C), bundle, hyper.tau, burn_in, samples)
    return mean

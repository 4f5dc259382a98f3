"""Evidence lower bound, training losses and finite-difference gradients."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .augmented import mean_field, one_hot
from .kernels import GramBundle, _features, _gram, chol_jitter, solve_psd, tri_solve
from .math_core import LOG2, digamma, lgamma, log_cosh, log_logistic_softmax, logsumexp

ELBO_TERMS = ("expected_loglik", "kl_f", "kl_lambda", "kl_m", "kl_omega")


@dataclass(frozen=True)
class LossConfig:
    loss_kind: str = "ML"
    inner_steps: int = 2
    mc_samples: int = 16
    fd_step: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("ML", "PL"):
            raise ValueError(f"loss_kind must be 'ML' or 'PL', got {self.loss_kind!r}")
        if self.inner_steps < 1 or self.mc_samples < 1 or not self.fd_step > 0:
            raise ValueError("inner_steps and mc_samples must be >= 1 and fd_step > 0")


@dataclass(frozen=True)
class GradReport:
    grad: np.ndarray
    loss_value: float
    fd_step_used: float


def elbo_terms(state, Y, bundle, tau):
    """The five pieces of the analytical ELBO, each summed over the task.

    ``kl_*`` terms are returned as KL divergences (the ELBO subtracts them).
    In the expected log-likelihood the quadratic term uses ``E_q[f^2] / tau^2``
    from the current Gaussian factor; ``f_tilde`` stored in the state is the
    Polya-Gamma tilt of ``q(Omega | M)``. The two coincide at a fixed point.
    """
    C = Y.shape[-1]
    n = Y.shape[-2]
    g, al, mu, om, ft = state.gamma, state.alpha, state.mu_tilde, state.omega_bar, state.f_tilde
    ef2 = (mu * mu + state.var_tilde) / tau ** 2
    ell = np.sum(-(Y + g) * LOG2 + (Y - g) / (2.0 * tau) * mu - 0.5 * om * ef2, axis=(-2, -1))

    LP = bundle.chol[..., None, :, :]
    LS = np.linalg.cholesky(state.sigma_tilde)
    logdet_P = 2.0 * np.sum(np.log(np.diagonal(bundle.chol, axis1=-2, axis2=-1)), axis=-1)
    logdet_S = 2.0 * np.sum(np.log(np.diagonal(LS, axis1=-2, axis2=-1)), axis=-1)
    trace = np.sum(tri_solve(LP, LS) ** 2, axis=(-2, -1))
    diff = np.swapaxes(mu - bundle.mean, -1, -2)
    quad = np.sum(tri_solve(LP, diff) ** 2, axis=-1)
    kl_f = 0.5 * np.sum(logdet_P[..., None] - logdet_S - n + trace + quad, axis=-1)

    psi = digamma(al)
    kl_lam = np.sum(-al + math.log(C) - lgamma(al) - (1.0 - al) * psi, axis=-1)
    kl_m = np.sum(g * (np.log(g) - 1.0) - g * (psi[..., None] - math.log(C)) + al[..., None] / C,
                  axis=(-2, -1))
    kl_om = np.sum(-0.5 * ft * ft * om + (g + Y) * log_cosh(0.5 * ft), axis=(-2, -1))

    terms = dict(zip(ELBO_TERMS, (ell, kl_f, kl_lam, kl_m, kl_om)))
    for name, val in terms.items():
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"ELBO term {name} is not finite")
    return terms


def elbo(state, Y, bundle, tau):
    t = elbo_terms(state, Y, bundle, tau)
    return t["expected_loglik"] - t["kl_f"] - t["kl_lambda"] - t["kl_m"] - t["kl_omega"]


def _batched_grams(hyper, thetas, X):
    W, scale, ls, off = hyper.unpack(thetas)
    Z = _features(W, X, hyper.feature_map.normalize)
    K = _gram(hyper.kernel.kind, Z, Z, scale, ls, off)
    return 0.5 * (K + np.swapaxes(K, -1, -2))


def _bundle_from_gram(K, n_classes, prior_mean):
    L, jit = chol_jitter(K)
    mean = np.full((K.shape[-1], n_classes), float(prior_mean))
    return GramBundle(K=K, chol=L, jitter=np.asarray(jit), mean=mean)


def ml_loss(episode, hyper, cfg, thetas=None):
    """Negative ELBO after ``cfg.inner_steps`` sweeps on support + query.

    ``thetas`` evaluates a ``(B, P)`` stack of parameter vectors at once and
    returns ``B`` losses; otherwise ``hyper``'s own parameters are used.
    """
    if thetas is None:
        return float(ml_loss(episode, hyper, cfg, hyper.to_vector()[None])[0])
    C = episode.n_classes
    X, y = episode.all_X, episode.all_y
    K = _batched_grams(hyper, thetas, X)
    bundle = _bundle_from_gram(K, C, hyper.prior_mean_train)
    Y = one_hot(y, C)
    state, _ = mean_field(Y, bundle, hyper.tau, cfg.inner_steps)
    return -elbo(state, Y, bundle, hyper.tau)


def predictive_from_grams(state, bundle, K_sq, k_qq, mean_q):
    """Predictive mean and variance at queries from support posterior.

    ``K_sq`` is ``(..., L, Q)``, ``k_qq`` the ``(..., Q)`` prior variances and
    ``mean_q`` the ``(Q, C)`` prior mean at the queries.
    """
    A = solve_psd(bundle.chol, K_sq)                                   # (..., L, Q)
    centred = state.mu_tilde - bundle.mean                              # (..., L, C)
    mu = mean_q + np.swapaxes(A, -1, -2) @ centred                     # (..., Q, C)
    explained = np.sum(K_sq * A, axis=-2)                               # (..., Q)
    SA = state.sigma_tilde @ A[..., None, :, :]                         # (..., C, L, Q)
    extra = np.sum(A[..., None, :, :] * SA, axis=-2)                    # (..., C, Q)
    var = (k_qq - explained)[..., None, :] + extra
    return mu, np.maximum(np.swapaxes(var, -1, -2), 1e-10)


def pl_loss(episode, hyper, cfg, thetas=None):
    """Monte-Carlo negative predictive log-likelihood of the query labels.

    The posterior is fitted on the support set only. Draws come from a
    generator seeded with ``cfg.rng_seed`` so repeated evaluations (and all
    finite-difference perturbations) share common random numbers.
    """
    if thetas is None:
        return float(pl_loss(episode, hyper, cfg, hyper.to_vector()[None])[0])
    C = episode.n_classes
    Xs, Xq = episode.support_X, episode.query_X
    ns = Xs.shape[0]
    X = np.concatenate([Xs, Xq])
    K = _batched_grams(hyper, thetas, X)
    Kss = K[..., :ns, :ns]
    bundle = _bundle_from_gram(Kss, C, hyper.prior_mean_train)
    jit = bundle.jitter[..., None, None]
    same_sq = np.all(Xs[:, None, :] == Xq[None, :, :], axis=-1)
    K_sq = K[..., :ns, ns:] + jit * same_sq
    k_qq = np.diagonal(K[..., ns:, ns:], axis1=-2, axis2=-1) + bundle.jitter[..., None]
    Ys = one_hot(episode.support_y, C)
    state, _ = mean_field(Ys, bundle, hyper.tau, cfg.inner_steps)
    mean_q = np.full((Xq.shape[0], C), float(hyper.prior_mean_train))
    mu, var = predictive_from_grams(state, bundle, K_sq, k_qq, mean_q)
    rng = np.random.default_rng(cfg.rng_seed)
    eps = rng.standard_normal((cfg.mc_samples,) + mu.shape[-2:])
    f = mu[..., None, :, :] + np.sqrt(var)[..., None, :, :] * eps      # (..., M, Q, C)
    logp = log_logistic_softmax(f, hyper.tau)
    yq = episode.query_y
    picked = logp[..., np.arange(yq.size), yq]                          # (..., M, Q)
    log_mean = logsumexp(picked, axis=-2) - math.log(cfg.mc_samples)
    return -np.mean(log_mean, axis=-1)


def episode_loss(episode, hyper, cfg, thetas=None):
    fn = ml_loss if cfg.loss_kind == "ML" else pl_loss
    return fn(episode, hyper, cfg, thetas)


def fd_grad(loss, theta, h=1e-4, workers=1, chunk=64, names=None):
    """Central finite-difference gradient of a batched loss.

    ``loss`` maps a ``(B, P)`` stack of parameter vectors to ``B`` values.
    Coordinate ``i`` is perturbed by ``h * max(1, |theta_i|)``. Evaluations
    are grouped into fixed-size chunks, so the result does not depend on
    ``workers``.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameters must be finite")
    p = theta.size
    steps = h * np.maximum(1.0, np.abs(theta))
    rows = np.repeat(theta[None], 2 * p + 1, axis=0)
    idx = np.arange(p)
    rows[1 + 2 * idx, idx] += steps
    rows[2 + 2 * idx, idx] -= steps
    chunks = [rows[i:i + chunk] for i in range(0, rows.shape[0], chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(loss, chunks))
    else:
        parts = [loss(c) for c in chunks]
    vals = np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in parts])
    grad = (vals[1::2] - vals[2::2]) / (2.0 * steps)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        labels = [names[i] if names else str(i) for i in bad]
        raise FloatingPointError(f"non-finite difference quotient for coordinates {labels}")
    return GradReport(grad=grad, loss_value=float(vals[0]), fd_step_used=float(h))


def episode_grad(episode, hyper, cfg, workers=1):
    """Finite-difference gradient of the configured loss with respect to Theta."""
    return fd_grad(lambda T: episode_loss(episode, hyper, cfg, T), hyper.to_vector(),
                   h=cfg.fd_step, workers=workers, names=hyper.param_names())

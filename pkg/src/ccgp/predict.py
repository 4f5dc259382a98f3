"""Predictive distribution at query points, episodic evaluation and calibration."""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augmented import mean_field, one_hot
from .elbo import predictive_from_grams
from .kernels import build_bundle, cross_gram
from .math_core import logistic_softmax
from .meta import EPISODE_FAILURES, TaskGenerator, episode_rng

TAU_GRID = tuple(round(0.1 * i, 1) for i in range(1, 16))
EVAL_STREAM = 1
VALIDATION_STREAM = 2


@dataclass(frozen=True)
class PredictiveMoments:
    mu_star: np.ndarray
    var_star: np.ndarray


def fit_support(episode, hyper, steps=20, tol=1e-6):
    """Test-time mean-field on the support set.

    Returns ``(state, bundle, sweeps)`` where ``sweeps`` is the number of
    sweeps actually run before the change in ``mu_tilde`` fell below ``tol``.
    """
    C = episode.n_classes
    bundle = build_bundle(hyper, episode.support_X, prior_mean=hyper.prior_mean_test, n_classes=C)
    state, sweeps = mean_field(one_hot(episode.support_y, C), bundle, hyper.tau, steps, tol)
    return state, bundle, sweeps


def predictive_moments(state, support_X, query_X, hyper, bundle=None):
    """Per-class Gaussian marginals of the latent functions at the queries.

    ``state`` must come from inference on ``support_X`` with ``hyper``; the
    support bundle is rebuilt unless passed in. The prior mean at both the
    support and the queries is ``hyper.prior_mean_test``.
    """
    C = state.mu_tilde.shape[-1]
    if bundle is None:
        bundle = build_bundle(hyper, support_X, prior_mean=hyper.prior_mean_test, n_classes=C)
    k_qs, k_qq = cross_gram(hyper, query_X, support_X, bundle.jitter)
    mean_q = np.full((np.shape(query_X)[0], C), float(hyper.prior_mean_test))
    mu, var = predictive_from_grams(state, bundle, k_qs.T, k_qq, mean_q)
    return PredictiveMoments(mu_star=mu, var_star=var)


def predict_proba(moments, tau, M=256, rng=None):
    """Monte-Carlo class probabilities.

    Draws ``M`` independent normals per query and class, averages the
    tempered logistic-softmax over the draws and renormalises each row.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    mu, var = moments.mu_star, moments.var_star
    eps = rng.standard_normal((M,) + mu.shape)
    p = logistic_softmax(mu + np.sqrt(var) * eps, tau).mean(axis=0)
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 3000
    batches: int = 5
    mc_samples: int = 256
    inner_steps: int = 20
    tol: float = 1e-6
    seed: int = 0
    stream: int = EVAL_STREAM

    def __post_init__(self):
        if self.episodes < 1 or self.batches < 1 or self.mc_samples < 1 or self.inner_steps < 1:
            raise ValueError("episodes, batches, mc_samples and inner_steps must be >= 1")
        if self.episodes % self.batches:
            raise ValueError(f"episodes ({self.episodes}) must split evenly into {self.batches} batches")


@dataclass
class EpisodeResult:
    index: int
    accuracy: float
    sweeps: int
    confidence: np.ndarray = field(repr=False)
    correct: np.ndarray = field(repr=False)


@dataclass
class EvalResult:
    mean: float
    std: float
    batch_means: list
    episodes: list
    aborted: int

    @property
    def confidences(self):
        return np.concatenate([e.confidence for e in self.episodes]) if self.episodes else np.empty(0)

    @property
    def correct(self):
        return np.concatenate([e.correct for e in self.episodes]) if self.episodes else np.empty(0, bool)


def evaluate_episode(episode, hyper, cfg, rng):
    state, bundle, sweeps = fit_support(episode, hyper, cfg.inner_steps, cfg.tol)
    moments = predictive_moments(state, episode.support_X, episode.query_X, hyper, bundle)
    p = predict_proba(moments, hyper.tau, cfg.mc_samples, rng)
    pred = np.argmax(p, axis=-1)
    correct = pred == episode.query_y
    return float(np.mean(correct)), sweeps, p.max(axis=-1), correct


def _run_one(args):
    i, gen, hyper, cfg = args
    rng = episode_rng(cfg.seed, cfg.stream, i)
    episode = gen.sample(rng)
    try:
        acc, sweeps, conf, correct = evaluate_episode(episode, hyper, cfg, rng)
    except EPISODE_FAILURES:
        return None
    return EpisodeResult(i, acc, sweeps, conf, correct)


def evaluate(hyper, gen, cfg=EvalConfig(), workers=1):
    """Mean query accuracy over ``cfg.episodes`` episodes split into batches.

    Episode ``i`` is drawn from ``episode_rng(seed, stream, i)``, so results
    do not depend on ``workers``. The reported ``std`` is the standard
    deviation of the batch means. Aborted episodes are excluded and counted.
    """
    if not isinstance(gen, TaskGenerator):
        gen = TaskGenerator(gen)
    jobs = [(i, gen, hyper, cfg) for i in range(cfg.episodes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_one, jobs))
    else:
        out = [_run_one(j) for j in jobs]
    done = [r for r in out if r is not None]
    per_batch = cfg.episodes // cfg.batches
    batch_means = []
    for b in range(cfg.batches):
        accs = [r.accuracy for r in done if b * per_batch <= r.index < (b + 1) * per_batch]
        batch_means.append(float(np.mean(accs)) if accs else float("nan"))
    accs = np.array([r.accuracy for r in done])
    return EvalResult(mean=float(accs.mean()) if accs.size else float("nan"),
                      std=float(np.std(batch_means)),
                      batch_means=batch_means, episodes=done, aborted=len(out) - len(done))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    mean_accuracy: np.ndarray
    ece: float
    mce: float

    @property
    def bin_centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self):
        def clean(a):
            return [None if math.isnan(x) else float(x) for x in a]
        return {"ece": self.ece, "mce": self.mce, "bin_edges": self.bin_edges.tolist(),
                "counts": self.counts.tolist(), "mean_confidence": clean(self.mean_confidence),
                "mean_accuracy": clean(self.mean_accuracy)}


def calibration(confidences, correct, bins=15):
    """ECE and MCE over equal-width confidence bins on (0, 1].

    Bin ``b`` holds confidences in ``(b/bins, (b+1)/bins]``; a confidence of
    exactly 0 goes to the first bin. Empty bins add nothing to the ECE and
    are skipped by the MCE; their means are NaN.
    """
    conf = np.asarray(confidences, dtype=float).ravel()
    corr = np.asarray(correct, dtype=bool).ravel()
    if conf.size == 0:
        raise ValueError("calibration needs at least one prediction")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correct have different lengths")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=corr.astype(float), minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / counts, np.nan)
        mean_acc = np.where(counts > 0, acc_sum / counts, np.nan)
    nonempty = counts > 0
    gaps = np.abs(mean_conf[nonempty] - mean_acc[nonempty])
    ece = float(np.sum(counts[nonempty] / conf.size * gaps))
    mce = float(gaps.max())
    return CalibrationReport(np.linspace(0.0, 1.0, bins + 1), counts, mean_conf, mean_acc, ece, mce)


def write_reliability_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "mean_confidence", "mean_accuracy", "count"])
        for c, mc, ma, n in zip(report.bin_centers, report.mean_confidence,
                                report.mean_accuracy, report.counts):
            w.writerow([repr(float(c)), "" if n == 0 else repr(float(mc)),
                        "" if n == 0 else repr(float(ma)), int(n)])


def tune_temperature(hyper, gen, cfg, grid=TAU_GRID, bins=15, workers=1):
    """Pick the temperature with the lowest ECE on validation episodes.

    Validation episodes come from a separate stream, so they never overlap
    the test episodes drawn by ``evaluate``. Returns ``(best_tau, scores)``
    with ``scores`` mapping each candidate to its validation ECE.
    """
    vcfg = replace(cfg, stream=VALIDATION_STREAM)
    scores = {}
    for tau in grid:
        res = evaluate(replace(hyper, tau=float(tau)), gen, vcfg, workers)
        scores[float(tau)] = calibration(res.confidences, res.correct, bins).ece
    best = min(scores, key=lambda t: (scores[t], t))
    return best, scores


def prior_predictive_spread(tau, prior_mean, prior_var=1.0, n_classes=5, M=256, rng=None):
    """Max-min gap of class probabilities far from all support points.

    With no kernel overlap the predictive marginals equal the prior, so each
    class gets ``N(prior_mean, prior_var)``; the gap shows how far a finite
    Monte-Carlo average sits from the uniform vector.
    """
    mom = PredictiveMoments(np.full((1, n_classes), float(prior_mean)), np.full((1, n_classes), float(prior_var)))
    p = predict_proba(mom, tau, M, rng)[0]
    return float(p.max() - p.min())

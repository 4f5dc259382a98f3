"""Synthetic few-shot tasks, Adam over the hyperparameters, and the training loop."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .elbo import LossConfig, episode_grad
from .augmented import Episode
from .kernels import FeatureMap, HyperParams, KernelSpec

log = logging.getLogger(__name__)

GENERATOR_KINDS = ("gaussian_prototypes", "rotated_mixture")
CHECKPOINT_FORMAT = "ccgp-checkpoint"
CHECKPOINT_VERSION = 1
EPISODE_FAILURES = (np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class TaskGeneratorConfig:
    """Shape and geometry of synthetic N-way K-shot episodes.

    Class prototypes are drawn once from a pool seeded by ``pool_seed``.
    By default every input dimension carries class signal. Setting
    ``informative_dims`` restricts the prototypes to the leading dimensions;
    the remaining ones are class-independent noise with standard deviation
    ``nuisance_std``, which a learned feature map can suppress.
    """

    generator_kind: str = "gaussian_prototypes"
    input_dim: int = 16
    class_pool_size: int = 64
    within_class_std: float = 0.1
    prototype_std: float = 1.0
    ways: int = 5
    shots: int = 1
    queries_per_class: int = 15
    informative_dims: int | None = None
    nuisance_std: float = 1.0
    pool_seed: int = 0

    def __post_init__(self):
        if self.generator_kind not in GENERATOR_KINDS:
            raise ValueError(f"generator_kind must be one of {GENERATOR_KINDS}, got {self.generator_kind!r}")
        if self.ways < 2 or self.shots < 1 or self.queries_per_class < 0 or self.input_dim < 1:
            raise ValueError("need ways >= 2, shots >= 1, queries_per_class >= 0 and input_dim >= 1")
        if self.class_pool_size < self.ways:
            raise ValueError(f"class_pool_size ({self.class_pool_size}) must be at least ways ({self.ways})")
        if not (self.within_class_std > 0 and self.prototype_std > 0 and self.nuisance_std > 0):
            raise ValueError("standard deviations must be positive")
        if self.informative_dims is not None and not 1 <= self.informative_dims <= self.input_dim:
            raise ValueError("informative_dims must lie in [1, input_dim]")


class TaskGenerator:
    """Episode sampler over a fixed, read-only prototype pool."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.pool_seed)
        d = config.input_dim
        k = d if config.informative_dims is None else config.informative_dims
        pool = np.zeros((config.class_pool_size, d))
        pool[:, :k] = rng.normal(scale=config.prototype_std, size=(config.class_pool_size, k))
        pool.setflags(write=False)
        self.pool = pool
        self._k = k

    def _points(self, rng, protos, per_class):
        cfg = self.config
        C, d = protos.shape
        X = np.repeat(protos, per_class, axis=0)
        k = self._k
        X[:, :k] += rng.normal(scale=cfg.within_class_std, size=(C * per_class, k))
        if k < d:
            X[:, k:] = rng.normal(scale=cfg.nuisance_std, size=(C * per_class, d - k))
        return X

    def sample(self, rng):
        cfg = self.config
        C = cfg.ways
        classes = rng.choice(cfg.class_pool_size, size=C, replace=False)
        protos = self.pool[classes]
        Xs = self._points(rng, protos, cfg.shots)
        Xq = self._points(rng, protos, cfg.queries_per_class)
        if cfg.generator_kind == "rotated_mixture":
            R = random_rotation(rng, cfg.input_dim)
            Xs, Xq = Xs @ R.T, Xq @ R.T
        ys = np.repeat(np.arange(C), cfg.shots)
        yq = np.repeat(np.arange(C), cfg.queries_per_class)
        return Episode(Xs, ys, Xq, yq, C)


def random_rotation(rng, d):
    """Haar-distributed orthogonal matrix with determinant +1."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def sample_episode(gen, rng):
    """Draw one episode; ``gen`` is a ``TaskGenerator`` or its config."""
    if isinstance(gen, TaskGeneratorConfig):
        gen = TaskGenerator(gen)
    return gen.sample(rng)


def episode_rng(seed, *path):
    """Independent stream for one episode, keyed by its position in the run."""
    return np.random.default_rng([int(seed)] + [int(p) for p in path])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state, theta, grad, lrs):
    """Bias-corrected Adam update; ``lrs`` is a scalar or per-coordinate array.

    Returns ``(new_state, new_theta)``. Positive kernel parameters are stored
    as logs in ``theta``, so the step is taken in log space.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, state {state.m.shape}")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_theta = theta - np.asarray(lrs) * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new_theta


def learning_rates(hyper, lr_feature_map, lr_kernel):
    """Per-coordinate learning rates: one for the feature map, one for the rest."""
    lrs = np.full(len(hyper.param_names()), float(lr_kernel))
    lrs[:hyper.n_feature_params] = lr_feature_map
    return lrs


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 100
    loss: LossConfig = field(default_factory=LossConfig)
    lr_feature_map: float = 1e-3
    lr_kernel: float = 1e-4
    seed: int = 0
    checkpoint_path: str | None = None
    meta_batch: int = 1
    max_abort_fraction: float = 0.05

    def __post_init__(self):
        if self.epochs < 1 or self.episodes_per_epoch < 1 or self.meta_batch < 1:
            raise ValueError("epochs, episodes_per_epoch and meta_batch must be >= 1")
        if not (self.lr_feature_map > 0 and self.lr_kernel > 0):
            raise ValueError("learning rates must be positive")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    grad_norm: float
    aborted: int
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    final_theta: np.ndarray | None = None

    def to_dict(self, timing=False):
        recs = []
        for r in self.records:
            d = asdict(r)
            if not timing:
                d.pop("wall_time")
            recs.append(d)
        theta = None if self.final_theta is None else [float(x) for x in self.final_theta]
        return {"epochs": recs, "final_theta": theta}


class TrainingFailed(RuntimeError):
    """Too many episodes aborted during training."""


def hyper_to_dict(hyper):
    fm, k = hyper.feature_map, hyper.kernel
    return {"kind": k.kind, "in_dim": fm.in_dim, "out_dim": fm.out_dim, "normalize": fm.normalize,
            "output_scale": k.output_scale, "lengthscale": k.lengthscale, "offset": k.offset,
            "tau": hyper.tau, "prior_mean_train": hyper.prior_mean_train,
            "prior_mean_test": hyper.prior_mean_test, "weights": fm.weights.tolist()}


def hyper_from_dict(d):
    W = np.asarray(d["weights"], dtype=float).reshape(d["out_dim"], d["in_dim"])
    kernel = KernelSpec(kind=d["kind"], output_scale=d["output_scale"],
                        lengthscale=d["lengthscale"], offset=d["offset"])
    return HyperParams(FeatureMap(W, d["normalize"]), kernel, tau=d["tau"],
                       prior_mean_train=d["prior_mean_train"], prior_mean_test=d["prior_mean_test"])


def save_checkpoint(path, hyper, theta, adam, epoch, log_, config_hash=""):
    """Write a JSON checkpoint.

    Fields: ``format``, ``version``, ``epoch`` (completed epochs),
    ``config_hash``, ``hyper`` (current parameters as named fields),
    ``theta`` (the optimizer's flat parameter vector), ``adam`` (moments and
    step count) and ``log`` (records so far). Floats are written with full
    ``repr`` precision, so loading reproduces the arrays bit for bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "config_hash": config_hash,
        "hyper": hyper_to_dict(hyper),
        "theta": [float(x) for x in theta],
        "adam": {"m": adam.m.tolist(), "v": adam.v.tolist(), "step": adam.step},
        "log": log_.to_dict(timing=False)["epochs"],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_checkpoint(path):
    """Read a checkpoint.

    Returns a dict with ``hyper``, ``theta``, ``adam``, ``epoch``, ``log`` and
    ``config_hash``. ``hyper`` is rebuilt from ``theta`` so that resuming
    continues from exactly the same vector.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
    a = doc["adam"]
    theta = np.asarray(doc["theta"], dtype=float)
    records = [EpochRecord(**r) for r in doc["log"]]
    return {
        "hyper": hyper_from_dict(doc["hyper"]).from_vector(theta),
        "theta": theta,
        "adam": AdamState(np.asarray(a["m"], dtype=float), np.asarray(a["v"], dtype=float), int(a["step"])),
        "epoch": int(doc["epoch"]),
        "log": TrainLog(records=records),
        "config_hash": doc.get("config_hash", ""),
    }


def train(gen, cfg, hyper, resume=None, workers=1, config_hash="", stop_after=None):
    """Meta-train the hyperparameters with Adam on finite-difference gradients.

    Each optimizer step draws ``cfg.meta_batch`` episodes (1 by default),
    averages their loss gradients and applies one Adam update. Episode
    ``i`` of epoch ``e`` uses the stream ``episode_rng(seed, e, i)``, so runs
    are reproducible and independent of ``workers``. Episodes whose inner
    loop fails numerically are skipped and counted.

    ``resume`` is a dict returned by ``load_checkpoint``. ``stop_after``
    ends the run after that many epochs (used to test resumption).
    Returns ``(hyper, TrainLog)``.
    """
    if not isinstance(gen, TaskGenerator):
        gen = TaskGenerator(gen)
    theta = hyper.to_vector()
    adam = AdamState.zeros(theta.size)
    tlog = TrainLog()
    start = 0
    if resume is not None:
        hyper = resume["hyper"]
        theta = resume["theta"].copy()
        adam = resume["adam"]
        tlog = TrainLog(records=list(resume["log"].records))
        start = resume["epoch"]
    lrs = learning_rates(hyper, cfg.lr_feature_map, cfg.lr_kernel)
    seen = start * cfg.episodes_per_epoch
    aborted_total = sum(r.aborted for r in tlog.records)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)

    for epoch in range(start, end):
        t0 = time.perf_counter()
        losses, norms, aborted = [], [], 0
        for first in range(0, cfg.episodes_per_epoch, cfg.meta_batch):
            grads = []
            for i in range(first, min(first + cfg.meta_batch, cfg.episodes_per_epoch)):
                rng = episode_rng(cfg.seed, epoch, i)
                episode = gen.sample(rng)
                loss_cfg = replace(cfg.loss, rng_seed=int(rng.integers(2 ** 31)))
                try:
                    rep = episode_grad(episode, hyper, loss_cfg, workers=workers)
                except EPISODE_FAILURES as exc:
                    aborted += 1
                    log.debug("epoch %d episode %d aborted: %s", epoch, i, exc)
                    continue
                grads.append(rep.grad)
                losses.append(rep.loss_value)
            if not grads:
                continue
            g = np.mean(grads, axis=0)
            norms.append(float(np.linalg.norm(g)))
            adam, theta = adam_step(adam, theta, g, lrs)
            hyper = hyper.from_vector(theta)
        seen += cfg.episodes_per_epoch
        aborted_total += aborted
        rec = EpochRecord(epoch=epoch + 1,
                          mean_loss=float(np.mean(losses)) if losses else float("nan"),
                          grad_norm=float(np.mean(norms)) if norms else float("nan"),
                          aborted=aborted, wall_time=time.perf_counter() - t0)
        tlog.records.append(rec)
        log.info("epoch %d loss %.4f |grad| %.4f aborted %d (%.1fs)",
                 rec.epoch, rec.mean_loss, rec.grad_norm, aborted, rec.wall_time)
        if aborted_total > cfg.max_abort_fraction * seen:
            raise TrainingFailed(f"{aborted_total} of {seen} episodes aborted "
                                 f"(limit {cfg.max_abort_fraction:.0%})")
        if cfg.checkpoint_path:
            save_checkpoint(cfg.checkpoint_path, hyper, theta, adam, epoch + 1, tlog, config_hash)
    tlog.final_theta = theta.copy()
    return hyper, tlog

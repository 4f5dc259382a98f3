"""Feature maps, base kernels, Gram construction and Cholesky helpers.

Most functions accept leading batch dimensions so a stack of hyperparameter
settings can be evaluated in one pass (the finite-difference gradient relies
on this).
"""

from dataclasses import dataclass, field, replace

import numpy as np

KERNEL_KINDS = ("cosine", "linear", "rbf", "matern52", "poly1", "poly2")
JITTER_LEVELS = (1e-6, 1e-5, 1e-4, 1e-3)


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a Gram matrix cannot be factorised even with jitter."""


@dataclass(frozen=True)
class FeatureMap:
    weights: np.ndarray
    normalize: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or min(w.shape) < 1:
            raise ValueError(f"feature map weights must be a non-empty matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("feature map weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @classmethod
    def random(cls, rng, in_dim=16, out_dim=8, normalize=False):
        return cls(rng.normal(scale=1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)), normalize)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "cosine"
    output_scale: float = 1.0
    lengthscale: float = 1.0
    offset: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")

    @property
    def has_lengthscale(self):
        return self.kind in ("rbf", "matern52")

    @property
    def has_offset(self):
        return self.kind in ("poly1", "poly2")


@dataclass(frozen=True)
class HyperParams:
    """Meta-learned parameters plus the fixed likelihood settings.

    The learnable part flattens to a vector laid out as
    ``[W.ravel(), log output_scale, (log lengthscale), (offset)]``;
    positive parameters live in log space so gradient steps keep them valid.
    """

    feature_map: FeatureMap
    kernel: KernelSpec = field(default_factory=KernelSpec)
    tau: float = 0.2
    prior_mean_train: float = 0.0
    prior_mean_test: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    @classmethod
    def init(cls, rng, kind="cosine", in_dim=16, out_dim=8, normalize=False, **kwargs):
        return cls(FeatureMap.random(rng, in_dim, out_dim, normalize), KernelSpec(kind=kind), **kwargs)

    @property
    def n_feature_params(self):
        return self.feature_map.weights.size

    def to_vector(self):
        k = self.kernel
        tail = [np.log(k.output_scale)]
        if k.has_lengthscale:
            tail.append(np.log(k.lengthscale))
        if k.has_offset:
            tail.append(k.offset)
        return np.concatenate([self.feature_map.weights.ravel(), tail])

    def param_names(self):
        fm = self.feature_map
        names = [f"W[{i},{j}]" for i in range(fm.out_dim) for j in range(fm.in_dim)]
        names.append("log_output_scale")
        if self.kernel.has_lengthscale:
            names.append("log_lengthscale")
        if self.kernel.has_offset:
            names.append("offset")
        return names

    def from_vector(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self.param_names()),):
            raise ValueError(f"expected {len(self.param_names())} parameters, got shape {theta.shape}")
        fm = self.feature_map
        nw = fm.weights.size
        W = theta[:nw].reshape(fm.weights.shape)
        rest = list(theta[nw:])
        kw = {"output_scale": float(np.exp(rest.pop(0)))}
        if self.kernel.has_lengthscale:
            kw["lengthscale"] = float(np.exp(rest.pop(0)))
        if self.kernel.has_offset:
            kw["offset"] = float(rest.pop(0))
        return replace(self, feature_map=FeatureMap(W, fm.normalize), kernel=replace(self.kernel, **kw))

    def unpack(self, thetas):
        """Split a stack of parameter vectors ``(..., P)`` into kernel arrays."""
        thetas = np.asarray(thetas, dtype=float)
        fm = self.feature_map
        nw = fm.weights.size
        W = thetas[..., :nw].reshape(thetas.shape[:-1] + fm.weights.shape)
        i = nw
        scale = np.exp(thetas[..., i])
        i += 1
        ls = np.full(thetas.shape[:-1], self.kernel.lengthscale)
        off = np.full(thetas.shape[:-1], self.kernel.offset)
        if self.kernel.has_lengthscale:
            ls = np.exp(thetas[..., i])
            i += 1
        if self.kernel.has_offset:
            off = thetas[..., i]
        return W, scale, ls, off


@dataclass(frozen=True)
class GramBundle:
    """Prior over the latent functions of one task.

    ``K`` is shared by all classes and ``chol`` factors ``K + jitter * I``,
    which is the covariance actually used for inference. ``mean`` is the
    ``(N, C)`` matrix whose columns are the per-class prior means.
    """

    K: np.ndarray
    chol: np.ndarray
    jitter: np.ndarray
    mean: np.ndarray

    @property
    def n(self):
        return self.K.shape[-1]

    @property
    def n_classes(self):
        return self.mean.shape[-1]

    @property
    def prior_cov(self):
        return self.K + self.jitter[..., None, None] * np.eye(self.n)


def _features(W, X, normalize):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != W.shape[-1]:
        raise ValueError(f"input dimension {X.shape[-1]} does not match feature map ({W.shape[-1]})")
    Z = X @ np.swapaxes(W, -1, -2)
    if normalize:
        Z = _unit_rows(Z)
    return Z


def _unit_rows(Z):
    norm = np.linalg.norm(Z, axis=-1, keepdims=True)
    zero = norm[..., 0] == 0
    out = Z / np.where(norm == 0, 1.0, norm)
    if zero.any():
        e1 = np.zeros(Z.shape[-1])
        e1[0] = 1.0
        out = np.where(zero[..., None], e1, out)
    return out


def map_features(fm, X):
    """Apply the feature map: ``X W^T``, row-normalised if requested."""
    return _features(fm.weights, X, fm.normalize)


def _sq_dist(Z1, Z2):
    d = (np.sum(Z1 * Z1, axis=-1)[..., :, None] + np.sum(Z2 * Z2, axis=-1)[..., None, :]
         - 2.0 * Z1 @ np.swapaxes(Z2, -1, -2))
    return np.maximum(d, 0.0)


def _gram(kind, Z1, Z2, scale, lengthscale, offset):
    scale = np.asarray(scale, dtype=float)[..., None, None]
    if kind == "cosine":
        k = _unit_rows(Z1) @ np.swapaxes(_unit_rows(Z2), -1, -2)
    elif kind == "linear":
        k = Z1 @ np.swapaxes(Z2, -1, -2)
    elif kind in ("poly1", "poly2"):
        p = 1 if kind == "poly1" else 2
        k = (Z1 @ np.swapaxes(Z2, -1, -2) + np.asarray(offset, dtype=float)[..., None, None]) ** p
    else:
        ls = np.asarray(lengthscale, dtype=float)[..., None, None]
        d2 = _sq_dist(Z1, Z2)
        if kind == "rbf":
            k = np.exp(-0.5 * d2 / ls ** 2)
        else:
            r = np.sqrt(5.0 * d2) / ls
            k = (1.0 + r + r * r / 3.0) * np.exp(-r)
    return scale * k


def gram(spec, Z1, Z2=None):
    """Kernel matrix between two sets of mapped features."""
    Z1 = np.asarray(Z1, dtype=float)
    Z2 = Z1 if Z2 is None else np.asarray(Z2, dtype=float)
    if Z1.shape[-1] != Z2.shape[-1]:
        raise ValueError(f"feature dimensions differ: {Z1.shape[-1]} vs {Z2.shape[-1]}")
    K = _gram(spec.kind, Z1, Z2, spec.output_scale, spec.lengthscale, spec.offset)
    if Z2 is Z1:
        K = 0.5 * (K + np.swapaxes(K, -1, -2))
    return K


def chol_jitter(K):
    """Cholesky factor of ``K + jitter * I`` with escalating jitter.

    Jitter runs through ``JITTER_LEVELS`` times the mean diagonal until the
    factorisation succeeds. Works on stacks of matrices, choosing the jitter
    per matrix. Returns ``(L, jitter)``.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim < 2 or K.shape[-1] != K.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {K.shape}")
    if not np.allclose(K, np.swapaxes(K, -1, -2), rtol=0, atol=1e-8 * max(1.0, np.abs(K).max(initial=0))):
        raise ValueError("matrix is not symmetric")
    n = K.shape[-1]
    eye = np.eye(n)
    scale = np.trace(K, axis1=-2, axis2=-1) / n
    scale = np.where(scale > 0, scale, 1.0)
    jit = JITTER_LEVELS[0] * scale
    try:
        return np.linalg.cholesky(K + jit[..., None, None] * eye), jit
    except np.linalg.LinAlgError:
        pass
    flat_K = K.reshape((-1, n, n))
    flat_s = np.atleast_1d(scale).ravel()
    L = np.empty_like(flat_K)
    used = np.empty(flat_K.shape[0])
    for i, (Ki, si) in enumerate(zip(flat_K, flat_s)):
        for level in JITTER_LEVELS:
            try:
                L[i] = np.linalg.cholesky(Ki + level * si * eye)
                used[i] = level * si
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise CholeskyError(f"Gram matrix not positive definite even with jitter {JITTER_LEVELS[-1]} x mean diagonal")
    return L.reshape(K.shape), used.reshape(np.shape(jit))


def tri_solve(L, B):
    """Solve ``L X = B`` for lower-triangular ``L`` (row-wise forward substitution).

    Broadcasts over leading dimensions; ``B`` may be a matrix or a vector.
    """
    L = np.asarray(L, dtype=float)
    B = np.asarray(B, dtype=float)
    vec = B.ndim == L.ndim - 1
    if vec:
        B = B[..., None]
    if B.shape[-2] != L.shape[-1]:
        raise ValueError(f"shape mismatch: factor {L.shape}, right-hand side {B.shape}")
    n = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:]
    X = np.empty(shape)
    for i in range(n):
        acc = B[..., i, :]
        if i:
            acc = acc - np.einsum("...k,...kj->...j", L[..., i, :i], X[..., :i, :])
        X[..., i, :] = acc / L[..., i, i, None]
    return X[..., 0] if vec else X


def tri_solve_upper(L, B):
    """Solve ``L^T X = B`` given the lower-triangular ``L``."""
    L = np.asarray(L, dtype=float)
    flip = L[..., ::-1, ::-1]
    B = np.asarray(B, dtype=float)
    if B.ndim == L.ndim - 1:
        return tri_solve(np.swapaxes(flip, -1, -2), B[..., ::-1])[..., ::-1]
    return tri_solve(np.swapaxes(flip, -1, -2), B[..., ::-1, :])[..., ::-1, :]


def solve_psd(chol, B):
    """``(L L^T)^{-1} B`` by two triangular solves."""
    return tri_solve_upper(chol, tri_solve(chol, B))


def build_bundle(hyper, X, prior_mean=0.0, n_classes=None, thetas=None):
    """Gram matrix, factor and prior mean for inputs ``X``.

    With ``thetas`` (a ``(..., P)`` stack of parameter vectors) the bundle is
    batched over the leading dimensions.
    """
    X = np.asarray(X, dtype=float)
    if n_classes is None:
        raise ValueError("n_classes is required")
    if thetas is None:
        Z = map_features(hyper.feature_map, X)
        K = gram(hyper.kernel, Z)
    else:
        W, scale, ls, off = hyper.unpack(thetas)
        Z = _features(W, X, hyper.feature_map.normalize)
        K = _gram(hyper.kernel.kind, Z, Z, scale, ls, off)
        K = 0.5 * (K + np.swapaxes(K, -1, -2))
    L, jit = chol_jitter(K)
    mean = np.full((X.shape[0], n_classes), float(prior_mean))
    return GramBundle(K=K, chol=L, jitter=np.asarray(jit), mean=mean)


def cross_gram(hyper, X_query, X_support, jitter):
    """Query/support covariances consistent with the jittered support prior.

    The jitter acts as a nugget on coinciding inputs, so a query that repeats
    a support point sees exactly the support prior covariance. Returns
    ``(k_qs, k_qq_diag)``.
    """
    Xq = np.asarray(X_query, dtype=float)
    Xs = np.asarray(X_support, dtype=float)
    fm = hyper.feature_map
    Zq = map_features(fm, Xq)
    Zs = map_features(fm, Xs)
    k_qs = gram(hyper.kernel, Zq, Zs)
    same = np.all(Xq[:, None, :] == Xs[None, :, :], axis=-1)
    k_qs = k_qs + float(jitter) * same
    zq = Zq[:, None, :]
    k_qq = gram(hyper.kernel, zq, zq)[:, 0, 0] + float(jitter)
    return k_qs, k_qq


def query_gram(hyper, X_query, jitter):
    """Full query covariance with the same nugget convention."""
    Zq = map_features(hyper.feature_map, np.asarray(X_query, dtype=float))
    Kq = gram(hyper.kernel, Zq)
    Xq = np.asarray(X_query, dtype=float)
    same = np.all(Xq[:, None, :] == Xq[None, :, :], axis=-1)
    return Kq + float(jitter) * same

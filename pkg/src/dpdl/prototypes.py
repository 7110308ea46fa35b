"""Mixture prototypes over flattened feature vectors.

A prototype set is a C-component Gaussian mixture with diagonal covariance.
Training works on unconstrained parameters (logit weights, means, log
variances); ``mgp_realize`` maps them onto the simplex / positive cone.
Initial means come from a small Lloyd vector quantizer seeded the
k-means++ way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MGPParams:
    """Unconstrained prototype parameters.

    a: (C,) mixture logits, weights are softmax(a)
    m: (C, D) component means, used as-is
    s: (C, D) log variances, variances are exp(s)
    epsilon: diffusion scale of the bridge these prototypes parameterize
    """

    a: np.ndarray
    m: np.ndarray
    s: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.a.ndim != 1 or self.m.ndim != 2 or self.s.ndim != 2:
            raise ValidationError("expected a: (C,), m: (C, D), s: (C, D)")
        c = self.a.shape[0]
        if c < 1 or self.m.shape[0] != c or self.s.shape != self.m.shape:
            raise ValidationError(
                f"inconsistent parameter shapes a={self.a.shape} m={self.m.shape} s={self.s.shape}")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ValidationError(f"epsilon must be a positive finite float, got {self.epsilon}")

    @property
    def n_components(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class MGP:
    """Realized mixture: simplex weights, means, positive diagonal variances."""

    alpha: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float

    @property
    def n_components(self) -> int:
        return self.alpha.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


def mgp_new(init, epsilon: float) -> MGPParams:
    """Fresh parameters: uniform weights, unit variances, means = codebook.

    ``init`` may be a PrototypeInit or a bare (C, D) codebook array.
    """
    codebook = init.codebook if isinstance(init, PrototypeInit) else init
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2:
        raise ValidationError(f"codebook must be (C, D), got shape {codebook.shape}")
    c, d = codebook.shape
    return MGPParams(a=np.zeros(c), m=codebook.copy(), s=np.zeros((c, d)), epsilon=float(epsilon))


def mgp_realize(params: MGPParams) -> MGP:
    """Map unconstrained parameters to the constrained mixture.

    Weights are a numerically shifted softmax so they sum to one exactly up
    to rounding; variances are exponentials, hence always positive.
    """
    if not (np.all(np.isfinite(params.a)) and np.all(np.isfinite(params.m)) and np.all(np.isfinite(params.s))):
        raise ValidationError("prototype parameters contain non-finite values")
    shifted = params.a - params.a.max()
    weights = np.exp(shifted)
    alpha = weights / weights.sum()
    return MGP(alpha=alpha, mu=params.m.copy(), sigma=np.exp(params.s), epsilon=params.epsilon)


def diag_mixture_log_density(log_weights: np.ndarray, means: np.ndarray,
                             variances: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Log density of a diagonal-covariance Gaussian mixture.

    Accepts one point (D,) or a batch (N, D); returns a float or (N,)
    array accordingly.  Shared by the prototype mixture and the various
    conditional mixtures derived from it.
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = points[None, :] if single else points
    dim = means.shape[1]
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise ValidationError(f"points must have dimension {dim}, got shape {points.shape}")
    diff = pts[:, None, :] - means[None, :, :]             # (N, C, D)
    log_comp = -0.5 * np.sum(diff * diff / variances[None, :, :], axis=2)
    log_comp -= 0.5 * np.sum(np.log(variances), axis=1)[None, :]
    log_comp -= 0.5 * dim * _LOG_2PI
    out = logsumexp(log_comp + log_weights[None, :], axis=1)
    return float(out[0]) if single else out


def mgp_log_density(mgp: MGP, points: np.ndarray) -> np.ndarray:
    """Mixture log density at one point (D,) or a batch (N, D)."""
    return diag_mixture_log_density(np.log(mgp.alpha), mgp.mu, mgp.sigma, points)


@dataclass(frozen=True)
class PrototypeInit:
    """Result of the Lloyd quantizer: codebook plus diagnostics.

    ``errors`` holds the mean squared quantization error after each
    assignment pass; Lloyd never increases it.
    """

    codebook: np.ndarray
    assignment: np.ndarray
    quantization_error: float
    errors: tuple[float, ...]


def vq_init(features: np.ndarray, n_codewords: int, max_iters: int = 100,
            seed: int = 0) -> PrototypeInit:
    """Quantize feature vectors with k-means++ seeding and Lloyd updates.

    Empty clusters are reseeded to the point farthest from its codeword.
    Stops early once assignments stop changing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError(f"features must be a nonempty (N, D) array, got shape {x.shape}")
    n, _ = x.shape
    if not 1 <= n_codewords <= n:
        raise ValidationError(f"need 1 <= n_codewords <= {n}, got {n_codewords}")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be positive, got {max_iters}")
    rng = np.random.default_rng(seed)
    codebook = _kmeans_pp_seed(x, n_codewords, rng)
    assignment = np.zeros(n, dtype=np.int64)
    errors: list[float] = []
    for _ in range(max_iters):
        dist2 = _pairwise_sq_dists(x, codebook)
        new_assignment = np.argmin(dist2, axis=1)
        errors.append(float(np.mean(dist2[np.arange(n), new_assignment])))
        converged = bool(np.array_equal(new_assignment, assignment)) and len(errors) > 1
        assignment = new_assignment
        if converged:
            break
        counts = np.bincount(assignment, minlength=n_codewords)
        for k in range(n_codewords):
            if counts[k] > 0:
                codebook[k] = x[assignment == k].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            residual = dist2[np.arange(n), assignment].copy()
            for k in empties:
                far = int(np.argmax(residual))
                codebook[k] = x[far]
                residual[far] = -1.0
    return PrototypeInit(
        codebook=codebook,
        assignment=assignment,
        quantization_error=errors[-1],
        errors=tuple(errors),
    )


def _kmeans_pp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    codebook = np.empty((k, x.shape[1]), dtype=np.float64)
    codebook[0] = x[int(rng.integers(0, n))]
    closest = np.sum((x - codebook[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # All remaining points coincide with chosen codewords.
            codebook[j] = x[int(rng.integers(0, n))]
            continue
        probs = closest / total
        idx = int(rng.choice(n, p=probs))
        codebook[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - codebook[j]) ** 2, axis=1))
    return codebook


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # |x - y|^2 expanded; clip guards tiny negative values from cancellation.
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ y.T
        + np.sum(y * y, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)

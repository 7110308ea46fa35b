"""Training losses and their analytic gradients.

Two families live here.  The prototype-learning losses push the tilted
partition of normal batches up and the prototypes' self-likelihood down
(and the reverse for anomaly batches).  The dispersion loss penalizes
clumping of unit-normalized feature vectors on the hypersphere.

All gradients are closed-form expressions with respect to the
unconstrained parameters (logits, means, log variances), so no autodiff
machinery is involved anywhere; the test suite checks every formula
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateInputError, ValidationError
from .prototypes import MGPParams

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DPLLoss:
    """Scalar loss with gradients for logits a, means m, log-variances s."""

    value: float
    grad_a: np.ndarray
    grad_m: np.ndarray
    grad_s: np.ndarray


@dataclass(frozen=True)
class DFLLoss:
    """Scalar dispersion loss and its tangent gradient at the unit inputs."""

    value: float
    grad: np.ndarray


def _check_batch(params: MGPParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ValidationError(f"batch must be a nonempty (N, D) array, got shape {batch.shape}")
    if batch.shape[1] != params.dim:
        raise ValidationError(f"batch dimension {batch.shape[1]} != parameter dimension {params.dim}")
    if not np.all(np.isfinite(batch)):
        raise ValidationError("batch contains non-finite values")
    return batch


def _realized(params: MGPParams):
    shifted = params.a - params.a.max()
    alpha = np.exp(shifted)
    alpha /= alpha.sum()
    return alpha, params.m, np.exp(params.s)


def _partition_term(params: MGPParams, batch: np.ndarray):
    """Mean tilted log-partition over the batch, with raw-parameter grads."""
    alpha, mu, sigma = _realized(params)
    e = params.epsilon
    n = batch.shape[0]
    logits = (
        np.log(alpha)[None, :]
        + batch @ mu.T / e
        + (batch * batch) @ sigma.T / (2.0 * e * e)
    )                                                       # (N, C)
    norms = logsumexp(logits, axis=1)
    value = float(np.mean(norms))
    w = np.exp(logits - norms[:, None])                     # (N, C) responsibilities
    grad_a = w.mean(axis=0) - alpha
    grad_m = w.T @ batch / (n * e)
    grad_s = sigma * (w.T @ (batch * batch)) / (2.0 * n * e * e)
    return value, grad_a, grad_m, grad_s


def _self_likelihood_term(params: MGPParams):
    """Mean mixture log-density at the prototype means, with raw-parameter grads.

    The means appear both as evaluation points and as component centers,
    so the mean gradient collects two flows.
    """
    alpha, mu, sigma = _realized(params)
    c = params.n_components
    diff = mu[:, None, :] - mu[None, :, :]                  # (c_eval, k_comp, D)
    energy = (
        np.log(alpha)[None, :]
        - 0.5 * np.sum(np.log(2.0 * np.pi * sigma), axis=1)[None, :]
        - 0.5 * np.sum(diff * diff / sigma[None, :, :], axis=2)
    )                                                       # (c_eval, k_comp)
    norms = logsumexp(energy, axis=1)
    value = float(np.mean(norms))
    q = np.exp(energy - norms[:, None])                     # (c_eval, k_comp)
    grad_a = q.mean(axis=0) - alpha
    scaled = diff / sigma[None, :, :]                       # (c, k, D)
    grad_m = (
        -np.einsum("ck,ckd->cd", q, scaled)
        + np.einsum("ck,ckd->kd", q, scaled)
    ) / c
    grad_s = -0.5 * np.einsum("ck,ckd->kd", q, 1.0 - diff * diff / sigma[None, :, :]) / c
    return value, grad_a, grad_m, grad_s


def loss_dpl_normal(params: MGPParams, batch: np.ndarray) -> DPLLoss:
    """Prototype loss for a batch of normal feature vectors.

    Mean tilted log-partition over the batch minus the prototypes' own
    mean log-likelihood; descending it pulls normal mass toward the
    prototypes while keeping the prototypes spread out.
    """
    batch = _check_batch(params, batch)
    pv, pa, pm, ps = _partition_term(params, batch)
    sv, sa, sm, ss = _self_likelihood_term(params)
    return DPLLoss(value=pv - sv, grad_a=pa - sa, grad_m=pm - sm, grad_s=ps - ss)


def loss_dpl_anomaly(params: MGPParams, batch: np.ndarray) -> DPLLoss:
    """Prototype loss for a batch of anomalous feature vectors (sign-flipped)."""
    batch = _check_batch(params, batch)
    pv, pa, pm, ps = _partition_term(params, batch)
    sv, sa, sm, ss = _self_likelihood_term(params)
    return DPLLoss(value=sv - pv, grad_a=sa - pa, grad_m=sm - pm, grad_s=ss - ps)


def unitize(x: np.ndarray) -> np.ndarray:
    """Project a vector onto the unit sphere; zero vectors are rejected."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"unitize expects a vector, got shape {x.shape}")
    norm = float(np.linalg.norm(x))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInputError("cannot unitize a zero or non-finite vector")
    return x / norm


def loss_dfl(units: np.ndarray, kappa: float) -> DFLLoss:
    """Dispersion loss over unit feature vectors.

    For each anchor the loss is the log of the mean exponentiated cosine
    similarity to the other vectors at temperature kappa, averaged over
    anchors.  Identical directions give kappa, orthogonal ones 0,
    antipodal ones -kappa.  The gradient is projected onto each anchor's
    tangent plane, which makes it directly comparable to finite
    differences taken through a renormalization.
    """
    units = np.asarray(units, dtype=np.float64)
    if units.ndim != 2 or units.shape[0] < 2:
        raise ValidationError(f"need at least two unit vectors, got shape {units.shape}")
    if not (np.isfinite(kappa) and kappa >= 0):
        raise ValidationError(f"kappa must be a nonnegative finite float, got {kappa}")
    norms = np.linalg.norm(units, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-8:
        raise ValidationError("dispersion loss requires unit-normalized rows")
    u = units.shape[0]
    gram = kappa * (units @ units.T)
    np.fill_diagonal(gram, -np.inf)
    row_lse = logsumexp(gram, axis=1)
    value = float(np.mean(row_lse)) - float(np.log(u - 1))
    beta = np.exp(gram - row_lse[:, None])                  # rows sum to 1, diag 0
    grad = (kappa / u) * ((beta + beta.T) @ units)
    grad -= np.sum(grad * units, axis=1, keepdims=True) * units
    return DFLLoss(value=value, grad=grad)

"""Closed-form entropic bridge between data points and the prototype mixture.

With a diagonal Gaussian mixture as the target marginal and a Brownian
reference of variance ``epsilon`` per unit time, the static coupling and
the time-dependent drift both stay inside the mixture family, so every
quantity here is exact up to floating point:

* ``log_partition`` integrates the exponentially tilted mixture in closed
  form (each Gaussian contributes its moment-generating function).
* ``conditional_plan`` gives the endpoint law given a source point as a
  reweighted, shifted mixture with unchanged per-component variances.
* ``drift`` evaluates the optimal control as a posterior-mean contraction:
  each component acquires diagonal precision ``t/(eps*(1-t)) + 1/sigma_c``
  and linear term ``x/(eps*(1-t)) + mu_c/sigma_c``.

Brute-force checks live alongside: log-space trapezoid quadrature for the
partition and potential integrals (dimension 1 and 2 only) and a log-domain
Sinkhorn solver for the discrete coupling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, NumericError, UnsupportedError, ValidationError
from .prototypes import MGP, diag_mixture_log_density, mgp_log_density

_LOG_2PI = float(np.log(2.0 * np.pi))


def _as_point(mgp: MGP, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != mgp.dim:
        raise ValidationError(f"point must have shape ({mgp.dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("point contains non-finite values")
    return x


def tilted_log_weights(mgp: MGP, x: np.ndarray) -> np.ndarray:
    """Per-component log mass of the tilted mixture, before normalization.

    Component c contributes log alpha_c + mu_c.x/eps + x.(sigma_c*x)/(2 eps^2),
    the log moment-generating function of N(mu_c, diag sigma_c) at x/eps.
    """
    x = _as_point(mgp, x)
    e = mgp.epsilon
    return np.log(mgp.alpha) + (mgp.mu @ x) / e + (mgp.sigma @ (x * x)) / (2.0 * e * e)


def log_partition(mgp: MGP, x: np.ndarray) -> float:
    """log of the tilted-mixture normalizer at source point x."""
    return float(logsumexp(tilted_log_weights(mgp, x)))


@dataclass(frozen=True)
class CondGMM:
    """A conditional endpoint law: Gaussian mixture with diagonal variances."""

    weights: np.ndarray    # (C,) on the simplex
    means: np.ndarray      # (C, D)
    variances: np.ndarray  # (C, D) positive
    x: np.ndarray          # (D,) the conditioning point

    def log_density(self, points: np.ndarray) -> np.ndarray:
        return diag_mixture_log_density(np.log(self.weights), self.means, self.variances, points)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


def conditional_plan(mgp: MGP, x: np.ndarray) -> CondGMM:
    """Endpoint distribution of the coupling given source point x.

    Weights are the normalized tilted masses; component c keeps variance
    sigma_c and shifts its mean to mu_c + sigma_c * x / eps.
    """
    x = _as_point(mgp, x)
    lw = tilted_log_weights(mgp, x)
    weights = np.exp(lw - logsumexp(lw))
    weights = weights / weights.sum()
    means = mgp.mu + mgp.sigma * (x / mgp.epsilon)[None, :]
    return CondGMM(weights=weights, means=means, variances=mgp.sigma.copy(), x=x)


def sample_endpoint(cond: CondGMM, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw an endpoint from the conditional plan.

    Without a generator this is the deterministic posterior mean (the
    weight-averaged component mean); with one it samples a component and
    then a Gaussian draw.
    """
    if rng is None:
        return cond.weights @ cond.means
    c = int(rng.choice(cond.weights.shape[0], p=cond.weights))
    return cond.means[c] + np.sqrt(cond.variances[c]) * rng.standard_normal(cond.means.shape[1])


def posterior_mode_index(mgp: MGP, psi: np.ndarray) -> int:
    """Index of the component whose density is largest at psi.

    Mixture weights are deliberately ignored; ties resolve to the lowest
    index.
    """
    psi = _as_point(mgp, psi)
    diff = psi[None, :] - mgp.mu
    scores = -0.5 * np.sum(diff * diff / mgp.sigma + np.log(mgp.sigma), axis=1)
    return int(np.argmax(scores))


def _posterior_terms(mgp: MGP, xs: np.ndarray, t: float):
    """Batched component posteriors of the terminal point given state x at time t.

    Returns (log_resp (B, C) normalized, means (B, C, D), variances (C, D)).
    """
    e = mgp.epsilon
    tau = e * (1.0 - t)
    prec = t / tau + 1.0 / mgp.sigma                       # (C, D)
    lin = xs[:, None, :] / tau + (mgp.mu / mgp.sigma)[None, :, :]   # (B, C, D)
    means = lin / prec[None, :, :]
    log_resp = (
        np.log(mgp.alpha)[None, :]
        - 0.5 * np.sum(np.log(mgp.sigma), axis=1)[None, :]
        - 0.5 * np.sum(np.log(prec), axis=1)[None, :]
        - 0.5 * np.sum(mgp.mu * mgp.mu / mgp.sigma, axis=1)[None, :]
        + 0.5 * np.sum(lin * lin / prec[None, :, :], axis=2)
    )
    log_resp = log_resp - logsumexp(log_resp, axis=1, keepdims=True)
    return log_resp, means, 1.0 / prec


def _check_time(t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t < 0.0:
        raise ValidationError(f"time must lie in [0, 1), got {t}")
    if t >= 1.0:
        raise DomainError(f"drift is undefined at t >= 1, got t={t}")
    return t


def drift_batch(mgp: MGP, xs: np.ndarray, t: float) -> np.ndarray:
    """Optimal drift evaluated at a batch of states xs with shape (B, D)."""
    t = _check_time(t)
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != mgp.dim:
        raise ValidationError(f"states must have shape (B, {mgp.dim}), got {xs.shape}")
    log_resp, means, _ = _posterior_terms(mgp, xs, t)
    resp = np.exp(log_resp)
    posterior_mean = np.einsum("bc,bcd->bd", resp, means)
    return (posterior_mean - xs) / (1.0 - t)


def drift(mgp: MGP, x: np.ndarray, t: float) -> np.ndarray:
    """Optimal drift at a single state; see drift_batch."""
    x = _as_point(mgp, x)
    return drift_batch(mgp, x[None, :], t)[0]


def terminal_plan(mgp: MGP, x: np.ndarray, t: float) -> CondGMM:
    """Law of the terminal point given state x at time t.

    At t=0 this coincides with conditional_plan; for t > 0 the component
    variances shrink toward zero like eps*(1-t)/t per unit prior variance.
    """
    x = _as_point(mgp, x)
    t = _check_time(t)
    log_resp, means, variances = _posterior_terms(mgp, x[None, :], t)
    return CondGMM(weights=np.exp(log_resp[0]), means=means[0],
                   variances=np.broadcast_to(variances, means[0].shape).copy(), x=x)


@dataclass(frozen=True)
class Trajectory:
    """Simulated path: times (n+1,), states (n+1, D) or (n+1, B, D)."""

    times: np.ndarray
    states: np.ndarray


def simulate_sde_batch(mgp: MGP, x0: np.ndarray, n_steps: int,
                       rng: np.random.Generator) -> Trajectory:
    """Euler-Maruyama over [0, t_{n-1}] plus an exact final transition.

    The last step draws the terminal point from the conditional law of the
    endpoint given the penultimate state, so discretization bias enters
    only through the Euler stretch.  With n_steps=1 the draw is exact.
    """
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[1] != mgp.dim:
        raise ValidationError(f"x0 must have shape (B, {mgp.dim}), got {x0.shape}")
    batch, dim = x0.shape
    dt = 1.0 / n_steps
    times = np.arange(n_steps + 1) / n_steps
    states = np.empty((n_steps + 1, batch, dim))
    states[0] = x0
    x = x0.copy()
    for k in range(n_steps - 1):
        g = drift_batch(mgp, x, k * dt)
        x = x + g * dt + np.sqrt(mgp.epsilon * dt) * rng.standard_normal((batch, dim))
        states[k + 1] = x
    log_resp, means, variances = _posterior_terms(mgp, x, (n_steps - 1) * dt)
    resp = np.exp(log_resp)
    # Vectorized categorical draw per row, then the Gaussian component draw.
    cum = np.cumsum(resp, axis=1)
    u = rng.random(batch)
    idx = np.minimum((cum < u[:, None]).sum(axis=1), resp.shape[1] - 1)
    terminal = means[np.arange(batch), idx] + np.sqrt(variances[idx]) * rng.standard_normal((batch, dim))
    states[n_steps] = terminal
    return Trajectory(times=times, states=states)


def simulate_sde(mgp: MGP, x0: np.ndarray, n_steps: int,
                 rng: np.random.Generator) -> Trajectory:
    """Single-path version of simulate_sde_batch; states come back (n+1, D)."""
    x0 = _as_point(mgp, x0)
    traj = simulate_sde_batch(mgp, x0[None, :], n_steps, rng)
    return Trajectory(times=traj.times, states=traj.states[:, 0, :])


# ---------------------------------------------------------------------------
# Brute-force oracles.


def _axis_ranges(centers: list[np.ndarray], spreads: list[np.ndarray],
                 dim: int, padding: float) -> list[tuple[float, float]]:
    ranges = []
    for j in range(dim):
        lo = min(float(np.min(c[..., j] - padding * s[..., j])) for c, s in zip(centers, spreads))
        hi = max(float(np.max(c[..., j] + padding * s[..., j])) for c, s in zip(centers, spreads))
        ranges.append((lo, hi))
    return ranges


def _axis_nodes(lo: float, hi: float, min_width: float, n_nodes: int) -> np.ndarray:
    # Resolve the narrowest Gaussian with ~8 nodes per standard deviation.
    needed = int(np.ceil((hi - lo) / (min_width / 8.0))) + 1
    count = max(n_nodes, needed)
    if count > 4_000_000:
        raise NumericError(f"quadrature grid would need {count} nodes; integrand too stiff")
    return np.linspace(lo, hi, count)


def _trapezoid_log_weights(grid: np.ndarray) -> np.ndarray:
    step = grid[1] - grid[0]
    w = np.full(grid.shape[0], step)
    w[0] *= 0.5
    w[-1] *= 0.5
    return np.log(w)


def quadrature_oracle_log_partition(mgp: MGP, x: np.ndarray,
                                    n_nodes: int = 4096, padding: float = 12.0) -> float:
    """Trapezoid estimate of log_partition for dimension 1 or 2.

    The grid covers both the prototype means and the tilted means
    mu_c + sigma_c*x/eps, each padded by ``padding`` standard deviations;
    for small eps the tilted mass sits far from the prototypes and a grid
    around the prototypes alone would miss it entirely.
    """
    x = _as_point(mgp, x)
    if mgp.dim > 2:
        raise UnsupportedError(f"quadrature oracle supports dimension <= 2, got {mgp.dim}")
    root_sigma = np.sqrt(mgp.sigma)
    tilted = mgp.mu + mgp.sigma * (x / mgp.epsilon)[None, :]
    ranges = _axis_ranges([mgp.mu, tilted], [root_sigma, root_sigma], mgp.dim, padding)
    min_width = float(np.min(root_sigma))

    def log_integrand(points: np.ndarray) -> np.ndarray:
        return (points @ x) / mgp.epsilon + mgp_log_density(mgp, points)

    return _log_integral(log_integrand, ranges, min_width, n_nodes)


def quadrature_oracle_log_bridge_potential(mgp: MGP, x: np.ndarray, t: float,
                                           n_nodes: int = 4096, padding: float = 12.0) -> float:
    """Trapezoid estimate of log E_{y ~ N(x, eps(1-t)I)}[exp(|y|^2/(2 eps)) phi(y)].

    The drift equals eps times the spatial gradient of this quantity, which
    is what the finite-difference cross-check differentiates.
    """
    x = _as_point(mgp, x)
    t = _check_time(t)
    if mgp.dim > 2:
        raise UnsupportedError(f"quadrature oracle supports dimension <= 2, got {mgp.dim}")
    tau = mgp.epsilon * (1.0 - t)
    log_resp, post_means, post_vars = _posterior_terms(mgp, x[None, :], t)
    root_sigma = np.sqrt(mgp.sigma)
    centers = [mgp.mu, post_means[0], x[None, :]]
    spreads = [root_sigma, np.sqrt(post_vars), np.full((1, mgp.dim), np.sqrt(tau))]
    ranges = _axis_ranges(centers, spreads, mgp.dim, padding)
    min_width = min(float(np.min(np.sqrt(post_vars))), float(np.min(root_sigma)), float(np.sqrt(tau)))

    def log_integrand(points: np.ndarray) -> np.ndarray:
        diff = points - x[None, :]
        log_kernel = -0.5 * np.sum(diff * diff, axis=1) / tau - 0.5 * mgp.dim * (_LOG_2PI + np.log(tau))
        return log_kernel + 0.5 * np.sum(points * points, axis=1) / mgp.epsilon + mgp_log_density(mgp, points)

    return _log_integral(log_integrand, ranges, min_width, n_nodes)


def _log_integral(log_integrand, ranges, min_width: float, n_nodes: int) -> float:
    grids = [_axis_nodes(lo, hi, min_width, n_nodes) for lo, hi in ranges]
    log_w = [_trapezoid_log_weights(g) for g in grids]
    if len(grids) == 1:
        vals = log_integrand(grids[0][:, None]) + log_w[0]
        return float(logsumexp(vals))
    chunk_totals = []
    chunk = max(1, 8_000_000 // grids[1].shape[0])
    for start in range(0, grids[0].shape[0], chunk):
        rows = grids[0][start:start + chunk]
        yy, xx = np.meshgrid(grids[1], rows)
        pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
        vals = log_integrand(pts).reshape(rows.shape[0], grids[1].shape[0])
        vals = vals + log_w[0][start:start + chunk][:, None] + log_w[1][None, :]
        chunk_totals.append(logsumexp(vals))
    return float(logsumexp(np.array(chunk_totals)))


@dataclass(frozen=True)
class SinkhornResult:
    """Discrete coupling from the iterative scaling solver.

    ``marginal_residual`` is the max-norm violation of the two marginal
    constraints at exit; iteration stops at ``tol`` or after ``n_iters``
    rounds, whichever comes first, and never raises on slow convergence.
    """

    plan: np.ndarray
    marginal_residual: float
    iterations: int


def sinkhorn_eot_oracle(source: np.ndarray, target: np.ndarray, epsilon: float,
                        n_iters: int = 5000, tol: float = 1e-12) -> SinkhornResult:
    """Log-domain Sinkhorn for the entropic coupling of two uniform clouds.

    Cost is half squared Euclidean distance, matching the Brownian
    reference up to constants, so for large samples the row conditionals
    of the returned plan approximate the model's conditional plan.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValidationError(f"point clouds must share dimension, got {source.shape} and {target.shape}")
    if source.shape[0] < 1 or target.shape[0] < 1:
        raise ValidationError("point clouds must be nonempty")
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    n, m = source.shape[0], target.shape[0]
    cost = 0.5 * (
        np.sum(source * source, axis=1)[:, None]
        - 2.0 * source @ target.T
        + np.sum(target * target, axis=1)[None, :]
    )
    log_kernel = -cost / epsilon
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    u = np.zeros(n)
    v = np.zeros(m)
    residual = np.inf
    done = 0
    for it in range(1, n_iters + 1):
        u = log_a - logsumexp(log_kernel + v[None, :], axis=1)
        v = log_b - logsumexp(log_kernel + u[:, None], axis=0)
        done = it
        if it % 10 == 0 or it == n_iters:
            plan = np.exp(u[:, None] + log_kernel + v[None, :])
            residual = max(
                float(np.abs(plan.sum(axis=1) - np.exp(log_a)).max()),
                float(np.abs(plan.sum(axis=0) - np.exp(log_b)).max()),
            )
            if residual < tol:
                break
    plan = np.exp(u[:, None] + log_kernel + v[None, :])
    residual = max(
        float(np.abs(plan.sum(axis=1) - np.exp(log_a)).max()),
        float(np.abs(plan.sum(axis=0) - np.exp(log_b)).max()),
    )
    return SinkhornResult(plan=plan, marginal_residual=residual, iterations=done)

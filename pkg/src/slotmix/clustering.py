"""Classic, non-learnable clustering: diagonal-covariance GMM via EM and soft k-means.

These serve two purposes: vanilla baselines with all trainable layers
removed, and reference implementations for checking the learnable modules
when their trainable parts are switched off. Everything here is plain numpy
on single scenes (x is N x D).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NonFiniteValue, ShapeError

VAR_FLOOR = 1e-6
EMPTY_TOL = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmState:
    mu: np.ndarray   # (K, D)
    var: np.ndarray  # (K, D) diagonal covariances
    pi: np.ndarray   # (K,)
    degenerate: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.mu.ndim != 2 or self.var.shape != self.mu.shape or self.pi.shape != (self.mu.shape[0],):
            raise ShapeError("GmmState", self.mu.shape, self.var.shape, self.pi.shape)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.mu.shape[0], dtype=bool)

    @property
    def K(self):
        return self.mu.shape[0]

    def copy(self):
        return GmmState(self.mu.copy(), self.var.copy(), self.pi.copy(), self.degenerate.copy())


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteValue(f"{name}: non-finite input")


def log_gaussian(x, mu, var):
    """(N, K) matrix of diagonal Gaussian log-densities, computed directly."""
    diff = x[:, None, :] - mu[None, :, :]
    return -0.5 * ((diff * diff) / var[None] + np.log(var)[None] + LOG_2PI).sum(axis=-1)


def _log_joint(x, state):
    with np.errstate(divide="ignore"):
        return log_gaussian(x, state.mu, state.var) + np.log(state.pi)[None, :]


def gmm_e_step(x, state):
    """Posterior responsibilities gamma[i, k] = p(component k | x_i)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.mu.shape[1]:
        raise ShapeError("gmm_e_step", x.shape, state.mu.shape)
    _check_finite("gmm_e_step", x, state.mu, state.var, state.pi)
    if np.any(state.var <= 0):
        raise ContractViolation("gmm_e_step: variances must be positive")
    pi = state.pi / state.pi.sum()
    with np.errstate(divide="ignore"):
        a = log_gaussian(x, state.mu, state.var) + np.log(pi)[None, :]
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def log_likelihood(x, state):
    """Observed-data log-likelihood sum_i log sum_k pi_k N(x_i | mu_k, var_k)."""
    a = _log_joint(np.asarray(x, dtype=np.float64), state)
    m = a.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(a - m).sum(axis=1))).sum())


def gmm_m_step(x, gamma, prev=None):
    """Maximum-likelihood mixture parameters for fixed responsibilities.

    Components whose total responsibility is below 1e-12 keep their previous
    mean and variance (from ``prev``) and are flagged in ``degenerate``.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape[0] != x.shape[0]:
        raise ShapeError("gmm_m_step", x.shape, gamma.shape)
    n, d = x.shape
    k = gamma.shape[1]
    nk = gamma.sum(axis=0)
    pi = nk / n
    degenerate = nk < EMPTY_TOL
    safe = np.where(degenerate, 1.0, nk)
    mu = (gamma.T @ x) / safe[:, None]
    diff = x[:, None, :] - mu[None, :, :]
    var = np.einsum("nk,nkd->kd", gamma, diff * diff) / safe[:, None]
    var = np.maximum(var, VAR_FLOOR)
    if degenerate.any():
        if prev is not None:
            mu[degenerate] = prev.mu[degenerate]
            var[degenerate] = prev.var[degenerate]
        else:
            mu[degenerate] = 0.0
            var[degenerate] = 1.0
    return GmmState(mu, var, pi, degenerate)


def gmm_fit(x, init, iterations):
    """Run EM; returns (state, gamma, trace).

    ``trace[t]`` is the log-likelihood after t iterations (trace[0] is the
    initial state), so ``len(trace) == iterations + 1``. ``gamma`` are the
    responsibilities computed at the last E-step.
    """
    if iterations < 1:
        raise ContractViolation("gmm_fit: iterations must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    state = init.copy()
    trace = [log_likelihood(x, state)]
    flags = np.zeros(state.K, dtype=bool)
    gamma = None
    for _ in range(iterations):
        gamma = gmm_e_step(x, state)
        state = gmm_m_step(x, gamma, prev=state)
        flags |= state.degenerate
        trace.append(log_likelihood(x, state))
    state.degenerate = flags
    return state, gamma, np.array(trace)


def soft_kmeans_step(x, centers, beta, similarity="euclidean"):
    """One soft k-means update.

    Assignments are a softmax over clusters of ``-beta * ||x - c||^2``
    (``similarity="euclidean"``) or ``beta * x . c`` (``"dot"``, the
    projection-free attention form). New centers are assignment-weighted
    means with weights renormalized over points per cluster. Returns
    ``(centers, assignments, empty)``; empty clusters keep their center.
    """
    if beta <= 0:
        raise ContractViolation("soft_kmeans_step: beta must be positive")
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if x.ndim != 2 or centers.ndim != 2 or x.shape[1] != centers.shape[1]:
        raise ShapeError("soft_kmeans_step", x.shape, centers.shape)
    if similarity == "euclidean":
        diff = x[:, None, :] - centers[None, :, :]
        logits = -beta * (diff * diff).sum(axis=-1)
    elif similarity == "dot":
        logits = beta * (x @ centers.T)
    else:
        raise ContractViolation(f"unknown similarity {similarity!r}")
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    assign = e / e.sum(axis=1, keepdims=True)
    col = assign.sum(axis=0)
    empty = col < EMPTY_TOL
    w = assign / np.where(empty, 1.0, col)[None, :]
    new = w.T @ x
    new[empty] = centers[empty]
    return new, assign, empty


def gmm_sample(state, k, rng, size=None):
    """Draw from N(mu_k, diag(var_k)) using per-dimension Box-Muller.

    ``size=None`` returns one D-vector, otherwise a (size, D) array.
    """
    if not 0 <= k < state.K:
        raise ContractViolation(f"gmm_sample: component {k} out of range")
    d = state.mu.shape[1]
    n = 1 if size is None else int(size)
    u1 = 1.0 - rng.random((n, d))  # (0, 1]
    u2 = rng.random((n, d))
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    out = state.mu[k] + np.sqrt(state.var[k]) * z
    return out[0] if size is None else out


def farthest_point_init(x, k, rng):
    """k-means-style seeding: random first center, then repeatedly the farthest point."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ContractViolation(f"farthest_point_init: {n} points < {k} centers")
    idx = [int(rng.integers(n))]
    d2 = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        j = int(np.argmax(d2))
        idx.append(j)
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(axis=1))
    return x[idx].copy()

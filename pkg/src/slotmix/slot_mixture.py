"""Slot Mixture Module: a Gaussian mixture fitted by learnable EM-style iterations.

Per iteration, on encoded inputs x (B, N, D) and state (mu, var, pi):

1. logits = diagonal Gaussian log-density of every point under every slot
2. gamma  = softmax over slots of (logits + log pi)
3. pi     = mean of gamma over points
4. mu*    = gamma-weighted mean of x per slot
5. mu     = GRU(input=mu*, hidden=mu)
6. mu    += MLP(LayerNorm(mu))
7. var    = gamma-weighted mean of (x - mu)^2 around the *refined* mu,
            floored at 1e-6

Slots are concat(mu, var) of width 2D, optionally reduced to D by a
learned matrix. With the GRU replaced by a pass-through, no residual MLP and
no input transform, one iteration is exactly one classic EM step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from . import nn
from .clustering import GmmState, farthest_point_init, gmm_fit, gmm_sample
from .errors import ContractViolation, NonFiniteValue, ShapeError
from .slot_common import (SlotConfig, as_batch, column_weights, encode_inputs,
                          init_shared, refine, xavier_vector)

VAR_FLOOR = 1e-6
PI_FLOOR = 1e-300


@dataclass
class SlotMixtureState:
    mu: ad.Tensor            # (B, K, D)
    var: ad.Tensor           # (B, K, D)
    pi: ad.Tensor            # (B, K)
    gamma: ad.Tensor = None  # (B, N, K) from the latest iteration
    empty: np.ndarray = None  # (B, K) slots that hit the uniform-weight fallback

    def detached(self):
        return SlotMixtureState(ad.detach(self.mu), ad.detach(self.var), ad.detach(self.pi),
                                self.gamma, self.empty)


@dataclass
class SlotOutput:
    slots_full: ad.Tensor     # (B, K, 2D)
    slots_reduced: ad.Tensor  # (B, K, D) or None when cfg.reduce is off
    pi: ad.Tensor             # (B, K)


def init_smm_params(cfg: SlotConfig, rng) -> nn.ParameterStore:
    store = nn.ParameterStore()
    init_shared(store, cfg, rng)
    if cfg.projections:
        # stands in for the one D x D projection SA has beyond k and v
        nn.init_linear(store, "proj", cfg.dim, cfg.dim, rng, bias=False)
    store.add("init.mu_mean", xavier_vector(rng, cfg.dim))
    store.add("init.mu_log_sigma", xavier_vector(rng, cfg.dim))
    store.add("init.var_mean", xavier_vector(rng, cfg.dim))
    store.add("init.var_log_sigma", xavier_vector(rng, cfg.dim))
    if cfg.reduce:
        nn.init_linear(store, "reduce", 2 * cfg.dim, cfg.dim, rng, bias=False)
    return store


def log_gaussian(x, mu, var, quadratic_only=False):
    """(B, N, K) log N(x_i | mu_k, diag(var_k)); also accepts unbatched (N, D)/(K, D)."""
    x, mu, var = ad.as_tensor(x), ad.as_tensor(mu), ad.as_tensor(var)
    squeeze = x.ndim == 2
    if squeeze:
        x, mu, var = (ad.reshape(t, (1,) + t.shape) for t in (x, mu, var))
    if x.ndim != 3 or mu.shape != var.shape or mu.ndim != 3 \
            or x.shape[0] != mu.shape[0] or x.shape[2] != mu.shape[2]:
        raise ShapeError("log_gaussian", x.shape, mu.shape, var.shape)
    xd = np.ascontiguousarray(x.data)
    md = np.ascontiguousarray(mu.data)
    vd = np.ascontiguousarray(var.data)
    out = kernels.log_gaussian_fwd(xd, md, vd, quadratic_only)
    if not np.all(np.isfinite(out)):
        b, i, k = np.argwhere(~np.isfinite(out))[0]
        raise NonFiniteValue(f"log_gaussian: non-finite logit at point {i}, slot {k} (batch {b})")

    def backward(g):
        return kernels.log_gaussian_bwd(np.ascontiguousarray(g), xd, md, vd, quadratic_only)

    res = ad.custom_op(out, (x, mu, var), backward, "log_gaussian")
    return res[0] if squeeze else res


def smm_init(K, params, rng, batch=1):
    """Uniform pi; mu and var drawn from their trainable Gaussians (var via softplus + floor)."""
    if K < 1:
        raise ContractViolation("smm_init: K must be >= 1")
    d = params["init.mu_mean"].shape[0]
    e1 = rng.standard_normal((batch, K, d))
    e2 = rng.standard_normal((batch, K, d))
    mu = ad.add(params["init.mu_mean"], ad.mul(ad.exp(params["init.mu_log_sigma"]), e1))
    raw = ad.add(params["init.var_mean"], ad.mul(ad.exp(params["init.var_log_sigma"]), e2))
    var = ad.clamp_min(ad.softplus(raw), VAR_FLOOR)
    pi = ad.Tensor(np.full((batch, K), 1.0 / K))
    return SlotMixtureState(mu, var, pi, None, np.zeros((batch, K), dtype=bool))


def _project(x, params, cfg):
    return ad.matmul(x, params["proj.W"]) if cfg.projections else x


def _step(x, state, params, cfg):
    logits = log_gaussian(x, state.mu, state.var, cfg.quadratic_only)
    # an underflowed weight would give log(0) and 0/0 in backward
    log_pi = ad.log(ad.clamp_min(state.pi, PI_FLOOR))
    gamma = ad.softmax(ad.add(logits, ad.reshape(log_pi, (log_pi.shape[0], 1, log_pi.shape[1]))),
                       axis=-1)
    pi = ad.mean(gamma, axis=1)
    w, empty = column_weights(gamma)
    wt = ad.transpose(w)
    mu_star = ad.matmul(wt, x)
    mu = refine(mu_star, state.mu, params, cfg)
    # sum_i w_ik (x_i - mu_k)^2 expanded; every column of w sums to one
    ex2 = ad.matmul(wt, ad.square(x))
    colsum = ad.transpose(ad.sum_(w, axis=1, keepdims=True))
    var = ad.add(ad.sub(ex2, ad.mul(2.0, ad.mul(mu, mu_star))), ad.mul(ad.square(mu), colsum))
    var = ad.clamp_min(var, VAR_FLOOR)
    prev = state.empty if state.empty is not None else np.zeros_like(empty)
    return SlotMixtureState(mu, var, pi, gamma, prev | empty)


def smm_iteration(x, state, params, cfg):
    """One mixture iteration on already-encoded (and projected) inputs."""
    x, squeeze = as_batch(x)
    if squeeze:
        state = SlotMixtureState(*(ad.reshape(t, (1,) + t.shape)
                                   for t in (state.mu, state.var, state.pi)),
                                 None, None if state.empty is None else state.empty[None])
    out = _step(x, state, params, cfg)
    if squeeze:
        return SlotMixtureState(out.mu[0], out.var[0], out.pi[0], out.gamma[0], out.empty[0])
    return out


def emit_slots(state, params, cfg):
    full = ad.concat([state.mu, state.var], axis=-1)
    reduced = ad.matmul(full, params["reduce.W"]) if cfg.reduce else None
    return SlotOutput(full, reduced, state.pi)


def smm_forward(x_raw, params, cfg, iterations, rng=None, K=None, detach_last=True,
                init_state=None):
    """Encode inputs once and run ``iterations`` mixture steps.

    Returns (SlotOutput, final SlotMixtureState). ``init_state`` overrides
    the sampled initialization. With ``detach_last``, mu, var and pi
    entering the final iteration are cut from the graph.
    """
    if iterations < 1:
        raise ContractViolation("smm_forward: iterations must be >= 1")
    x_raw, squeeze = as_batch(x_raw)
    x = _project(encode_inputs(x_raw, params, cfg), params, cfg)
    if init_state is None:
        state = smm_init(K, params, rng, batch=x.shape[0])
    else:
        state = init_state
        if state.mu.ndim == 2:
            state = SlotMixtureState(*(ad.reshape(ad.as_tensor(t), (1,) + ad.as_tensor(t).shape)
                                       for t in (state.mu, state.var, state.pi)))
    if detach_last:
        with ad.no_grad():
            for _ in range(iterations - 1):
                state = _step(x, state, params, cfg)
        state = _step(x, state.detached(), params, cfg)
    else:
        for _ in range(iterations):
            state = _step(x, state, params, cfg)
    out = emit_slots(state, params, cfg)
    if squeeze:
        red = None if out.slots_reduced is None else out.slots_reduced[0]
        out = SlotOutput(out.slots_full[0], red, out.pi[0])
        state = SlotMixtureState(state.mu[0], state.var[0], state.pi[0], state.gamma[0],
                                 state.empty[0])
    return out, state


def empty_slot_mask(pi, threshold=None):
    """True where a slot's mixture weight falls below ``threshold`` (default 0.5 / K)."""
    pi = np.asarray(pi.data if isinstance(pi, ad.Tensor) else pi, dtype=np.float64)
    if threshold is None:
        threshold = 0.5 / pi.shape[-1]
    return pi < threshold


def concept_library_fit(slot_bank, n_concepts, rng, iterations=50):
    """Fit a diagonal GMM over a bank of (already filtered) slots.

    Means start from farthest-point seeding, variances from the bank's
    per-dimension variance, weights uniform.
    """
    bank = np.asarray(slot_bank, dtype=np.float64)
    if bank.ndim != 2:
        raise ShapeError("concept_library_fit", bank.shape)
    if bank.shape[0] < n_concepts:
        raise ContractViolation(f"concept_library_fit: {bank.shape[0]} slots < {n_concepts} concepts")
    mu = farthest_point_init(bank, n_concepts, rng)
    var = np.tile(np.maximum(bank.var(axis=0), VAR_FLOOR), (n_concepts, 1))
    init = GmmState(mu, var, np.full(n_concepts, 1.0 / n_concepts))
    state, _, _ = gmm_fit(bank, init, iterations)
    return state


def concept_sample(library, concept, rng):
    """One replacement slot drawn from concept ``concept`` of a fitted library."""
    return gmm_sample(library, concept, rng)

"""Slot Attention: iterative dot-product attention with a softmax over slots.

Each iteration scores every (point, slot) pair by k(x) . q(s) / sqrt(D),
normalizes over slots so slots compete for points, takes the attention-
weighted mean of v(x) per slot and refines it with a GRU plus a residual MLP.
Batched throughout: x is (B, N, D_in), slots (B, K, D).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractViolation
from .slot_common import (SlotConfig, as_batch, column_weights, encode_inputs,
                          init_shared, refine, xavier_vector)


@dataclass
class SaSlots:
    slots: ad.Tensor       # (B, K, D)
    attn: ad.Tensor        # (B, N, K), rows sum to 1
    empty: np.ndarray      # (B, K) any iteration fell back to uniform weights


def init_sa_params(cfg: SlotConfig, rng) -> nn.ParameterStore:
    store = nn.ParameterStore()
    init_shared(store, cfg, rng)
    if cfg.projections:
        for name in ("q", "k", "v"):
            nn.init_linear(store, name, cfg.dim, cfg.dim, rng, bias=False)
    if cfg.slot_norm:
        nn.init_layer_norm(store, "slot_norm", cfg.dim)
    store.add("init.mean", xavier_vector(rng, cfg.dim))
    store.add("init.log_sigma", xavier_vector(rng, cfg.dim))
    return store


def sa_init(K, params, rng, batch=1):
    """Draw (batch, K, D) slots from N(init.mean, diag(exp(2 * init.log_sigma)))."""
    if K < 1:
        raise ContractViolation("sa_init: K must be >= 1")
    mean, log_sigma = params["init.mean"], params["init.log_sigma"]
    eps = rng.standard_normal((batch, K, mean.shape[0]))
    return ad.add(mean, ad.mul(ad.exp(log_sigma), eps))


def _project(x, params, cfg, name):
    return ad.matmul(x, params[f"{name}.W"]) if cfg.projections else x


def _attend(keys, values, slots, params, cfg):
    d = slots.shape[-1]
    s = nn.layer_norm_named(slots, params, "slot_norm") if cfg.slot_norm else slots
    q = _project(s, params, cfg, "q")
    logits = ad.mul(ad.matmul(keys, ad.transpose(q)), 1.0 / math.sqrt(d))
    attn = ad.softmax(logits, axis=-1)
    w, empty = column_weights(attn)
    updates = ad.matmul(ad.transpose(w), values)
    return refine(updates, slots, params, cfg), attn, empty


def sa_iteration(x, slots, params, cfg):
    """One attention + refinement step on already-encoded inputs.

    Returns (slots', attn, empty).
    """
    x, squeeze = as_batch(x)
    slots, _ = as_batch(slots)
    out, attn, empty = _attend(_project(x, params, cfg, "k"), _project(x, params, cfg, "v"),
                               slots, params, cfg)
    if squeeze:
        return out[0], attn[0], empty[0]
    return out, attn, empty


def sa_forward(x_raw, params, cfg, iterations, rng=None, K=None, detach_last=True,
               init_slots=None):
    """Encode inputs once, then run ``iterations`` attention steps.

    Slots come from ``init_slots`` when given, else from :func:`sa_init`
    with ``rng`` and ``K``. With ``detach_last`` the slots entering the final
    iteration are cut from the graph, so only that step is differentiated.
    """
    if iterations < 1:
        raise ContractViolation("sa_forward: iterations must be >= 1")
    x_raw, squeeze = as_batch(x_raw)
    x = encode_inputs(x_raw, params, cfg)
    if init_slots is None:
        slots = sa_init(K, params, rng, batch=x.shape[0])
    else:
        slots, _ = as_batch(init_slots)
    keys, values = _project(x, params, cfg, "k"), _project(x, params, cfg, "v")
    empty = np.zeros((x.shape[0], slots.shape[1]), dtype=bool)
    attn = None
    if detach_last:
        with ad.no_grad():
            for _ in range(iterations - 1):
                slots, attn, e = _attend(keys, values, slots, params, cfg)
                empty |= e
        slots = ad.detach(slots)
        slots, attn, e = _attend(keys, values, slots, params, cfg)
        empty |= e
    else:
        for _ in range(iterations):
            slots, attn, e = _attend(keys, values, slots, params, cfg)
            empty |= e
    if squeeze:
        return SaSlots(slots[0], attn[0], empty[0])
    return SaSlots(slots, attn, empty)

"""Slot extractors and task heads wired together for the experiments.

A model is a :class:`SlotModel`: a parameter store plus a ``slots`` method
mapping a (B, N, D_in) batch to per-slot vectors and a (B, N, K) soft
assignment of points to slots. The two learnable modules (``sa``, ``smm``)
train end to end; the two vanilla ones (``kmeans``, ``gmm``) have no
trainable parameters and run the classic clustering code directly.
"""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .. import clustering
from .. import nn
from ..evaluation import LAYOUT
from ..slot_attention import init_sa_params, sa_forward
from ..slot_common import SlotConfig
from ..slot_mixture import init_smm_params, smm_forward


class SlotModel:
    def __init__(self, kind, K, input_dim, dim=64, hidden=64, kmeans_beta=None, rng=None,
                 **switches):
        self.kind = kind
        self.K = K
        self.input_dim = input_dim
        self.kmeans_beta = kmeans_beta
        if kind in ("sa", "smm"):
            self.cfg = SlotConfig(input_dim=input_dim, dim=dim, hidden=hidden, **switches)
            init = init_sa_params if kind == "sa" else init_smm_params
            self.params = init(self.cfg, rng)
            self.out_dim = dim
        elif kind in ("kmeans", "gmm"):
            self.cfg = None
            self.params = nn.ParameterStore()
            self.out_dim = input_dim if kind == "kmeans" else 2 * input_dim
        else:
            raise ValueError(f"unknown model kind {kind!r}")

    @property
    def trainable(self):
        return self.kind in ("sa", "smm")

    def slots(self, x, iterations, rng, detach_last=True):
        """Returns (slots (B, K, out_dim) tensor, assignments (B, N, K) array, pi or None)."""
        if self.kind == "sa":
            out = sa_forward(x, self.params, self.cfg, iterations, rng=rng, K=self.K,
                             detach_last=detach_last)
            return out.slots, out.attn.data, None
        if self.kind == "smm":
            out, state = smm_forward(x, self.params, self.cfg, iterations, rng=rng, K=self.K,
                                     detach_last=detach_last)
            return out.slots_reduced, state.gamma.data, out.pi.data
        slots, assign, pis = [], [], []
        for scene in np.asarray(x.data if isinstance(x, ad.Tensor) else x):
            s, a, p = vanilla_slots(self.kind, scene, self.K, iterations, rng, self.kmeans_beta)
            slots.append(s)
            assign.append(a)
            pis.append(p)
        pi = np.stack(pis) if self.kind == "gmm" else None
        return ad.Tensor(np.stack(slots)), np.stack(assign), pi


def vanilla_init(x, K, rng):
    """K distinct points of the scene as means; the scene's per-dim variance for every component."""
    idx = rng.choice(x.shape[0], size=K, replace=False)
    var = np.tile(np.maximum(x.var(axis=0), clustering.VAR_FLOOR), (K, 1))
    return clustering.GmmState(x[idx].copy(), var, np.full(K, 1.0 / K))


def vanilla_slots(kind, x, K, iterations, rng, beta):
    init = vanilla_init(x, K, rng)
    if kind == "gmm":
        state, gamma, _ = clustering.gmm_fit(x, init, iterations)
        return np.concatenate([state.mu, state.var], axis=1), gamma, state.pi
    centers = init.mu
    assign = None
    for _ in range(iterations):
        centers, assign, _ = clustering.soft_kmeans_step(x, centers, beta)
    return centers, assign, None


# ------------------------------------------------------------------- set head
def init_setpred_head(store, in_dim, hidden, rng, layout=LAYOUT):
    nn.init_mlp(store, "head", in_dim, hidden, layout.width, rng)


def setpred_head(slots, store, layout=LAYOUT):
    """Per-slot MLP to a property row: raw coords, sigmoid size/presence, softmax categories."""
    raw = nn.mlp(slots, store, "head")
    return ad.concat([
        raw[..., layout.coords],
        ad.sigmoid(raw[..., layout.size:layout.size + 1]),
        ad.softmax(raw[..., layout.shape], axis=-1),
        ad.softmax(raw[..., layout.color], axis=-1),
        ad.sigmoid(raw[..., layout.presence:layout.presence + 1]),
    ], axis=-1)


# ------------------------------------------------------------- discovery head
def init_decoder(store, slot_dim, out_dim, hidden, rng):
    nn.init_linear(store, "dec.slot", slot_dim, hidden, rng)
    nn.init_linear(store, "dec.pos", 2, hidden, rng, bias=False)
    nn.init_linear(store, "dec.fc2", hidden, hidden, rng)
    nn.init_linear(store, "dec.fc3", hidden, out_dim + 1, rng)


def decode(slots, positions, store):
    """Point-set analog of a spatial-broadcast decoder.

    Every slot is decoded at every point position into a feature
    reconstruction and a mask logit; masks are a softmax over slots and the
    reconstruction is the mask-weighted mixture. Returns (recon (B, N, F),
    masks (B, K, N)).
    """
    b, k, _ = slots.shape
    n = positions.shape[1]
    hs = nn.linear(slots, store, "dec.slot")
    hp = ad.matmul(ad.as_tensor(positions), store["dec.pos.W"])
    h = ad.relu(ad.add(ad.reshape(hs, (b, k, 1, hs.shape[-1])),
                       ad.reshape(hp, (b, 1, n, hp.shape[-1]))))
    h = ad.relu(nn.linear(h, store, "dec.fc2"))
    out = nn.linear(h, store, "dec.fc3")
    f = out.shape[-1] - 1
    masks = ad.softmax(out[..., f], axis=1)
    recon = ad.sum_(ad.mul(ad.reshape(masks, (b, k, n, 1)), out[..., :f]), axis=1)
    return recon, masks

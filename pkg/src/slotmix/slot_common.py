"""Configuration and helpers shared by the Slot Attention and Slot Mixture modules."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractViolation

EMPTY_TOL = 1e-12


@dataclass(frozen=True)
class SlotConfig:
    """Architecture switches for either slot module.

    ``input_dim`` is the raw feature width; ``dim`` the slot width D. The
    boolean switches turn trainable stages off, which is how both modules
    reduce to their classic clustering counterparts:

    - ``input_transform``: LayerNorm + MLP on the raw features (else x must
      already have width D and is used as-is)
    - ``update``: ``"gru"`` or ``"identity"`` (the refined state is the
      weighted mean itself)
    - ``residual_mlp``: ``state += MLP(LayerNorm(state))``
    - ``projections``: SA's q/k/v matrices; for SMM a single feature map
      on the inputs (see ``slot_mixture``)
    - ``slot_norm``: SA only, LayerNorm on slots before q
    - ``quadratic_only``: SMM only, drop the Gaussian normalizer
    - ``reduce``: SMM only, learn the 2D -> D slot reduction
    """
    input_dim: int
    dim: int = 64
    hidden: int = 64
    input_transform: bool = True
    update: str = "gru"
    residual_mlp: bool = True
    projections: bool = True
    slot_norm: bool = True
    quadratic_only: bool = False
    reduce: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.hidden < 1 or self.input_dim < 1:
            raise ContractViolation("SlotConfig: widths must be positive")
        if self.update not in ("gru", "identity"):
            raise ContractViolation(f"SlotConfig: unknown update {self.update!r}")
        if not self.input_transform and self.input_dim != self.dim:
            raise ContractViolation("SlotConfig: without input_transform, input_dim must equal dim")

    def to_dict(self):
        return asdict(self)


def init_shared(store, cfg, rng):
    """Parameters that both modules carry: input encoder, GRU, residual MLP."""
    if cfg.input_transform:
        nn.init_layer_norm(store, "input.norm", cfg.input_dim)
        nn.init_mlp(store, "input.mlp", cfg.input_dim, cfg.dim, cfg.dim, rng)
    if cfg.update == "gru":
        nn.init_gru(store, "gru", cfg.dim, cfg.dim, rng)
    if cfg.residual_mlp:
        nn.init_layer_norm(store, "mlp_norm", cfg.dim)
        nn.init_mlp(store, "mlp", cfg.dim, cfg.hidden, cfg.dim, rng)


def xavier_vector(rng, dim):
    bound = np.sqrt(6.0 / (1 + dim))
    return rng.uniform(-bound, bound, size=dim)


def encode_inputs(x_raw, store, cfg):
    x = ad.as_tensor(x_raw)
    if x.shape[-1] != cfg.input_dim:
        raise ContractViolation(f"inputs have width {x.shape[-1]}, expected {cfg.input_dim}")
    if not cfg.input_transform:
        return x
    return nn.mlp(nn.layer_norm_named(x, store, "input.norm"), store, "input.mlp")


def refine(update, hidden, store, cfg):
    """GRU (or pass-through) followed by the optional residual MLP."""
    out = nn.gru_cell(update, hidden, store, "gru") if cfg.update == "gru" else update
    if cfg.residual_mlp:
        out = ad.add(out, nn.mlp(nn.layer_norm_named(out, store, "mlp_norm"), store, "mlp"))
    return out


def column_weights(assign):
    """Renormalize (B, N, K) assignments over points per slot.

    A slot whose total mass is below 1e-12 gets uniform weights 1/N instead;
    the boolean (B, K) ``empty`` mask is returned alongside.
    """
    col = ad.sum_(assign, axis=1, keepdims=True)
    empty = col.data < EMPTY_TOL
    n = assign.shape[1]
    if not empty.any():
        return ad.div(assign, col), empty[:, 0, :]
    safe = ad.where(empty, 1.0, col)
    w = ad.where(np.broadcast_to(empty, assign.shape), 1.0 / n, ad.div(assign, safe))
    return w, empty[:, 0, :]


def as_batch(x):
    """Promote a single (N, D) scene to a batch of one; returns (tensor, squeezed?)."""
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ContractViolation(f"expected (N, D) or (B, N, D) inputs, got {x.shape}")
    return x, False

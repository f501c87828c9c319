"""Self-contained correctness checks: clustering reductions and finite differences."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import kernels
from .. import nn
from ..clustering import GmmState, gmm_fit, soft_kmeans_step
from ..evaluation import set_loss
from ..slot_attention import init_sa_params, sa_forward
from ..slot_common import SlotConfig, column_weights
from ..slot_mixture import SlotMixtureState, init_smm_params, log_gaussian, smm_forward
from .models import decode, init_decoder

REDUCTION_TOL = 1e-9
GRAD_TOL = 1e-4


# ------------------------------------------------------------------ reductions
@dataclass
class ReductionReport:
    smm_dev: list = field(default_factory=list)   # per-instance max |SMM - EM|
    sa_dev: list = field(default_factory=list)    # per-instance max |SA - soft k-means|
    tol: float = REDUCTION_TOL

    @property
    def max_smm(self):
        return max(self.smm_dev)

    @property
    def max_sa(self):
        return max(self.sa_dev)

    @property
    def passed(self):
        return self.max_smm < self.tol and self.max_sa < self.tol

    def lines(self):
        out = [f"instance {i}: smm/em {a:.3e}  sa/soft-kmeans {b:.3e}"
               for i, (a, b) in enumerate(zip(self.smm_dev, self.sa_dev))]
        out.append(f"max deviation: smm/em {self.max_smm:.3e}  sa/soft-kmeans {self.max_sa:.3e}"
                   f"  (tol {self.tol:g}) -> {'PASS' if self.passed else 'FAIL'}")
        return out


def reduction_config(d, perturb=None):
    """Slot config whose trainable stages all collapse to the identity.

    The residual MLP is kept but its output layer is zeroed, so it adds
    nothing. ``perturb="residual"`` nudges one of those zeroed weights;
    ``perturb="gru"`` swaps the pass-through update for a real GRU.
    """
    return SlotConfig(input_dim=d, dim=d, hidden=d, input_transform=False,
                      update="gru" if perturb == "gru" else "identity", residual_mlp=True,
                      projections=False, slot_norm=False, reduce=False)


def _reduction_params(init, cfg, rng, perturb):
    store = init(cfg, rng)
    store.set("mlp.fc2.W", np.zeros_like(store["mlp.fc2.W"].data))
    store.set("mlp.fc2.b", np.zeros_like(store["mlp.fc2.b"].data))
    if perturb == "residual":
        w = store["mlp.fc2.W"].data.copy()
        w[0, 0] = 1e-3
        store.set("mlp.fc2.W", w)
    return store


def reduction_instance(rng):
    """Clustered data with K well-populated clusters and an init at K data points."""
    n = int(rng.integers(20, 201))
    d = int(rng.integers(1, 5))
    k = int(rng.integers(1, 6))
    t = int(rng.integers(1, 6))
    centers = rng.uniform(-3.0, 3.0, size=(k, d))
    x = centers[rng.integers(k, size=n)] + rng.normal(0.0, 0.7, size=(n, d))
    idx = rng.choice(n, size=k, replace=False)
    var = rng.uniform(0.3, 2.0, size=(k, d))
    pi = rng.dirichlet(np.full(k, 5.0))
    return x, GmmState(x[idx].copy(), var, pi), t


def reduction_check(instances=50, seed=0, perturb=None):
    rng = np.random.default_rng(seed)
    report = ReductionReport()
    with ad.no_grad():
        for _ in range(instances):
            x, init, t = reduction_instance(rng)
            d = x.shape[1]
            cfg = reduction_config(d, perturb)

            # SMM against EM on mu, pi, gamma
            params = _reduction_params(init_smm_params, cfg, rng, perturb)
            state0 = SlotMixtureState(ad.Tensor(init.mu[None]), ad.Tensor(init.var[None]),
                                      ad.Tensor(init.pi[None]))
            _, st = smm_forward(x[None], params, cfg, t, detach_last=False, init_state=state0)
            ref, gamma, _ = gmm_fit(x, init, t)
            dev = max(np.abs(st.mu.data[0] - ref.mu).max(), np.abs(st.pi.data[0] - ref.pi).max(),
                      np.abs(st.gamma.data[0] - gamma).max())
            report.smm_dev.append(float(dev))

            # SA against dot-product soft k-means with beta = 1 / sqrt(D)
            params = _reduction_params(init_sa_params, cfg, rng, perturb)
            out = sa_forward(x[None], params, cfg, t, detach_last=False, init_slots=init.mu[None])
            centers, assign = init.mu, None
            for _ in range(t):
                centers, assign, _ = soft_kmeans_step(x, centers, 1.0 / math.sqrt(d), "dot")
            dev = max(np.abs(out.slots.data[0] - centers).max(),
                      np.abs(out.attn.data[0] - assign).max())
            report.sa_dev.append(float(dev))
    return report


# --------------------------------------------------------------- grad check
@dataclass
class GradCase:
    name: str
    fn: object          # callable(*tensors) -> Tensor of any shape
    inputs: list        # numpy arrays; each gets a gradient check


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)   # case name -> max relative error
    tol: float = GRAD_TOL

    @property
    def worst(self):
        return max(self.errors.items(), key=lambda kv: kv[1])

    @property
    def passed(self):
        return all(e < self.tol for e in self.errors.values())

    def lines(self):
        out = [f"{name:32s} {err:.3e}" for name, err in self.errors.items()]
        name, err = self.worst
        out.append(f"worst op: {name} ({err:.3e}, tol {self.tol:g}) -> "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def _scalarize(out, weights):
    return float((out.data * weights).sum())


def numeric_vs_analytic(case, rng, eps=1e-6):
    """Max over inputs of ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-10)."""
    arrays = [np.array(a, dtype=np.float64) for a in case.inputs]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = case.fn(*tensors)
    weights = rng.normal(size=out.shape)
    ad.sum_(ad.mul(out, weights)).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            vals = []
            for sign in (1.0, -1.0):
                flat[j] = orig + sign * eps
                with ad.no_grad():
                    vals.append(_scalarize(case.fn(*[ad.Tensor(b) for b in arrays]), weights))
            flat[j] = orig
            numeric.reshape(-1)[j] = (vals[0] - vals[1]) / (2.0 * eps)
        diff = np.linalg.norm(analytic - numeric)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-10)
        worst = max(worst, diff / scale)
    return worst


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _module_case(name, kind, rng, iterations=3, k=3, n=6, d=3, batch=2):
    """End-to-end forward on a tiny instance; checks gradients of inputs and every parameter."""
    cfg = SlotConfig(input_dim=d, dim=4, hidden=5)
    init = init_sa_params if kind == "sa" else init_smm_params
    store = init(cfg, rng)
    names = list(store.params)
    x = rng.normal(size=(batch, n, d))
    seed = int(rng.integers(1 << 31))

    def fn(xt, *ps):
        local = nn.ParameterStore()
        for nm, p in zip(names, ps):
            local.params[nm] = p
        r = np.random.default_rng(seed)
        if kind == "sa":
            return sa_forward(xt, local, cfg, iterations, rng=r, K=k, detach_last=False).slots
        out, _ = smm_forward(xt, local, cfg, iterations, rng=r, K=k, detach_last=False)
        return out.slots_reduced

    return GradCase(name, fn, [x] + [store[nm].data.copy() for nm in names])


def _decoder_case(rng):
    store = nn.ParameterStore()
    init_decoder(store, 4, 3, 5, rng)
    names = list(store.params)
    pos = rng.normal(size=(2, 5, 2))

    def fn(slots, *ps):
        local = nn.ParameterStore()
        for nm, p in zip(names, ps):
            local.params[nm] = p
        recon, masks = decode(slots, pos, local)
        return ad.concat([ad.reshape(recon, (2, -1)), ad.reshape(masks, (2, -1))], axis=1)

    return GradCase("decoder", fn, [rng.normal(size=(2, 3, 4))] + [store[n].data.copy() for n in names])


def _gru_case(rng):
    store = nn.ParameterStore()
    nn.init_gru(store, "gru", 3, 4, rng)
    names = list(store.params)

    def fn(inp, hid, *ps):
        local = nn.ParameterStore()
        for nm, p in zip(names, ps):
            local.params[nm] = p
        return nn.gru_cell(inp, hid, local, "gru")

    return GradCase("gru_cell", fn, [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))]
                    + [store[n].data.copy() for n in names])


def _log_gaussian_case(rng, backend, quadratic_only):
    def fn(x, mu, var):
        saved = kernels.log_gaussian_fwd, kernels.log_gaussian_bwd
        kernels.log_gaussian_fwd, kernels.log_gaussian_bwd = backend.log_gaussian_fwd, backend.log_gaussian_bwd
        try:
            return log_gaussian(x, mu, var, quadratic_only)
        finally:
            kernels.log_gaussian_fwd, kernels.log_gaussian_bwd = saved
    tag = "cython" if backend is kernels.compiled_backend else "python"
    name = f"log_gaussian[{tag}{',quadratic' if quadratic_only else ''}]"
    return GradCase(name, fn, [rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 4, 3)),
                               rng.uniform(0.3, 2.0, size=(2, 4, 3))])


def _set_loss_case(rng):
    targets = rng.normal(size=(2, 4, 5))
    perm = np.stack([rng.permutation(4) for _ in range(2)])
    # predictions near a permuted copy of the targets keep the matching stable
    preds = np.take_along_axis(targets, perm[:, :, None], axis=1) + 0.05 * rng.normal(size=(2, 4, 5))
    preds[0, 0, 0] += 3.0  # one entry in the linear Huber regime
    return GradCase("set_loss", lambda p: set_loss(p, targets)[0], [preds])


def default_cases(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    mask = rng.random((3, 4)) < 0.5
    cases = [
        GradCase("add(broadcast)", ad.add, [a, rng.normal(size=(4,))]),
        GradCase("sub(broadcast)", ad.sub, [a, rng.normal(size=(3, 1))]),
        GradCase("mul", ad.mul, [a, b]),
        GradCase("div", ad.div, [a, pos]),
        GradCase("neg", ad.neg, [a]),
        GradCase("square", ad.square, [a]),
        GradCase("sqrt", ad.sqrt, [pos]),
        GradCase("exp", ad.exp, [a]),
        GradCase("log", ad.log, [pos]),
        GradCase("relu", ad.relu, [_away_from_zero(rng, (3, 4))]),
        GradCase("sigmoid", ad.sigmoid, [3.0 * a]),
        GradCase("tanh", ad.tanh, [a]),
        GradCase("softplus", ad.softplus, [3.0 * a]),
        GradCase("clamp_min", lambda t: ad.clamp_min(t, 0.0), [_away_from_zero(rng, (3, 4))]),
        GradCase("where", lambda s, t: ad.where(mask, s, t), [a, b]),
        GradCase("sum(axis)", lambda t: ad.sum_(t, axis=1, keepdims=True), [a]),
        GradCase("sum(all)", lambda t: ad.sum_(t), [a]),
        GradCase("mean(axis)", lambda t: ad.mean(t, axis=0), [a]),
        GradCase("softmax", lambda t: ad.softmax(t, axis=-1), [a]),
        GradCase("log_softmax", lambda t: ad.log_softmax(t, axis=0), [a]),
        GradCase("matmul(2d)", ad.matmul, [a, rng.normal(size=(4, 2))]),
        GradCase("matmul(3d,2d)", ad.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]),
        GradCase("matmul(3d,3d)", ad.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))]),
        GradCase("transpose", ad.transpose, [rng.normal(size=(2, 3, 4))]),
        GradCase("reshape", lambda t: ad.reshape(t, (4, 3)), [a]),
        GradCase("broadcast_to", lambda t: ad.broadcast_to(t, (2, 3, 4)), [rng.normal(size=(1, 4))]),
        GradCase("concat", lambda s, t: ad.concat([s, t], axis=0), [a, b]),
        GradCase("getitem(slice)", lambda t: t[:, 1:3], [a]),
        GradCase("getitem(fancy)", lambda t: t[np.array([0, 2, 0])], [a]),
        GradCase("huber", lambda s, t: ad.huber(s, t, 1.0),
                 [a * 2.0, b + np.where(np.abs(a * 2.0 - b) < 1e-2, 0.1, 0.0)]),
        GradCase("layer_norm", nn.layer_norm, [a, rng.normal(size=4), rng.normal(size=4)]),
        GradCase("column_weights", lambda t: column_weights(ad.softmax(t, axis=-1))[0],
                 [rng.normal(size=(2, 5, 3))]),
        _gru_case(rng),
        _set_loss_case(rng),
        _decoder_case(rng),
    ]
    for backend in (kernels.python_backend, kernels.compiled_backend):
        if backend is None:
            continue
        for quad in (False, True):
            cases.append(_log_gaussian_case(rng, backend, quad))
    cases.append(_module_case("sa_forward", "sa", rng))
    cases.append(_module_case("smm_forward", "smm", rng))
    return cases


def faulty_case(seed=0):
    """An exp whose backward forgets the exp factor; must be caught."""
    rng = np.random.default_rng(seed)

    def bad_exp(t):
        return ad.custom_op(np.exp(t.data), (t,), lambda g: (g,), "bad_exp")

    return GradCase("faulty_exp", bad_exp, [rng.normal(size=(3, 4))])


def grad_check(cases=None, seed=0, inject_fault=False):
    rng = np.random.default_rng(seed + 1)
    cases = list(default_cases(seed) if cases is None else cases)
    if inject_fault:
        cases.append(faulty_case(seed))
    report = GradReport()
    for case in cases:
        report.errors[case.name] = numeric_vs_analytic(case, rng)
    return report

"""Training loops, evaluation sweeps and result persistence.

Every entry point takes a validated :class:`RunConfig`, writes
``metrics.csv`` and ``config.echo.toml`` into ``cfg.output_dir`` and
returns a :class:`RunResult`. All randomness flows from ``cfg.seed`` through
named child generators, so a fixed config reproduces byte-identical CSVs.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..clustering import gmm_e_step
from ..errors import ContractViolation, NonFiniteLossError, NonFiniteValue
from ..evaluation import (LAYOUT, SETPRED_THRESHOLDS, VANILLA_THRESHOLDS, average_precision,
                          fg_ari, set_loss)
from ..scenes import SceneSpec, gen_dataset, read_dataset
from ..slot_mixture import concept_library_fit, concept_sample, empty_slot_mask, smm_forward
from ..version import __version__
from .config import RunConfig, read_echo, write_echo
from .models import SlotModel, decode, init_decoder, init_setpred_head, setpred_head

CSV_HEADER = ("run_id", "model", "seed", "step", "metric", "value")
CHECKPOINT = "checkpoint.bin"
FAILED_CHECKPOINT = "checkpoint.failed.bin"

# stream ids for child generators
_INIT, _BATCH, _TRAIN, _EVAL = 0, 1, 2, 3


@dataclass
class RunResult:
    rows: list = field(default_factory=list)
    checkpoint: str = ""
    config_echo: str = ""
    wall_clock: float = 0.0
    table: list = field(default_factory=list)

    def metric(self, name, step=None):
        """Latest (or given-step) value of ``name`` in the rows."""
        hits = [r for r in self.rows if r[4] == name and (step is None or r[3] == step)]
        if not hits:
            raise KeyError(name)
        return hits[-1][5]


def child_rng(seed, stream, *extra):
    return np.random.default_rng([int(seed), stream, *extra])


def run_id(command, cfg):
    return f"{command}-{cfg.fingerprint()}-v{__version__}"


def metric_name(prefix, threshold):
    return f"{prefix}_inf" if np.isinf(threshold) else f"{prefix}_{threshold:g}"


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rid, model, seed, step, metric, value in rows:
            w.writerow((rid, model, seed, step, metric, format(float(value), ".17g")))


def _finish(cfg, command, rows, start, checkpoint="", table=None, extra=None):
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_metrics(os.path.join(cfg.output_dir, "metrics.csv"), rows)
    echo = os.path.join(cfg.output_dir, "config.echo.toml")
    write_echo(cfg, echo, {"command": command, "code_version": __version__, **(extra or {})})
    return RunResult(rows, checkpoint, echo, time.perf_counter() - start, table or [])


# ------------------------------------------------------------------- data
def load_split(cfg):
    """(train, eval) scene lists: the last ``eval_scenes`` records are held out."""
    if not os.path.exists(cfg.dataset):
        raise ContractViolation(f"dataset {cfg.dataset!r} does not exist")
    records = read_dataset(cfg.dataset)
    if len(records) <= cfg.eval_scenes:
        raise ContractViolation(
            f"dataset has {len(records)} scenes; need more than eval_scenes={cfg.eval_scenes}")
    n_points = {r.features.shape[0] for r in records}
    if len(n_points) != 1:
        raise ContractViolation("all scenes in a dataset must have the same point count")
    return records[:-cfg.eval_scenes], records[-cfg.eval_scenes:]


def stack(records, k):
    x = np.stack([r.features for r in records])
    labels = np.stack([r.labels for r in records])
    targets = np.stack([r.target_array(k) for r in records])
    return x, labels, targets


def batches(n, batch_size, total_steps, rng):
    """Index arrays for ``total_steps`` steps, reshuffling every epoch."""
    perm = rng.permutation(n)
    pos = 0
    for _ in range(total_steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def make_model(cfg, input_dim, rng, K=None):
    return SlotModel(cfg.model, K or cfg.K, input_dim, dim=cfg.D, hidden=cfg.hidden,
                     kmeans_beta=cfg.kmeans_beta, rng=rng)


def _schedule(cfg):
    return nn.LrSchedule(cfg.max_lr, cfg.total_steps, warmup_frac=cfg.warmup_frac)


def _abort(store, step, outdir):
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, FAILED_CHECKPOINT)
    nn.save_checkpoint(path, store.state_dict())
    raise NonFiniteLossError(step, path)


def _train_step(store, step, sched, outdir, loss_fn):
    """Loss, backward and Adam; on a non-finite loss save the pre-step parameters and abort."""
    try:
        loss = loss_fn()
    except NonFiniteValue:
        _abort(store, step, outdir)
    value = float(loss.data)
    if not np.isfinite(value):
        _abort(store, step, outdir)
    store.zero_grad()
    loss.backward()
    nn.adam_step(store, store.grads(), nn.onecycle_lr(step, sched))
    return value


# ---------------------------------------------------------- set prediction
def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def predict_sets(model, store, x, iterations, rng, chunk=64):
    preds = []
    with ad.no_grad():
        for sl in _chunks(len(x), chunk):
            slots, _, _ = model.slots(x[sl], iterations, rng)
            preds.append(setpred_head(slots, store).data)
    return np.concatenate(preds)


def ap_rows(preds, targets, thresholds, prefix="ap"):
    return [(metric_name(prefix, t), average_precision(preds, targets, t)) for t in thresholds]


def train_setpred(cfg: RunConfig, command="train-setpred") -> RunResult:
    start = time.perf_counter()
    train, held = load_split(cfg)
    x_tr, _, t_tr = stack(train, cfg.K)
    x_ev, _, t_ev = stack(held, cfg.K)
    init_rng = child_rng(cfg.seed, _INIT)
    model = make_model(cfg, x_tr.shape[-1], init_rng)
    store = model.params
    init_setpred_head(store, model.out_dim, cfg.hidden, init_rng)
    rid = run_id(command, cfg)
    rows = []

    def log(step, name, value):
        rows.append((rid, cfg.model, cfg.seed, step, name, value))

    def evaluate(step):
        preds = predict_sets(model, store, x_ev, cfg.iterations_eval, child_rng(cfg.seed, _EVAL))
        for name, value in ap_rows(preds, t_ev, SETPRED_THRESHOLDS):
            log(step, name, value)

    sched = _schedule(cfg)
    rng = child_rng(cfg.seed, _TRAIN)
    for step, idx in enumerate(batches(len(x_tr), cfg.batch_size, cfg.total_steps,
                                       child_rng(cfg.seed, _BATCH))):
        def loss_fn():
            slots, _, _ = model.slots(x_tr[idx], cfg.iterations_train, rng, cfg.detach_last)
            return set_loss(setpred_head(slots, store), t_tr[idx])[0]

        value = _train_step(store, step, sched, cfg.output_dir, loss_fn)
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            log(step, "loss", value)
        if (step + 1) % cfg.eval_every == 0 and step != cfg.total_steps - 1:
            evaluate(step + 1)
    evaluate(cfg.total_steps)
    os.makedirs(cfg.output_dir, exist_ok=True)
    ckpt = os.path.join(cfg.output_dir, CHECKPOINT)
    nn.save_checkpoint(ckpt, store.state_dict())
    return _finish(cfg, command, rows, start, ckpt, extra={"task": "setpred"})


# ---------------------------------------------------------- object discovery
def discovery_eval(model, store, x, labels, iterations, rng, K=None, chunk=64):
    """Mean FG-ARI of decoder-mask argmax and of slot-assignment argmax, plus recon MSE."""
    mask_scores, assign_scores, mse = [], [], []
    with ad.no_grad():
        for sl in _chunks(len(x), chunk):
            slots, assign, _ = model.slots(x[sl], iterations, rng)
            recon, masks = decode(slots, x[sl][..., :2], store)
            mse.append(((recon.data - x[sl]) ** 2).mean(axis=(1, 2)))
            m = masks.data.argmax(axis=1)
            a = assign.argmax(axis=-1)
            for i, lab in enumerate(labels[sl]):
                mask_scores.append(fg_ari(lab, m[i]))
                assign_scores.append(fg_ari(lab, a[i]))
    return float(np.mean(mask_scores)), float(np.mean(assign_scores)), float(np.concatenate(mse).mean())


def train_discovery(cfg: RunConfig, command="train-discovery") -> RunResult:
    start = time.perf_counter()
    train, held = load_split(cfg)
    x_tr, _, _ = stack(train, cfg.K)
    x_ev, l_ev, _ = stack(held, cfg.K)
    init_rng = child_rng(cfg.seed, _INIT)
    model = make_model(cfg, x_tr.shape[-1], init_rng)
    store = model.params
    init_decoder(store, model.out_dim, x_tr.shape[-1], cfg.hidden, init_rng)
    rid = run_id(command, cfg)
    rows = []

    def log(step, name, value):
        rows.append((rid, cfg.model, cfg.seed, step, name, value))

    def evaluate(step):
        ari, ari_assign, mse = discovery_eval(model, store, x_ev, l_ev, cfg.iterations_eval,
                                              child_rng(cfg.seed, _EVAL))
        log(step, "fg_ari", ari)
        log(step, "fg_ari_assign", ari_assign)
        log(step, "eval_mse", mse)

    sched = _schedule(cfg)
    rng = child_rng(cfg.seed, _TRAIN)
    for step, idx in enumerate(batches(len(x_tr), cfg.batch_size, cfg.total_steps,
                                       child_rng(cfg.seed, _BATCH))):
        def loss_fn():
            xb = x_tr[idx]
            slots, _, _ = model.slots(xb, cfg.iterations_train, rng, cfg.detach_last)
            recon, _ = decode(slots, xb[..., :2], store)
            return ad.mean(ad.square(ad.sub(recon, xb)))

        value = _train_step(store, step, sched, cfg.output_dir, loss_fn)
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            log(step, "loss", value)
        if (step + 1) % cfg.eval_every == 0 and step != cfg.total_steps - 1:
            evaluate(step + 1)
    evaluate(cfg.total_steps)
    os.makedirs(cfg.output_dir, exist_ok=True)
    ckpt = os.path.join(cfg.output_dir, CHECKPOINT)
    nn.save_checkpoint(ckpt, store.state_dict())
    return _finish(cfg, command, rows, start, ckpt, extra={"task": "discovery"})


# ---------------------------------------------------------- vanilla clustering
def _vanilla_slots(model, x, iterations, seed, stream):
    """Per-scene slots with a per-scene generator, so results do not depend on batching."""
    out = []
    for i, scene in enumerate(x):
        slots, _, _ = model.slots(scene[None], iterations, child_rng(seed, stream, i))
        out.append(slots.data[0])
    return np.stack(out)


def _fit_head(slots, targets, store, cfg, seed, outdir):
    sched = _schedule(cfg)
    curve = []
    for step, idx in enumerate(batches(len(slots), cfg.batch_size, cfg.total_steps,
                                       child_rng(seed, _BATCH))):
        def loss_fn():
            return set_loss(setpred_head(ad.Tensor(slots[idx]), store), targets[idx])[0]

        value = _train_step(store, step, sched, outdir, loss_fn)
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            curve.append((step, value))
    return curve


def compare_vanilla(cfg: RunConfig, command="compare-vanilla") -> RunResult:
    """Classic k-means and GMM slots under a trained set-prediction head.

    Slot extraction has no trainable parameters, so slots are computed once
    per scene and only the head is optimized. The step-0 AP of the untrained
    head is logged as the no-training baseline. The returned table holds the
    final AP for both models at every threshold and seed.
    """
    start = time.perf_counter()
    train, held = load_split(cfg)
    x_tr, _, t_tr = stack(train, cfg.K)
    x_ev, _, t_ev = stack(held, cfg.K)
    rid = run_id(command, cfg)
    rows, table = [], []
    for seed in cfg.seeds:
        for kind in ("kmeans", "gmm"):
            mcfg = cfg.replace(model=kind)
            model = make_model(mcfg, x_tr.shape[-1], None)
            s_tr = _vanilla_slots(model, x_tr, cfg.iterations_train, seed, _TRAIN)
            s_ev = _vanilla_slots(model, x_ev, cfg.iterations_eval, seed, _EVAL)
            store = nn.ParameterStore()
            init_setpred_head(store, model.out_dim, cfg.hidden, child_rng(seed, _INIT))

            def evaluate():
                with ad.no_grad():
                    preds = setpred_head(ad.Tensor(s_ev), store).data
                return ap_rows(preds, t_ev, VANILLA_THRESHOLDS)

            for name, value in evaluate():
                rows.append((rid, kind, seed, 0, "baseline_" + name, value))
            curve = _fit_head(s_tr, t_tr, store, cfg, seed,
                              os.path.join(cfg.output_dir, f"{kind}-{seed}"))
            for step, value in curve:
                rows.append((rid, kind, seed, step, "loss", value))
            for name, value in evaluate():
                rows.append((rid, kind, seed, cfg.total_steps, name, value))
                table.append({"model": kind, "seed": seed, "metric": name, "value": value})
    return _finish(cfg, command, rows, start, table=table, extra={"task": "compare-vanilla"})


# ------------------------------------------------------------------ sweeps
def load_trained(checkpoint):
    """Rebuild a trained model from ``checkpoint`` and the config echo beside it."""
    echo = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.echo.toml")
    if not os.path.exists(echo):
        raise ContractViolation(f"no config.echo.toml next to checkpoint {checkpoint!r}")
    tcfg = read_echo(echo)
    state = nn.load_checkpoint(checkpoint)
    return tcfg, state


def _rebuild(tcfg, state, task, input_dim, K=None):
    model = make_model(tcfg, input_dim, child_rng(tcfg.seed, _INIT), K=K)
    store = model.params
    if task == "discovery":
        init_decoder(store, model.out_dim, input_dim, tcfg.hidden, child_rng(tcfg.seed, _INIT))
    else:
        init_setpred_head(store, model.out_dim, tcfg.hidden, child_rng(tcfg.seed, _INIT))
    store.load_state_dict(state)
    return model, store


def _sweep_scenes(tcfg, cfg, count=None):
    spec = SceneSpec(max_objects=tcfg.max_objects, points_per_object=tcfg.points_per_object,
                     background_points=tcfg.background_points)
    if count is not None:
        spec = spec.with_objects(count)
    # a seed stream disjoint from the training data's
    return gen_dataset(spec, cfg.sweep_scenes, cfg.seed + 1_000_003)


def sweep_iterations(cfg: RunConfig, command="sweep-iterations") -> RunResult:
    start = time.perf_counter()
    tcfg, state = load_trained(cfg.checkpoint)
    scenes = _sweep_scenes(tcfg, cfg)
    x, labels, _ = stack(scenes, tcfg.K)
    model, store = _rebuild(tcfg, state, "discovery", x.shape[-1])
    rid = run_id(command, cfg)
    rows, table = [], []
    for t in cfg.iteration_list:
        ari, ari_assign, _ = discovery_eval(model, store, x, labels, t, child_rng(cfg.seed, _EVAL))
        rows.append((rid, tcfg.model, cfg.seed, t, "fg_ari", ari))
        rows.append((rid, tcfg.model, cfg.seed, t, "fg_ari_assign", ari_assign))
        table.append({"iterations": t, "fg_ari": ari, "fg_ari_assign": ari_assign})
    return _finish(cfg, command, rows, start, table=table,
                   extra={"trained_iterations": tcfg.iterations_train})


def sweep_objects(cfg: RunConfig, command="sweep-objects") -> RunResult:
    """FG-ARI on scenes with exactly ``c`` objects, using ``c + 1`` slots."""
    start = time.perf_counter()
    tcfg, state = load_trained(cfg.checkpoint)
    rid = run_id(command, cfg)
    rows, table = [], []
    for c in cfg.object_counts:
        if c < 1:
            raise ContractViolation("sweep_objects: object counts must be >= 1")
        scenes = _sweep_scenes(tcfg, cfg, c)
        x, labels, _ = stack(scenes, c + 1)
        model, store = _rebuild(tcfg, state, "discovery", x.shape[-1], K=c + 1)
        ari, ari_assign, _ = discovery_eval(model, store, x, labels, tcfg.iterations_eval,
                                            child_rng(cfg.seed, _EVAL))
        rows.append((rid, tcfg.model, cfg.seed, c, "fg_ari", ari))
        rows.append((rid, tcfg.model, cfg.seed, c, "fg_ari_assign", ari_assign))
        table.append({"objects": c, "fg_ari": ari, "fg_ari_assign": ari_assign})
    return _finish(cfg, command, rows, start, table=table,
                   extra={"trained_max_objects": tcfg.max_objects})


# ------------------------------------------------------------ concept demo
def contingency_purity(concepts, classes):
    """Fraction of items whose class is the majority class of their concept."""
    concepts = np.asarray(concepts)
    classes = np.asarray(classes)
    hits = 0
    for c in np.unique(concepts):
        hits += np.bincount(classes[concepts == c]).max()
    return hits / len(concepts)


def concept_edit(slots, pi, library, rng):
    """Replace one non-empty slot per scene by a sample from its most likely concept.

    Returns (edited slots, per-scene replaced slot index or -1).
    """
    slots = np.array(slots, dtype=np.float64)
    keep = ~empty_slot_mask(pi)
    edited = slots.copy()
    replaced = np.full(len(slots), -1)
    for s in range(len(slots)):
        live = np.flatnonzero(keep[s])
        if live.size == 0:
            continue
        j = live[int(rng.integers(live.size))]
        c = int(gmm_e_step(slots[s, j][None], library)[0].argmax())
        edited[s, j] = concept_sample(library, c, rng)
        replaced[s] = j
    return edited, replaced


def concept_demo(cfg: RunConfig, command="concept-demo") -> RunResult:
    """Concept library over the slots of a trained set-prediction SMM."""
    start = time.perf_counter()
    tcfg, state = load_trained(cfg.checkpoint)
    if tcfg.model != "smm":
        raise ContractViolation("concept_demo needs a slot mixture checkpoint")
    _, held = load_split(cfg.replace(eval_scenes=min(cfg.eval_scenes, cfg.sweep_scenes)))
    x, _, targets = stack(held, tcfg.K)
    model, store = _rebuild(tcfg, state, "setpred", x.shape[-1])
    rng = child_rng(cfg.seed, _EVAL)
    with ad.no_grad():
        out, _ = smm_forward(x, model.params, model.cfg, tcfg.iterations_eval, rng=rng,
                                  K=tcfg.K)
    full = out.slots_full.data
    pi = out.pi.data
    keep = ~empty_slot_mask(pi)
    if not keep.any():
        raise ContractViolation("concept_demo: every slot is empty")
    bank = full[keep]
    lib_rng = child_rng(cfg.seed, _TRAIN)
    library = concept_library_fit(bank, cfg.concepts, lib_rng)
    edited, replaced = concept_edit(full, pi, library, lib_rng)

    def head(slot_full):
        red = slot_full @ store["reduce.W"].data if model.cfg.reduce else slot_full
        with ad.no_grad():
            return setpred_head(ad.Tensor(red), store).data

    p0, p1 = head(full), head(edited)
    l0, assign = set_loss(p0, targets)
    l1, _ = set_loss(p1, targets)
    # purity of concepts against the shape of the object each slot is matched to
    concept_ids = gmm_e_step(bank, library).argmax(axis=1)
    matched = np.take_along_axis(targets, assign[:, :, None], axis=1)[keep]
    real = matched[:, LAYOUT.presence] > 0.5
    shapes = matched[:, LAYOUT.shape].argmax(-1)
    purity = contingency_purity(concept_ids[real], shapes[real]) if real.any() else 0.0
    chance = np.bincount(shapes[real]).max() / max(1, real.sum()) if real.any() else 0.0
    rid = run_id(command, cfg)
    rows = [(rid, "smm", cfg.seed, 0, name, value) for name, value in (
        ("empty_fraction", 1.0 - keep.mean()),
        ("set_loss_original", float(l0.data)),
        ("set_loss_edited", float(l1.data)),
        ("set_loss_delta", float(l1.data) - float(l0.data)),
        ("concept_purity", purity),
        ("purity_chance", chance),
    )]
    os.makedirs(cfg.output_dir, exist_ok=True)
    np.savez(os.path.join(cfg.output_dir, "edited_predictions.npz"), original=p0, edited=p1,
             replaced=replaced)
    return _finish(cfg, command, rows, start, extra={"concepts": cfg.concepts})

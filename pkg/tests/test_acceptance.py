"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed in the terminal summary under
"acceptance criteria") and then asserts it. Criteria 5, 6 and 8 train models
at desk scale and take most of the runtime; deselect them with ``-m "not slow"``.
"""
import itertools
import time

import numpy as np
import pytest

from slotmix import autodiff as ad
from slotmix import kernels
from slotmix.evaluation import (PropertyVector, adjusted_rand_index, ap_from_ranked,
                                average_precision, fg_ari, hungarian, pad_targets)
from slotmix.harness import checks, cli, train
from slotmix.harness.config import RunConfig, build_config
from slotmix.scenes import SceneSpec, gen_dataset, oracle_fg_ari, write_dataset
from slotmix.slot_attention import init_sa_params, sa_forward
from slotmix.slot_common import SlotConfig
from slotmix.slot_mixture import (VAR_FLOOR, SlotMixtureState, init_smm_params, smm_forward)

SEEDS = (0, 1, 2, 3)

# desk-scale budgets; every model in a comparison gets the same one
DATA_SCENES, DATA_SEED, HOLDOUT = 2200, 11, 200
VANILLA = dict(total_steps=5000, max_lr=3e-3, hidden=128, batch_size=32, kmeans_beta=50.0)
DISCOVERY = dict(total_steps=1500, max_lr=2e-3, D=32, hidden=32, batch_size=32)
DISCOVERY_FLOOR = 0.7


@pytest.fixture(scope="module")
def scenes_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "scenes.jsonl"
    write_dataset(gen_dataset(SceneSpec(), DATA_SCENES, DATA_SEED), path)
    return str(path)


# ------------------------------------------------------------------ 1
def test_criterion_01_reduction_oracle(record_criterion):
    start = time.perf_counter()
    report = checks.reduction_check(instances=50, seed=0)
    elapsed = time.perf_counter() - start
    ok = report.passed and elapsed < 10.0
    record_criterion(1, ok, f"max |SMM-EM| {report.max_smm:.2e}, max |SA-soft k-means| "
                            f"{report.max_sa:.2e} (tol 1e-9), {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 2
def test_criterion_02_gradient_suite(record_criterion):
    start = time.perf_counter()
    report = checks.grad_check(seed=0)
    elapsed = time.perf_counter() - start
    name, worst = report.worst
    ok = worst < 1e-4 and elapsed < 60.0
    record_criterion(2, ok, f"{len(report.errors)} cases, worst {name} {worst:.2e} (tol 1e-4), "
                            f"{elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 3
def _invariant_errors(seed):
    r = np.random.default_rng(seed)
    n, k, d_in = int(r.integers(4, 30)), int(r.integers(1, 6)), int(r.integers(2, 6))
    cfg = SlotConfig(input_dim=d_in, dim=int(r.integers(2, 8)), hidden=int(r.integers(2, 8)))
    x = r.normal(size=(2, n, d_in))
    smm_params, sa_params = init_smm_params(cfg, r), init_sa_params(cfg, r)
    mu = r.normal(size=(2, k, cfg.dim))
    var = r.uniform(0.5, 2, size=(2, k, cfg.dim))
    pi = np.full((2, k), 1.0 / k)
    slots = r.normal(size=(2, k, cfg.dim))
    sp, ip = r.permutation(k), r.permutation(n)

    def smm(xx, m, v, p):
        state = SlotMixtureState(ad.Tensor(m), ad.Tensor(v), ad.Tensor(p))
        return smm_forward(xx, smm_params, cfg, 3, init_state=state, detach_last=False)

    def sa(xx, s):
        return sa_forward(xx, sa_params, cfg, 3, init_slots=s, detach_last=False)

    with ad.no_grad():
        out, st = smm(x, mu, var, pi)
        out_s, st_s = smm(x, mu[:, sp], var[:, sp], pi[:, sp])
        out_i, st_i = smm(x[:, ip], mu, var, pi)
        a = sa(x, slots)
        a_s = sa(x, slots[:, sp])
        a_i = sa(x[:, ip], slots)
    return {
        "pi_sum": np.abs(st.pi.data.sum(-1) - 1).max(),
        "gamma_rows": np.abs(st.gamma.data.sum(-1) - 1).max(),
        "var_floor": max(0.0, VAR_FLOOR - st.var.data.min()),
        "attn_rows": np.abs(a.attn.data.sum(-1) - 1).max(),
        "slot_equivariance": max(np.abs(out_s.slots_full.data - out.slots_full.data[:, sp]).max(),
                                 np.abs(st_s.gamma.data - st.gamma.data[..., sp]).max(),
                                 np.abs(a_s.slots.data - a.slots.data[:, sp]).max()),
        "input_invariance": max(np.abs(out_i.slots_full.data - out.slots_full.data).max(),
                                np.abs(st_i.gamma.data - st.gamma.data[:, ip]).max(),
                                np.abs(a_i.slots.data - a.slots.data).max()),
    }


INVARIANT_TOL = {"pi_sum": 1e-12, "gamma_rows": 1e-12, "var_floor": 0.0, "attn_rows": 1e-12,
                 "slot_equivariance": 1e-12, "input_invariance": 1e-10}


def test_criterion_03_invariant_suite(record_criterion):
    worst = dict.fromkeys(INVARIANT_TOL, 0.0)
    for seed in range(100):
        for name, err in _invariant_errors(seed).items():
            worst[name] = max(worst[name], float(err))
    bad = [n for n, e in worst.items() if not (e <= INVARIANT_TOL[n] if n == "var_floor"
                                               else e < INVARIANT_TOL[n])]
    record_criterion(3, not bad, "100 instances; worst " +
                     ", ".join(f"{n} {e:.1e}" for n, e in worst.items()))
    assert not bad


# ------------------------------------------------------------------ 4
def _brute_force(cost):
    n = cost.shape[0]
    best = min(itertools.permutations(range(n)), key=lambda p: cost[np.arange(n), p].sum())
    return np.array(best)


def _obj(x, y, presence=1.0, color=0):
    return PropertyVector((x, y), 0.5, 0, color, presence).to_array()


def test_criterion_04_matching_oracle(record_criterion):
    rng = np.random.default_rng(4)
    mismatches = 0
    backends = [kernels.python_backend] + ([kernels.compiled_backend]
                                           if kernels.compiled_backend is not None else [])
    for i in range(200):
        k = 1 + i % 7
        cost = rng.normal(size=(k, k)) * rng.choice([0.1, 1.0, 100.0])
        want = _brute_force(cost)
        got = [hungarian(cost)] + [b.hungarian(cost) for b in backends]
        mismatches += sum(not np.array_equal(g, want) for g in got)

    hand = []
    hand.append(abs(ap_from_ranked([1, 0, 1], 2) - 5 / 6))
    hand.append(abs(ap_from_ranked([0, 1], 1) - 0.5))
    t = [np.stack([_obj(0, 0), _obj(0.5, 0.5, color=2)])]
    p = [np.stack([_obj(0, 0, 0.9), _obj(0.9, 0.9, 0.8, color=4), _obj(0.5, 0.5, 0.7, color=2)])]
    hand.append(abs(average_precision(p, t, np.inf) - 5 / 6))
    t = [pad_targets([PropertyVector((0, 0), 0.5, 0, 0)], 2), pad_targets([], 2)]
    p = [np.stack([_obj(0, 0, 0.9), _obj(1, 1, 0.0)]), np.stack([_obj(0, 0, 0.95), _obj(0, 0, 0.0)])]
    hand.append(abs(average_precision(p, t, np.inf) - 0.5))
    hand.append(abs(adjusted_rand_index([1, 1, 2, 2], [0, 1, 0, 1]) + 0.5))
    hand.append(abs(adjusted_rand_index([1, 1, 1, 2, 2, 2], [0, 0, 0, 0, 1, 1])
                    - (4 - 42 / 15) / (6.5 - 42 / 15)))
    hand.append(abs(fg_ari(np.array([0, 0, 1, 1, 2, 2]), np.array([5, 6, 0, 0, 1, 1])) - 1.0))
    worst = max(hand)
    ok = mismatches == 0 and worst <= 1e-12
    record_criterion(4, ok, f"200 matrices K<=7 x {1 + len(backends)} solvers: {mismatches} "
                            f"mismatches; {len(hand)} AP/ARI hand cases, worst {worst:.1e}")
    assert ok


# ------------------------------------------------------------------ 5
@pytest.mark.slow
def test_criterion_05_gmm_beats_kmeans(scenes_path, tmp_path, record_criterion):
    cfg = build_config(overrides=dict(VANILLA, dataset=scenes_path, eval_scenes=HOLDOUT,
                                      seeds=list(SEEDS), log_every=500,
                                      output_dir=str(tmp_path / "vanilla")))
    start = time.perf_counter()
    res = train.compare_vanilla(cfg)
    elapsed = time.perf_counter() - start
    final = {(r["model"], r["seed"]): r["value"] for r in res.table if r["metric"] == "ap_inf"}
    base = {(r[1], r[2]): r[5] for r in res.rows if r[4] == "baseline_ap_inf"}
    wins = sum(final["gmm", s] > final["kmeans", s] for s in SEEDS)
    above_baseline = all(final[key] > base[key] for key in final)
    ok = wins >= 3 and above_baseline
    pairs = ", ".join(f"{final['gmm', s]:.3f}/{final['kmeans', s]:.3f}" for s in SEEDS)
    record_criterion(5, ok, f"AP_inf gmm/kmeans per seed {pairs}; gmm wins {wins}/4; "
                            f"all above no-training baseline: {above_baseline}; {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 6 and 8
@pytest.fixture(scope="module")
def discovery_runs(scenes_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("discovery")
    runs = {}
    for seed in SEEDS:
        for model in ("smm", "sa"):
            cfg = build_config(overrides=dict(DISCOVERY, model=model, seed=seed, dataset=scenes_path,
                                              eval_scenes=HOLDOUT, eval_every=500, log_every=100,
                                              output_dir=str(out / f"{model}{seed}")))
            runs[model, seed] = train.train_discovery(cfg)
    return runs


@pytest.mark.slow
def test_criterion_06_smm_vs_sa_short_budget(discovery_runs, record_criterion):
    ari = {key: res.metric("fg_ari") for key, res in discovery_runs.items()}
    wins = sum(ari["smm", s] >= ari["sa", s] for s in SEEDS)
    floor = all(v >= DISCOVERY_FLOOR for v in ari.values())
    ok = wins >= 3 and floor
    pairs = ", ".join(f"{ari['smm', s]:.3f}/{ari['sa', s]:.3f}" for s in SEEDS)
    record_criterion(6, ok, f"FG-ARI smm/sa per seed {pairs}; smm >= sa on {wins}/4; "
                            f"all >= {DISCOVERY_FLOOR}: {floor}")
    assert ok


def _slope(xs, ys):
    return np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)[0]


@pytest.mark.slow
def test_criterion_08_sweep_shapes(discovery_runs, tmp_path, record_criterion):
    # the sweeps characterize trained models; runs still below the discovery floor are
    # excluded and named, and each model must keep at least one checkpoint
    trained_runs = {key: res for key, res in discovery_runs.items()
                    if res.metric("fg_ari") >= DISCOVERY_FLOOR}
    skipped = sorted(f"{m}{s}" for m, s in set(discovery_runs) - set(trained_runs))
    problems, notes = [], []
    for model in ("smm", "sa"):
        if not any(m == model for m, _ in trained_runs):
            problems.append(f"no {model} checkpoint reached FG-ARI {DISCOVERY_FLOOR}")
    trained = RunConfig().iterations_train
    for (model, seed), res in sorted(trained_runs.items()):
        cfg = build_config(overrides=dict(checkpoint=res.checkpoint, sweep_scenes=200,
                                          output_dir=str(tmp_path / f"{model}{seed}")))
        its = {r["iterations"]: r["fg_ari"] for r in train.sweep_iterations(cfg).table}
        objs = train.sweep_objects(cfg).table
        counts = [r["objects"] for r in objs]
        aris = [r["fg_ari"] for r in objs]
        slope = _slope(counts, aris)
        if not its[1] < its[trained]:
            problems.append(f"{model}{seed}: 1 iteration {its[1]:.3f} >= {its[trained]:.3f}")
        if not (aris[-1] < aris[0] and slope < 0):
            problems.append(f"{model}{seed}: no degradation over {counts} ({aris[0]:.3f} -> "
                            f"{aris[-1]:.3f}, slope {slope:.4f})")
        notes.append(f"{model}{seed} it1 {its[1]:.2f}<it{trained} {its[trained]:.2f}, "
                     f"obj{counts[0]} {aris[0]:.2f}->obj{counts[-1]} {aris[-1]:.2f}")
    summary = notes[:2] + [f"{len(notes)} checkpoints swept, below floor and skipped: {skipped or 'none'}"]
    record_criterion(8, not problems, "; ".join(problems or summary))
    assert not problems


# ------------------------------------------------------------------ 7
def test_criterion_07_generator_separability(record_criterion):
    cfg = RunConfig()
    records = gen_dataset(cli.scene_spec(cfg), cfg.n_scenes, cfg.seed)
    scores = np.array([oracle_fg_ari(r) for r in records])
    ok = scores.min() >= 0.95
    record_criterion(7, ok, f"{len(scores)} default scenes, oracle GMM FG-ARI min "
                            f"{scores.min():.4f} mean {scores.mean():.4f}")
    assert ok


# ------------------------------------------------------------------ 9
TINY = ["--K", "7", "--D", "8", "--hidden", "8", "--batch_size", "4", "--total_steps", "3",
        "--eval_scenes", "6", "--eval_every", "2", "--log_every", "1", "--iterations_train", "2",
        "--iterations_eval", "2", "--sweep_scenes", "4", "--seeds", "0,1"]


def test_criterion_09_determinism(tmp_path, record_criterion):
    data = str(tmp_path / "scenes.jsonl")
    setpred_ck = str(tmp_path / "setpred-0" / train.CHECKPOINT)
    disc_ck = str(tmp_path / "train-discovery-0" / train.CHECKPOINT)
    commands = [
        ("gen-data", ["--n_scenes", "30"]),
        ("train-setpred", ["--model", "smm"]),
        ("train-discovery", []),
        ("compare-vanilla", []),
        ("sweep-iterations", ["--checkpoint", disc_ck, "--iteration_list", "1,2"]),
        ("sweep-objects", ["--checkpoint", disc_ck, "--object_counts", "6,7"]),
        ("reduction-check", ["--instances", "5"]),
        ("grad-check", []),
        ("concept-demo", ["--checkpoint", setpred_ck, "--concepts", "2"]),
    ]
    assert {c for c, _ in commands} == set(cli.COMMANDS)
    differing, codes = [], {}
    for cmd, extra in commands:
        outputs = []
        for rep in range(2):
            out = tmp_path / ("setpred" if cmd == "train-setpred" else cmd)
            out = f"{out}-{rep}"
            codes[cmd, rep] = cli.main([cmd, "--dataset", data, "--output_dir", out] + TINY + extra)
            blob = open(f"{out}/metrics.csv", "rb").read()
            if cmd == "gen-data":
                blob += open(data, "rb").read()
            outputs.append(blob)
        if outputs[0] != outputs[1]:
            differing.append(cmd)
    failed = sorted({c for (c, _), code in codes.items() if code != 0})
    ok = not differing and not failed
    record_criterion(9, ok, f"{len(commands)} subcommands x 2 runs; differing metrics.csv: "
                            f"{differing or 'none'}; non-zero exits: {failed or 'none'}")
    assert ok


# ------------------------------------------------------------------ 10
def test_criterion_10_parameter_parity(record_criterion):
    counts = []
    for dim, hidden in ((8, 8), (32, 32), (64, 64), (64, 128), (128, 256)):
        cfg = SlotConfig(input_dim=10, dim=dim, hidden=hidden)
        sa = init_sa_params(cfg, np.random.default_rng(0)).num_scalars()
        smm = init_smm_params(cfg, np.random.default_rng(0)).num_scalars()
        counts.append((dim, hidden, sa, smm))
    ok = all(sa == smm for *_, sa, smm in counts)
    record_criterion(10, ok, "SA/SMM scalars at (D, hidden): " +
                     ", ".join(f"({d},{h}) {a}/{b}" for d, h, a, b in counts))
    assert ok

import csv
import os

import numpy as np
import pytest

from slotmix import nn
from slotmix.errors import NonFiniteLossError
from slotmix.harness import cli, train
from slotmix.harness.config import ConfigError, RunConfig, build_config, read_echo
from slotmix.scenes import SceneSpec, gen_dataset, write_dataset

TINY = dict(K=7, D=8, hidden=8, batch_size=4, total_steps=3, eval_scenes=6, eval_every=2,
            log_every=1, iterations_train=2, iterations_eval=2, sweep_scenes=4)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "scenes.jsonl"
    write_dataset(gen_dataset(SceneSpec(), 20, seed=0), path)
    return str(path)


def tiny(dataset, out, **kw):
    return build_config(overrides={**TINY, "dataset": dataset, "output_dir": str(out), **kw})


# ---------------------------------------------------------------- config
def test_defaults_validate():
    cfg = RunConfig().validate()
    assert (cfg.K, cfg.D, cfg.iterations_train, cfg.iterations_eval) == (7, 64, 5, 7)
    assert (cfg.batch_size, cfg.total_steps) == (64, 20_000)


def test_validation_reports_every_problem():
    with pytest.raises(ConfigError) as err:
        build_config(overrides={"model": "vae", "iterations_train": 0, "max_lr": -1,
                                "seeds": "0,x", "bogus": 1})
    text = str(err.value)
    for field in ("model", "iterations_train", "max_lr", "seeds", "bogus"):
        assert field in text
    assert len(err.value.problems) >= 5


def test_toml_then_flags(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('model = "sa"\nK = 9\nmax_lr = 1e-3\nseeds = [4, 5]\n')
    cfg = build_config(path, {"K": "8", "detach_last": "false"})
    assert (cfg.model, cfg.K, cfg.max_lr, cfg.seeds, cfg.detach_last) == ("sa", 8, 1e-3, [4, 5], False)


def test_echo_round_trip(tmp_path):
    cfg = build_config(overrides={"model": "gmm", "seeds": "1,2"})
    from slotmix.harness.config import write_echo
    write_echo(cfg, tmp_path / "e.toml", {"command": "x"})
    assert read_echo(tmp_path / "e.toml") == cfg


# ---------------------------------------------------------------- training
def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_one_step_changes_parameters(dataset, tmp_path):
    cfg = tiny(dataset, tmp_path, total_steps=1)
    train_, _ = train.load_split(cfg)
    model = train.make_model(cfg, 10, train.child_rng(cfg.seed, train._INIT))
    from slotmix.harness.models import init_setpred_head
    init_setpred_head(model.params, model.out_dim, cfg.hidden, train.child_rng(cfg.seed, train._INIT))
    before = model.params.state_dict()
    res = train.train_setpred(cfg)
    after = nn.load_checkpoint(res.checkpoint)
    assert list(after) == list(before)
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_setpred_rows_and_determinism(dataset, tmp_path):
    a = train.train_setpred(tiny(dataset, tmp_path / "a"))
    b = train.train_setpred(tiny(dataset, tmp_path / "b"))
    assert a.rows == b.rows
    rows = _read(tmp_path / "a" / "metrics.csv")
    assert rows[0] == ["run_id", "model", "seed", "step", "metric", "value"]
    metrics = {r[4] for r in rows[1:]}
    assert {"loss", "ap_inf", "ap_0.5", "ap_0.25", "ap_0.125", "ap_0.0625", "ap_0.03125"} <= metrics
    keys = [(r[0], r[2], r[1], r[3], r[4]) for r in rows[1:]]
    assert len(keys) == len(set(keys))
    assert all(r[0].endswith("-v0.1.0") for r in rows[1:])


@pytest.mark.parametrize("model", ["sa", "smm"])
def test_discovery_runs(dataset, tmp_path, model):
    res = train.train_discovery(tiny(dataset, tmp_path, model=model))
    assert -1.0 <= res.metric("fg_ari") <= 1.0
    assert os.path.exists(res.checkpoint) and os.path.exists(res.config_echo)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_prior_checkpoint(dataset, tmp_path):
    cfg = tiny(dataset, tmp_path, max_lr=1e300, total_steps=50, warmup_frac=0.0)
    with pytest.raises(NonFiniteLossError) as err:
        train.train_setpred(cfg)
    assert err.value.step > 0
    state = nn.load_checkpoint(err.value.checkpoint)
    assert all(np.all(np.isfinite(v)) for v in state.values())


def test_compare_vanilla_table_shape(dataset, tmp_path):
    res = train.compare_vanilla(tiny(dataset, tmp_path, seeds="0,1", kmeans_beta=20.0))
    assert len(res.table) == 2 * 5 * 2
    assert {r["model"] for r in res.table} == {"kmeans", "gmm"}
    assert any(r[4].startswith("baseline_") for r in res.rows)


def test_sweeps_table_shape(dataset, tmp_path):
    res = train.train_discovery(tiny(dataset, tmp_path / "t"))
    it = train.sweep_iterations(tiny(dataset, tmp_path / "i", checkpoint=res.checkpoint,
                                     iteration_list="1,3,4"))
    assert [r["iterations"] for r in it.table] == [1, 3, 4]
    ob = train.sweep_objects(tiny(dataset, tmp_path / "o", checkpoint=res.checkpoint,
                                  object_counts="6,8"))
    assert [r["objects"] for r in ob.table] == [6, 8]


def test_concept_demo(dataset, tmp_path):
    res = train.train_setpred(tiny(dataset, tmp_path / "t", model="smm"))
    demo = train.concept_demo(tiny(dataset, tmp_path / "c", checkpoint=res.checkpoint, concepts=2))
    assert 0.0 <= demo.metric("empty_fraction") <= 1.0
    assert np.isfinite(demo.metric("set_loss_delta"))
    assert os.path.exists(tmp_path / "c" / "edited_predictions.npz")


def test_concept_edit_zero_variance_library_reproduces_predictions():
    from slotmix.clustering import GmmState
    slots = np.array([[[1.0, 2.0], [5.0, 5.0]], [[1.0, 2.0], [5.0, 5.0]]])
    lib = GmmState(np.array([[1.0, 2.0], [5.0, 5.0]]), np.full((2, 2), 1e-16), np.full(2, 0.5))
    edited, replaced = train.concept_edit(slots, np.full((2, 2), 0.5), lib, np.random.default_rng(0))
    assert np.all(replaced >= 0)
    np.testing.assert_allclose(edited, slots, atol=1e-6)


def test_contingency_purity():
    assert train.contingency_purity([0, 0, 1, 1], [2, 2, 1, 0]) == 0.75


# ---------------------------------------------------------------- CLI
def test_cli_config_error_exit_code(capsys):
    assert cli.main(["train-setpred", "--iterations_eval", "0", "--model", "x",
                     "--dataset", "/nonexistent.jsonl"]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "iterations_eval" in err and "model" in err


def test_cli_missing_dataset_and_checkpoint(tmp_path):
    assert cli.main(["train-discovery", "--dataset", str(tmp_path / "none")]) == cli.EXIT_CONFIG
    assert cli.main(["sweep-iterations", "--output_dir", str(tmp_path)]) == cli.EXIT_CONFIG


def test_cli_every_field_has_a_flag():
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == set(cli.COMMANDS)
    for p in sub.values():
        flags = {a.dest for a in p._actions}
        assert set(RunConfig().to_dict()) <= flags


def test_cli_gen_data(tmp_path):
    out = tmp_path / "d.jsonl"
    assert cli.main(["gen-data", "--dataset", str(out), "--n_scenes", "5",
                     "--output_dir", str(tmp_path / "r")]) == 0
    assert out.exists() and (tmp_path / "r" / "metrics.csv").exists()
    assert (tmp_path / "r" / "config.echo.toml").exists()


def test_cli_checks_exit_codes(tmp_path):
    assert cli.main(["reduction-check", "--instances", "5", "--output_dir", str(tmp_path / "a")]) == 0
    assert cli.main(["reduction-check", "--instances", "5", "--perturb", "gru",
                     "--output_dir", str(tmp_path / "b")]) == cli.EXIT_FAIL
    assert cli.main(["grad-check", "--inject_fault", "--output_dir", str(tmp_path / "c")]) == cli.EXIT_FAIL


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_nan_abort_exit_code(dataset, tmp_path):
    args = ["train-setpred", "--dataset", dataset, "--output_dir", str(tmp_path), "--max_lr", "1e300",
            "--total_steps", "50", "--warmup_frac", "0", "--eval_scenes", "6", "--D", "8",
            "--hidden", "8", "--batch_size", "4", "--eval_every", "100"]
    assert cli.main(args) == cli.EXIT_FAIL
    assert (tmp_path / train.FAILED_CHECKPOINT).exists()

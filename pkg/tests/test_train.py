import pickle

import numpy as np
import pytest

from adaptive_cbf.learner.train import (
    METRIC_COLUMNS,
    TrainConfig,
    Trainer,
    config_from_dict,
    episode_rngs,
    load_model,
    make_task,
    read_checkpoint,
    run_episode,
    summarize,
)

SMALL = dict(n_envs=4, n_steps=256, n_minibatches=4, update_epochs=2, hidden=(16, 16), eval_episodes=2,
             min_agents=3, max_agents=3)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


def test_resolved_defaults():
    nav = TrainConfig().resolved()
    assert (nav.total_steps, nav.frame_stack, nav.n_envs, nav.pid_kp, nav.perturb_alpha) == (200_000, 5, 4, 10.0, 0.0)
    race = TrainConfig(env="race").resolved()
    assert (race.total_steps, race.n_envs, race.pid_kp) == (300_000, 2, 1.0)
    abl = TrainConfig(ablate=True).resolved()
    assert (abl.frame_stack, abl.perturb_alpha) == (1, 0.5)
    assert nav.cost_limit == 0.25 and nav.n_steps == 2048 and nav.lambda_init == 1.0
    assert nav.n_iterations == 25


@pytest.mark.parametrize("bad", [dict(env="moon"), dict(cost_limit=1.5), dict(learning_rate=0.0),
                                 dict(discount=1.2), dict(pid_kp=-1.0), dict(min_agents=2),
                                 dict(n_steps=2, n_envs=1)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).resolved()


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError):
        config_from_dict({"warp_speed": 9})


def test_smoke_run_emits_rows_and_lambda_drops():
    tr = Trainer(small(total_steps=3 * 1024), seed=0)
    rows = [tr.iterate() for _ in range(tr.cfg.n_iterations)]
    assert len(rows) == 3
    assert all(set(METRIC_COLUMNS) == set(r) for r in rows)
    assert [r["env_steps"] for r in rows] == [1024, 2048, 3072]
    assert all(0.0 <= r["lambda"] <= 100.0 for r in rows)
    assert all(0.0 <= r["mean_gamma"] <= 1.0 for r in rows)
    # no collisions in this short run, so the multiplier is driven straight to zero
    assert all(r["ma_cost"] == 0.0 for r in rows)
    assert rows[0]["lambda"] == 0.0


def test_lambda_reaches_zero_within_five_iterations_from_high_start():
    tr = Trainer(small(total_steps=5 * 1024, lambda_init=50.0), seed=1)
    lams = [tr.iterate()["lambda"] for _ in range(5)]
    assert 0.0 in lams


def test_identical_seeds_identical_rows():
    a = Trainer(small(total_steps=2048), seed=3)
    b = Trainer(small(total_steps=2048), seed=3)
    assert [a.iterate() for _ in range(2)] == [b.iterate() for _ in range(2)]
    np.testing.assert_array_equal(a.model.params, b.model.params)
    c = Trainer(small(total_steps=2048), seed=4)
    assert c.iterate() != Trainer(small(total_steps=2048), seed=3).iterate()


def test_resume_is_bit_exact(tmp_path):
    tr = Trainer(small(total_steps=3 * 1024), seed=5)
    tr.iterate()
    tr.iterate()
    path = tr.save(tmp_path / "ck.pkl")
    expected = tr.iterate()
    params = tr.model.params.copy()
    back = Trainer.load(path)
    assert back.iteration == 2
    assert back.iterate() == expected
    np.testing.assert_array_equal(back.model.params, params)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "missing.pkl")
    p = tmp_path / "junk.pkl"
    p.write_bytes(pickle.dumps({"hello": 1}))
    with pytest.raises(ValueError):
        read_checkpoint(p)


def test_load_model_round_trip(tmp_path):
    tr = Trainer(small(total_steps=1024), seed=6)
    path = tr.save(tmp_path / "ck.pkl")
    model, cfg = load_model(path)
    np.testing.assert_array_equal(model.params, tr.model.params)
    assert cfg == tr.cfg


def test_race_and_ablation_smoke():
    race = Trainer(small(env="race", n_envs=2, n_steps=64, n_minibatches=2, total_steps=128, frame_stack=2), 0)
    row = race.iterate()
    assert row["iteration"] == 1 and np.isfinite(row["loss_v"])
    assert race.model.spec.n_gamma == 2 and race.model.spec.act_dim == 2
    abl = Trainer(small(ablate=True, n_envs=1, n_steps=64, n_minibatches=2, total_steps=64), 0)
    assert abl.model.spec.act_dim == 0 and abl.model.perturbed
    assert abl.iterate()["iteration"] == 1


def test_run_episode_and_summary():
    cfg = small().resolved()
    task = make_task(cfg)
    eps = [run_episode(task, lambda obs: (np.zeros(2), np.array([0.5])), r, max_steps=20)
           for r in episode_rngs(0, 3)]
    assert all(e["steps"] <= 20 and e["mean_gamma"] == 0.5 for e in eps)
    row = summarize(eps)
    assert row["episodes"] == 3 and 0 <= row["success_rate"] <= 1
    # evaluation generators are reproducible and distinct
    a, b = episode_rngs(7, 2)
    assert a.random() != b.random()
    assert episode_rngs(7, 1)[0].random() == episode_rngs(7, 2)[0].random()

import os

import numpy as np
import pytest

import gdt.ndcore as nd
from gdt import trainer
from gdt import trajstore as ts
from gdt.graphformer import ConfigError, GDTModel, ModelConfig
from gdt.trainer import (TrainAbort, TrainConfig, align_config, collate,
                         compute_loss, configs_from_flat, eval_loss,
                         parse_overrides, preset, resolve_loss, train,
                         train_step)


@pytest.fixture(scope="module")
def chain_ds(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "chain.gdtraj"
    return ts.generate_synthetic("chain:length=5,noise=0.0", eps=0.3,
                                 episodes=60, seed=0, path=str(path))


def micro_model_cfg(**kw):
    base = dict(d=16, heads=2, layers=1, K=4, max_timestep=10,
                dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def micro_train_cfg(out_dir, **kw):
    base = dict(batch_size=16, epochs=2, steps_per_epoch=5, lr=1e-3,
                schedule="constant", weight_decay=0.0, clip_norm=1.0,
                seed=0, out_dir=str(out_dir), log_every=2)
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------- config layer

def test_parse_overrides():
    got = parse_overrides(["model.d=64", "train.lr = 1e-3"])
    assert got == {"model.d": "64", "train.lr": "1e-3"}
    with pytest.raises(ConfigError):
        parse_overrides(["model.d"])
    with pytest.raises(ConfigError):
        parse_overrides(["=5"])


def test_configs_from_flat_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="model.dd"):
        configs_from_flat({"model.dd": "64"})


def test_configs_from_flat_applies_overrides_over_preset():
    m, t = configs_from_flat({"model.d": "32", "train.lr": "0.5"}, "atari")
    assert m.d == 32
    assert m.layers == 6
    assert t.lr == 0.5
    assert t.batch_size == 128


def test_atari_preset_values():
    m, t = preset("atari")
    assert (m.d, m.heads, m.layers, m.K) == (128, 8, 6, 30)
    assert m.activation == "gelu" and m.dropout == 0.1
    assert t.batch_size == 128 and t.epochs == 10
    assert t.lr == 6e-4 and t.betas == (0.9, 0.95)
    assert t.weight_decay == 0.1 and t.clip_norm == 1.0
    assert t.warmup_tokens == 512 * 20
    assert t.final_tokens == 6 * 500_000 * 30


def test_atari_plus_preset_values():
    m, t = preset("atari-plus")
    assert m.seq_enabled and m.seq_method == "stack"
    assert (m.seq_layers, m.seq_heads, m.seq_d, m.seq_patch) == (2, 4, 64, 14)
    assert t.batch_size == 64
    assert t.final_tokens == 10 * 500_000 * 30


def test_gym_preset_values():
    m, t = preset("gym")
    assert m.activation == "relu" and m.K == 20
    assert m.action_kind == "continuous"
    assert t.batch_size == 64 and t.lr == 1e-4
    assert t.weight_decay == 1e-4 and t.clip_norm == 0.25
    assert t.schedule == "gym" and t.warmup_steps == 100_000
    assert t.loss == "mse"


def test_gym_plus_preset_values():
    m, t = preset("gym-plus")
    assert m.seq_enabled and m.seq_method == "fusion"
    assert (m.seq_layers, m.seq_heads, m.seq_d) == (6, 8, 256)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("mujoco")


def test_align_config(chain_ds):
    m = align_config(ModelConfig(K=4, max_timestep=2), chain_ds)
    assert m.state_kind == "vector" and m.state_shape == (5,)
    assert m.action_kind == "discrete" and m.action_dim == 2
    assert m.max_timestep == 3
    assert m.K == 4


def test_train_config_flat_round_trip():
    t = TrainConfig(betas=(0.8, 0.9), rtg_target=3.5, loss="mse_onehot")
    back = TrainConfig.from_flat(t.to_flat())
    assert back == t
    t2 = TrainConfig()
    assert TrainConfig.from_flat(t2.to_flat()) == t2


# ------------------------------------------------------------------- losses

def test_resolve_loss_rules():
    assert resolve_loss("auto", "discrete") == "ce"
    assert resolve_loss("auto", "continuous") == "mse"
    assert resolve_loss("mse_onehot", "discrete") == "mse_onehot"
    with pytest.raises(ConfigError):
        resolve_loss("mse", "discrete")
    with pytest.raises(ConfigError):
        resolve_loss("ce", "continuous")
    with pytest.raises(ConfigError):
        resolve_loss("huber", "continuous")


def manual_ce(logits, targets, mask):
    total, n = 0.0, 0
    for row, t, m in zip(logits, targets, mask):
        if not m:
            continue
        z = row - row.max()
        total += np.log(np.exp(z).sum()) - z[t]
        n += 1
    return total / n


def test_compute_loss_ce_matches_manual():
    rng = np.random.default_rng(0)
    pred = nd.Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
    batch = {"actions": rng.integers(0, 4, (2, 3)),
             "mask": np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)}
    got = float(compute_loss(pred, batch, "ce").data)
    want = manual_ce(pred.data.reshape(6, 4).astype(np.float64),
                     batch["actions"].reshape(6), batch["mask"].reshape(6))
    assert np.isclose(got, want, rtol=1e-5)


def test_compute_loss_mse_matches_manual():
    rng = np.random.default_rng(1)
    pred = nd.Tensor(rng.standard_normal((2, 2, 3)).astype(np.float32))
    target = rng.standard_normal((2, 2, 3)).astype(np.float32)
    mask = np.array([[True, False], [True, True]])
    got = float(compute_loss(pred, {"actions": target, "mask": mask}, "mse").data)
    diff = (pred.data.astype(np.float64) - target)[mask]
    assert np.isclose(got, np.mean(diff ** 2), rtol=1e-5)


def test_compute_loss_mse_onehot_matches_manual():
    rng = np.random.default_rng(2)
    pred = nd.Tensor(rng.standard_normal((1, 3, 4)).astype(np.float32))
    actions = np.array([[0, 3, 1]])
    mask = np.ones((1, 3), dtype=bool)
    got = float(compute_loss(pred, {"actions": actions, "mask": mask},
                             "mse_onehot").data)
    onehot = np.eye(4)[actions.reshape(-1)]
    diff = pred.data.reshape(3, 4).astype(np.float64) - onehot
    assert np.isclose(got, np.mean(diff ** 2), rtol=1e-5)


def test_loss_unchanged_by_batch_duplication(chain_ds):
    mcfg = align_config(micro_model_cfg(), chain_ds)
    model = GDTModel(mcfg)
    std = ts.Standardizer.from_dataset(chain_ds)
    windows = ts.sample_windows(chain_ds, mcfg.K, 8, np.random.default_rng(0))
    single = collate(windows, std)
    double = collate(windows + windows, std)
    a = eval_loss(model, single, "ce")
    b = eval_loss(model, double, "ce")
    assert np.isclose(a, b, rtol=1e-6)


def test_loss_ignores_fully_padded_rows(chain_ds):
    mcfg = align_config(micro_model_cfg(), chain_ds)
    model = GDTModel(mcfg)
    std = ts.Standardizer.from_dataset(chain_ds)
    windows = ts.sample_windows(chain_ds, mcfg.K, 8, np.random.default_rng(0))
    batch = collate(windows, std)
    padded = {k: np.concatenate([v, v[:2]]) for k, v in batch.items()}
    padded["mask"][-2:] = False
    a = eval_loss(model, batch, "ce")
    b = eval_loss(model, padded, "ce")
    assert np.isclose(a, b, rtol=1e-6)


def test_reward_free_model_ignores_reward_relabeling(chain_ds):
    mcfg = align_config(micro_model_cfg(reward_setting="none"), chain_ds)
    model = GDTModel(mcfg)
    std = ts.Standardizer.from_dataset(chain_ds)
    windows = ts.sample_windows(chain_ds, mcfg.K, 8, np.random.default_rng(0))
    batch = collate(windows, std)
    relabeled = dict(batch)
    relabeled["rtg"] = batch["rtg"] * 5.0 + 1.0
    relabeled["prev_rewards"] = batch["prev_rewards"] + 2.0
    assert eval_loss(model, batch, "ce") == eval_loss(model, relabeled, "ce")


# -------------------------------------------------------------- train steps

def test_train_step_reduces_memorization_loss(tmp_path):
    expert = ts.generate_synthetic("chain:length=5,noise=0.0", eps=0.0,
                                   episodes=20, seed=1,
                                   path=str(tmp_path / "expert.gdtraj"))
    mcfg = align_config(micro_model_cfg(d=32, layers=2), expert)
    model = GDTModel(mcfg)
    opt = nd.AdamState(weight_decay=0.0, clip_norm=1.0,
                       decay_names=frozenset(model.decay))
    std = ts.Standardizer.from_dataset(expert)
    windows = ts.sample_windows(expert, mcfg.K, 16, np.random.default_rng(3))
    batch = collate(windows, std)
    losses = []
    for _ in range(300):
        loss, _ = train_step(model, opt, batch, 1e-3, "ce")
        losses.append(loss)
        if loss < 1e-2:
            break
    assert losses[-1] < 1e-2, f"stuck at {losses[-1]:.4f} after {len(losses)} steps"


def test_train_writes_artifacts(chain_ds, tmp_path):
    tcfg = micro_train_cfg(tmp_path / "run", eval_every=2, eval_episodes=2)
    res = train(chain_ds, micro_model_cfg(), tcfg)
    assert os.path.exists(tcfg.out_dir + "/config.txt")
    assert os.path.exists(tcfg.out_dir + "/train_log.csv")
    assert os.path.exists(res.last_path)
    assert os.path.exists(res.best_path)
    assert np.isfinite(res.final_loss)
    assert res.history
    assert len(res.eval_history) == 1
    with open(tcfg.out_dir + "/train_log.csv") as f:
        header = f.readline().strip()
    assert header == "step,epoch,loss,lr,grad_norm,wall_time"
    ck = nd.load_checkpoint(res.last_path)
    assert ck.metadata["env"] == "chain:length=5,noise=0"
    assert "score.expert" in ck.metadata
    assert ck.metadata["progress.step"] == "10"
    assert ck.optimizer is not None


def test_train_is_deterministic(chain_ds, tmp_path):
    r1 = train(chain_ds, micro_model_cfg(dropout=0.1),
               micro_train_cfg(tmp_path / "a"))
    r2 = train(chain_ds, micro_model_cfg(dropout=0.1),
               micro_train_cfg(tmp_path / "b"))
    for name in r1.model.params:
        assert np.array_equal(r1.model.params[name].data,
                              r2.model.params[name].data), name


def test_resume_matches_uninterrupted_run(chain_ds, tmp_path):
    full = train(chain_ds, micro_model_cfg(dropout=0.1),
                 micro_train_cfg(tmp_path / "full", epochs=4))
    half_cfg = micro_train_cfg(tmp_path / "half", epochs=2)
    train(chain_ds, micro_model_cfg(dropout=0.1), half_cfg)
    resumed_cfg = micro_train_cfg(tmp_path / "half", epochs=4)
    resumed = train(chain_ds, micro_model_cfg(dropout=0.1), resumed_cfg,
                    resume_from=str(tmp_path / "half" / "last.ckpt"))
    for name in full.model.params:
        np.testing.assert_allclose(
            resumed.model.params[name].data, full.model.params[name].data,
            atol=1e-5, err_msg=name)


def test_resume_rejects_changed_model(chain_ds, tmp_path):
    tcfg = micro_train_cfg(tmp_path / "run")
    res = train(chain_ds, micro_model_cfg(), tcfg)
    with pytest.raises(ConfigError, match="different model config"):
        train(chain_ds, micro_model_cfg(d=32), tcfg, resume_from=res.last_path)


def test_nan_abort_names_last_checkpoint(chain_ds, tmp_path):
    tcfg = micro_train_cfg(tmp_path / "run")
    res = train(chain_ds, micro_model_cfg(), tcfg)
    ck = nd.load_checkpoint(res.last_path)
    ck.params["gfc.w"][:] = np.nan
    corrupt = str(tmp_path / "corrupt.ckpt")
    nd.save_checkpoint(corrupt, ck.params, ck.optimizer, ck.metadata)
    resume_cfg = micro_train_cfg(tmp_path / "run2", epochs=4)
    with pytest.raises(TrainAbort, match="last good checkpoint"):
        train(chain_ds, micro_model_cfg(), resume_cfg, resume_from=corrupt)


def test_rng_state_round_trip():
    rng = np.random.default_rng(42)
    rng.standard_normal(10)
    blob = trainer._rng_state_json(rng)
    clone = trainer._rng_from_json(blob)
    assert np.array_equal(rng.standard_normal(5), clone.standard_normal(5))


# ---------------------------------------------------------------- ablation

def test_ablate_connection_axis(chain_ds, tmp_path):
    tcfg = micro_train_cfg(tmp_path / "ab", epochs=1, steps_per_epoch=3)
    rows = trainer.ablate(chain_ds, micro_model_cfg(), tcfg, "connection",
                          values=("causal", "none"), eval_episodes=2)
    assert [r["value"] for r in rows] == ["causal", "none"]
    assert all(np.isfinite(r["mean_return"]) for r in rows)
    assert os.path.exists(str(tmp_path / "ab" / "ablation_connection.csv"))


def test_ablate_unknown_axis(chain_ds, tmp_path):
    with pytest.raises(ConfigError, match="unknown ablation axis"):
        trainer.ablate(chain_ds, micro_model_cfg(),
                       micro_train_cfg(tmp_path / "x"), "width")

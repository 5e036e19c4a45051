"""Training loop: window sampling, loss, Adam with schedules, checkpoints.

Configs flatten to "section.key=value" strings, which is also the CLI
override syntax and the checkpoint metadata encoding, so a checkpoint always
carries enough to rebuild its model and continue the run.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import evalrollout
from . import ndcore as nd
from . import trajstore as ts
from .graphformer import ConfigError, GDTModel, ModelConfig
from .ndcore import AdamState, ScheduleConfig, OptimError, Tensor


class TrainAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 5
    steps_per_epoch: int = 0        # 0: one pass worth, total_steps // batch
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    schedule: str = "atari"         # "atari" | "gym" | "constant"
    warmup_tokens: int = 512 * 20
    final_tokens: int = 0           # 0: decay over the whole planned run
    warmup_steps: int = 100_000
    loss: str = "auto"              # "auto" | "ce" | "mse" | "mse_onehot"
    eval_every: int = 0             # epochs between rollout evals, 0 = off
    eval_episodes: int = 5
    rtg_target: float | None = None  # None: dataset expert score
    seed: int = 0
    out_dir: str = "runs/run"
    log_every: int = 10

    def to_flat(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if v is None:
                out[f"train.{k}"] = ""
            elif isinstance(v, tuple):
                out[f"train.{k}"] = ",".join(str(x) for x in v)
            else:
                out[f"train.{k}"] = str(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "TrainConfig":
        kw = {}
        defaults = cls()
        for f_ in cls.__dataclass_fields__.values():
            key = f"train.{f_.name}"
            if key not in flat:
                continue
            raw = flat[key]
            cur = getattr(defaults, f_.name)
            if raw == "":
                kw[f_.name] = None
            elif f_.name == "rtg_target":
                kw[f_.name] = float(raw)
            elif isinstance(cur, bool):
                kw[f_.name] = raw in ("True", "true", "1")
            elif isinstance(cur, int):
                kw[f_.name] = int(raw)
            elif isinstance(cur, float):
                kw[f_.name] = float(raw)
            elif isinstance(cur, tuple):
                kw[f_.name] = tuple(float(x) for x in raw.split(",") if x)
            else:
                kw[f_.name] = raw
        return cls(**kw)


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    """"section.key=value" strings -> flat dict; raises on malformed input."""
    flat = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, value = pair.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"override {pair!r} has an empty key")
        flat[key] = value.strip()
    return flat


def configs_from_flat(flat: dict[str, str],
                      preset_name: str | None = None) -> tuple[ModelConfig, TrainConfig]:
    if preset_name is not None:
        mcfg, tcfg = preset(preset_name)
        base_m = mcfg.to_flat()
        base_m.update({k: v for k, v in flat.items() if k.startswith("model.")})
        base_t = tcfg.to_flat()
        base_t.update({k: v for k, v in flat.items() if k.startswith("train.")})
        return ModelConfig.from_flat(base_m), TrainConfig.from_flat(base_t)
    known = ModelConfig().to_flat().keys() | TrainConfig().to_flat().keys()
    unknown = [k for k in flat if k not in known]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ModelConfig.from_flat(flat), TrainConfig.from_flat(flat)


# ------------------------------------------------------------------ presets

def preset(name: str) -> tuple[ModelConfig, TrainConfig]:
    """Published hyperparameter sets for the two benchmark families, plus
    their refiner variants. Dataset-dependent fields (shapes, action space,
    timestep range) are aligned at train time."""
    if name == "atari":
        m = ModelConfig(state_kind="image", state_shape=(84, 84, 4),
                        action_kind="discrete", action_dim=4, d=128, heads=8,
                        layers=6, K=30, max_timestep=2700, dropout=0.1,
                        activation="gelu")
        t = TrainConfig(batch_size=128, epochs=10, lr=6e-4, betas=(0.9, 0.95),
                        weight_decay=0.1, clip_norm=1.0, schedule="atari",
                        warmup_tokens=512 * 20, final_tokens=6 * 500_000 * m.K)
        return m, t
    if name == "atari-plus":
        m, t = preset("atari")
        m = replace(m, seq_enabled=True, seq_method="stack", seq_layers=2,
                    seq_heads=4, seq_d=64, seq_patch=14)
        t = replace(t, batch_size=64, final_tokens=10 * 500_000 * m.K)
        return m, t
    if name == "gym":
        m = ModelConfig(state_kind="vector", state_shape=(17,),
                        action_kind="continuous", action_dim=6, d=128, heads=8,
                        layers=6, K=20, max_timestep=1000, dropout=0.1,
                        activation="relu")
        t = TrainConfig(batch_size=64, epochs=5, lr=1e-4, weight_decay=1e-4,
                        clip_norm=0.25, schedule="gym", warmup_steps=100_000,
                        loss="mse")
        return m, t
    if name == "gym-plus":
        m, t = preset("gym")
        m = replace(m, seq_enabled=True, seq_method="fusion", seq_layers=6,
                    seq_heads=8, seq_d=256)
        return m, t
    raise ConfigError(f"unknown preset {name!r}")


def align_config(mcfg: ModelConfig, ds: ts.TrajectoryDataset) -> ModelConfig:
    """Fit dataset-derived fields so shapes always agree with the data."""
    return replace(mcfg,
                   state_kind=ds.state_kind,
                   state_shape=tuple(ds.state_shape),
                   action_kind=ds.action_kind,
                   action_dim=ds.action_dim,
                   max_timestep=max(mcfg.max_timestep, ds.max_length - 1))


# ------------------------------------------------------------------ batches

def collate(windows: list[ts.Window], std: ts.Standardizer) -> dict:
    states = np.stack([w.states for w in windows])
    actions = np.stack([w.actions for w in windows])
    if actions.dtype == np.uint32:
        actions = actions.astype(np.int64)
    return {
        "states": std.apply(states),
        "actions": actions,
        "rtg": np.stack([w.rtg for w in windows]).astype(np.float32),
        "prev_rewards": np.stack([w.prev_rewards for w in windows]),
        "timesteps": np.stack([w.timesteps for w in windows]),
        "mask": np.stack([w.mask for w in windows]),
    }


def resolve_loss(kind: str, action_kind: str) -> str:
    if kind == "auto":
        return "ce" if action_kind == "discrete" else "mse"
    if kind not in ("ce", "mse", "mse_onehot"):
        raise ConfigError(f"unknown loss {kind!r}")
    if kind == "mse" and action_kind == "discrete":
        raise ConfigError("plain mse needs continuous actions; "
                          "use mse_onehot for discrete ones")
    if kind in ("ce", "mse_onehot") and action_kind == "continuous":
        raise ConfigError(f"{kind} needs discrete actions")
    return kind


def compute_loss(pred: Tensor, batch: dict, kind: str) -> Tensor:
    b, k, a = pred.shape
    flat = nd.reshape(pred, (b * k, a))
    mask = np.asarray(batch["mask"]).reshape(-1)
    if kind == "ce":
        targets = np.asarray(batch["actions"]).reshape(-1)
        return nd.cross_entropy_logits(flat, targets, mask)
    if kind == "mse":
        target = np.asarray(batch["actions"], dtype=pred.dtype).reshape(b * k, a)
        return nd.mse_masked(flat, target, mask)
    if kind == "mse_onehot":
        ints = np.asarray(batch["actions"]).reshape(-1)
        onehot = np.eye(a, dtype=pred.dtype)[ints]
        return nd.mse_masked(flat, onehot, mask)
    raise ConfigError(f"unknown loss {kind!r}")


def train_step(model: GDTModel, opt: AdamState, batch: dict, lr: float,
               loss_kind: str) -> tuple[float, float]:
    """One optimizer step; returns (loss value, pre-clip gradient norm)."""
    model.zero_grads()
    with nd.ComputationTape() as tape:
        out = model.forward(batch, train=True)
        loss = compute_loss(out.pred, batch, loss_kind)
        tape.backward(loss)
    grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
    norm = nd.adam_step(model.params, grads, opt, lr)
    return float(loss.data), norm


def eval_loss(model: GDTModel, batch: dict, loss_kind: str) -> float:
    out = model.forward(batch, train=False)
    return float(compute_loss(out.pred, batch, loss_kind).data)


# --------------------------------------------------------------- the loop

@dataclass
class TrainResult:
    model: GDTModel
    optimizer: AdamState
    history: list[dict] = field(default_factory=list)
    eval_history: list[dict] = field(default_factory=list)
    last_path: str = ""
    best_path: str = ""
    final_loss: float = float("nan")


def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _rng_from_json(blob: str) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(blob)
    return rng


def _checkpoint_metadata(mcfg: ModelConfig, tcfg: TrainConfig, std: ts.Standardizer,
                         ds_meta: dict[str, str], step: int,
                         model: GDTModel, sampler: np.random.Generator) -> dict[str, str]:
    meta = {}
    meta.update(mcfg.to_flat())
    meta.update(tcfg.to_flat())
    meta.update(std.to_metadata())
    for key in ("env", "score.random", "score.expert"):
        if key in ds_meta:
            meta[key] = ds_meta[key]
    meta["progress.step"] = str(step)
    meta["rng.dropout"] = _rng_state_json(model.dropout_rng)
    meta["rng.sampler"] = _rng_state_json(sampler)
    return meta


def save_model_checkpoint(path: str, model: GDTModel, opt: AdamState | None,
                          metadata: dict[str, str]) -> None:
    nd.save_checkpoint(path, model.param_arrays(), opt, metadata)


def load_model_checkpoint(path: str) -> tuple[GDTModel, nd.Checkpoint]:
    ck = nd.load_checkpoint(path)
    mcfg = ModelConfig.from_flat(ck.metadata)
    model = GDTModel(mcfg)
    model.load_param_arrays(ck.params)
    if "rng.dropout" in ck.metadata:
        model.dropout_rng = _rng_from_json(ck.metadata["rng.dropout"])
    return model, ck


def train(ds: ts.TrajectoryDataset, mcfg: ModelConfig, tcfg: TrainConfig,
          resume_from: str | None = None, progress: bool = False) -> TrainResult:
    os.makedirs(tcfg.out_dir, exist_ok=True)
    mcfg = align_config(mcfg, ds)
    std = ts.Standardizer.from_dataset(ds)
    loss_kind = resolve_loss(tcfg.loss, mcfg.action_kind)

    start_step = 0
    if resume_from is not None:
        model, ck = load_model_checkpoint(resume_from)
        if model.cfg != mcfg:
            raise ConfigError("checkpoint was trained with a different model config")
        opt = ck.optimizer
        if opt is None:
            raise ConfigError(f"{resume_from} has no optimizer state to resume from")
        sampler = _rng_from_json(ck.metadata["rng.sampler"])
        start_step = int(ck.metadata.get("progress.step", "0"))
    else:
        model = GDTModel(mcfg)
        opt = AdamState(betas=tcfg.betas, eps=tcfg.adam_eps,
                        weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm,
                        decay_names=frozenset(model.decay))
        sampler = np.random.default_rng(tcfg.seed)

    steps_per_epoch = tcfg.steps_per_epoch or max(1, ds.total_steps // tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    tokens_per_step = tcfg.batch_size * mcfg.K * model.per
    sched = ScheduleConfig(
        mode="gym" if tcfg.schedule == "constant" else tcfg.schedule,
        base_lr=tcfg.lr,
        warmup_tokens=tcfg.warmup_tokens,
        final_tokens=tcfg.final_tokens or max(1, total_steps * tokens_per_step),
        tokens_per_step=tokens_per_step,
        warmup_steps=1 if tcfg.schedule == "constant" else tcfg.warmup_steps,
    )

    cfg_path = os.path.join(tcfg.out_dir, "config.txt")
    with open(cfg_path, "w") as f:
        flat = {}
        flat.update(mcfg.to_flat())
        flat.update(tcfg.to_flat())
        for k in sorted(flat):
            f.write(f"{k}={flat[k]}\n")

    result = TrainResult(model=model, optimizer=opt)
    result.last_path = os.path.join(tcfg.out_dir, "last.ckpt")
    result.best_path = os.path.join(tcfg.out_dir, "best.ckpt")
    log_path = os.path.join(tcfg.out_dir, "train_log.csv")
    log_f = open(log_path, "a" if resume_from else "w")
    if not resume_from:
        log_f.write("step,epoch,loss,lr,grad_norm,wall_time\n")

    env_spec = ds.metadata.get("env")
    best_key = -float("inf")
    have_ckpt = resume_from is not None
    t0 = time.monotonic()
    loss = float("nan")
    try:
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            windows = ts.sample_windows(ds, mcfg.K, tcfg.batch_size, sampler)
            batch = collate(windows, std)
            lr = nd.lr_schedule(step, sched)
            try:
                loss, norm = train_step(model, opt, batch, lr, loss_kind)
            except OptimError as e:
                _abort(e, result, have_ckpt)
            if not np.isfinite(loss):
                _abort(f"non-finite loss {loss} at step {step}", result, have_ckpt)
            if step % tcfg.log_every == 0 or step == total_steps - 1:
                row = {"step": step, "epoch": epoch, "loss": loss, "lr": lr,
                       "grad_norm": norm, "wall_time": time.monotonic() - t0}
                result.history.append(row)
                log_f.write(f"{step},{epoch},{loss:.6g},{lr:.6g},{norm:.6g},"
                            f"{row['wall_time']:.3f}\n")
                log_f.flush()
                if progress:
                    print(f"step {step:6d} epoch {epoch:3d} loss {loss:.4f} "
                          f"lr {lr:.2e} grad_norm {norm:.3f}")
            end_of_epoch = (step + 1) % steps_per_epoch == 0
            if end_of_epoch or step == total_steps - 1:
                meta = _checkpoint_metadata(mcfg, tcfg, std, ds.metadata,
                                            step + 1, model, sampler)
                save_model_checkpoint(result.last_path, model, opt, meta)
                have_ckpt = True
                key = -loss
                if (tcfg.eval_every and env_spec
                        and (epoch + 1) % tcfg.eval_every == 0):
                    report = evalrollout.evaluate(
                        model, env_spec, std,
                        rtg_target=_rtg_target(tcfg, ds),
                        episodes=tcfg.eval_episodes, seed=tcfg.seed + epoch)
                    result.eval_history.append(
                        {"epoch": epoch, "step": step,
                         "mean_return": report.mean_return})
                    if progress:
                        print(f"eval epoch {epoch}: return "
                              f"{report.mean_return:.3f}")
                    key = report.mean_return
                if key >= best_key:
                    best_key = key
                    save_model_checkpoint(result.best_path, model, opt, meta)
    finally:
        log_f.close()
    result.final_loss = loss
    return result


def _rtg_target(tcfg: TrainConfig, ds: ts.TrajectoryDataset) -> float:
    if tcfg.rtg_target is not None:
        return tcfg.rtg_target
    if "score.expert" in ds.metadata:
        return float(ds.metadata["score.expert"])
    raise ConfigError("no rtg target: set train.rtg_target or use a dataset "
                      "with a score.expert entry")


def _abort(reason, result: TrainResult, have_ckpt: bool):
    hint = (f"; last good checkpoint at {result.last_path}" if have_ckpt
            else "; no checkpoint was written yet")
    raise TrainAbort(f"training aborted: {reason}{hint}")


# ------------------------------------------------------------------ ablation

ABLATION_AXES = {
    "connection": ("causal", "full", "random", "none"),
    "reward": ("rtg", "step", "none"),
    "length": (2, 4, 8),
    "stmethod": ("stack", "fusion", "replace"),
}


def ablate(ds: ts.TrajectoryDataset, mcfg: ModelConfig, tcfg: TrainConfig,
           axis: str, values: tuple | None = None,
           eval_episodes: int = 20, progress: bool = False) -> list[dict]:
    """Train one model per value of the chosen axis and roll each one out.

    Returns one row per value with the trained model's final loss and mean
    evaluation return; also writes ablation_<axis>.csv under tcfg.out_dir.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"choose from {', '.join(sorted(ABLATION_AXES))}")
    values = values if values is not None else ABLATION_AXES[axis]
    env_spec = ds.metadata.get("env")
    if not env_spec:
        raise ConfigError("ablation needs a dataset with an env entry")
    rows = []
    base_out = tcfg.out_dir
    for value in values:
        if axis == "connection":
            m = replace(mcfg, connection=str(value))
        elif axis == "reward":
            m = replace(mcfg, reward_setting=str(value))
        elif axis == "length":
            m = replace(mcfg, K=int(value))
        else:
            m = replace(mcfg, seq_enabled=True, seq_method=str(value))
        t = replace(tcfg, out_dir=os.path.join(base_out, f"{axis}_{value}"))
        res = train(ds, m, t, progress=progress)
        std = ts.Standardizer.from_dataset(ds)
        report = evalrollout.evaluate(
            res.model, env_spec, std, rtg_target=_rtg_target(t, ds),
            episodes=eval_episodes, seed=t.seed + 1000)
        rows.append({"axis": axis, "value": str(value),
                     "final_loss": res.final_loss,
                     "mean_return": report.mean_return})
        if progress:
            print(f"[ablate {axis}={value}] loss {res.final_loss:.4f} "
                  f"return {report.mean_return:.3f}")
    os.makedirs(base_out, exist_ok=True)
    out_csv = os.path.join(base_out, f"ablation_{axis}.csv")
    with open(out_csv, "w") as f:
        f.write("axis,value,final_loss,mean_return\n")
        for r in rows:
            f.write(f"{r['axis']},{r['value']},{r['final_loss']:.6g},"
                    f"{r['mean_return']:.6g}\n")
    return rows
